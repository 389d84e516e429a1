//! Diffusion transformer, causal codec and supporting layers.

pub mod attention;
pub mod checkpoint;
pub mod codec;
pub mod dit;
pub mod latent;
pub mod layers;
pub mod params;
pub mod patch;
pub mod rope;

pub use attention::full_attention_3d;
pub use codec::CausalCodec;
pub use dit::{AnimaModel, DitConfig, ReferenceFeatures};
pub use latent::{FrameRole, LatentClip};
pub use params::{FreezeMask, Graph, ParamGroup, ParamStore};
pub use patch::Patchifier;
pub use rope::{rope_3d, Rope3d};
