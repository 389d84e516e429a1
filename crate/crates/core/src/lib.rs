//! Desk-scale audio-driven diffusion transformer for portrait video.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense ND arrays with a reverse-mode gradient tape.
//! * [`diffusion`]: variance schedules, forward noising, v-parameterisation, DDIM-style steps.
//! * [`model`]: causal latent codec, patch embedding, 3D RoPE, attention, DiT and reference network.
//! * [`conditioning`]: audio, identity, text and motion-frame condition pathways.
//! * [`guidance`]: three-scale classifier-free guidance, clip sampling and extrapolation.
//! * [`trainer`]: synthetic corpus, two-phase training, ablation proxies.
//! * [`datapipe`]: manifest curation, 3:2 cropping, corpus statistics.
//! * [`evalmetrics`]: Fréchet distance and dynamic degree.
//! * [`selfcheck`]: finite-difference gradient checks.

pub mod conditioning;
pub mod datapipe;
pub mod diffusion;
pub mod error;
pub mod evalmetrics;
pub mod guidance;
pub mod model;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::NdTensor;
