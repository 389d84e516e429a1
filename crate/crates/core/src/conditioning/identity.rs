//! Identity conditioning: face embedding stand-in and reference features.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::model::attention::AttnProj;
use crate::model::dit::ReferenceFeatures;
use crate::model::latent::LatentClip;
use crate::model::layers;
use crate::model::params::{Graph, Init, ParamGroup, ParamId, ParamStore};
use crate::tensor::{NdTensor, SeedRng, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum IdentityMode {
    None,
    FaceAttention,
    FaceAdaln,
    RefNet,
    FaceAttentionPlusRefNet,
}

impl IdentityMode {
    pub const ALL: [IdentityMode; 5] =
        [Self::None, Self::FaceAttention, Self::FaceAdaln, Self::RefNet, Self::FaceAttentionPlusRefNet];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::FaceAttention => "face_attention",
            Self::FaceAdaln => "face_adaln",
            Self::RefNet => "ref_net",
            Self::FaceAttentionPlusRefNet => "face_attention_plus_ref_net",
        }
    }

    pub fn uses_ref_net(self) -> bool {
        matches!(self, Self::RefNet | Self::FaceAttentionPlusRefNet)
    }

    pub fn uses_face_attention(self) -> bool {
        matches!(self, Self::FaceAttention | Self::FaceAttentionPlusRefNet)
    }

    pub fn uses_face_adaln(self) -> bool {
        self == Self::FaceAdaln
    }

    pub fn uses_face(self) -> bool {
        self.uses_face_attention() || self.uses_face_adaln()
    }
}

impl fmt::Display for IdentityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IdentityMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown identity mode {s:?}")))
    }
}

/// Face embedding plus either the reference latent (features computed on
/// the fly) or precomputed reference features.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityCondition {
    pub mode: IdentityMode,
    pub face_embed: NdTensor,
    pub ref_latent: Option<LatentClip>,
    pub ref_features: Option<ReferenceFeatures>,
}

impl IdentityCondition {
    pub fn new(mode: IdentityMode, face_embed: NdTensor, ref_latent: Option<LatentClip>) -> Result<Self> {
        let c = Self { mode, face_embed, ref_latent, ref_features: None };
        c.validate()?;
        Ok(c)
    }

    pub fn with_features(mut self, features: ReferenceFeatures) -> Self {
        self.ref_features = Some(features);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.face_embed.rank() != 2 || self.face_embed.dims()[0] != 1 {
            return shape_err(format!("face embedding must be [1, d], got {:?}", self.face_embed.dims()));
        }
        if self.mode.uses_ref_net() && self.ref_latent.is_none() && self.ref_features.is_none() {
            return Err(Error::Contract(format!(
                "identity mode {} needs a reference image or reference features",
                self.mode
            )));
        }
        Ok(())
    }
}

/// InsightFace stand-in: fixed random projection of reference pixels.
#[derive(Clone, Debug)]
pub struct FaceEncoder {
    pub weight: ParamId,
}

impl FaceEncoder {
    pub fn new(store: &mut ParamStore, pixels: usize, face_dim: usize, rng: &mut SeedRng) -> Result<Self> {
        let weight = store.init("face_encoder.w", ParamGroup::FaceEncoder, &[pixels, face_dim], Init::Lecun, rng)?;
        Ok(Self { weight })
    }

    /// `[1, face_dim]` embedding of a single-frame image.
    pub fn encode(&self, store: &ParamStore, image: &NdTensor) -> Result<NdTensor> {
        let w = store.get(self.weight);
        if image.len() != w.dims()[0] {
            return shape_err(format!("face encoder expects {} pixels, got {:?}", w.dims()[0], image.dims()));
        }
        crate::tensor::ops::matmul(&image.reshape(&[1, image.len()])?, w)
    }
}

/// Cross-attention of vision tokens onto the face embedding token.
#[derive(Clone, Debug)]
pub struct FaceAttention {
    pub attn: AttnProj,
}

impl FaceAttention {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, face_dim: usize, rng: &mut SeedRng) -> Result<Self> {
        Ok(Self { attn: AttnProj::new(store, name, ParamGroup::FaceAttention, dim, face_dim, true, rng)? })
    }

    pub fn forward(&self, g: &mut Graph, x: Var, face: Var, heads: usize) -> Result<Var> {
        let h = layers::norm(g, x)?;
        let d = self.attn.attend(g, h, face, None, heads)?;
        g.tape.add(x, d)
    }
}

/// `tokens + SelfAttention(tokens, z_id)`: queries from `tokens`, keys and
/// values from `tokens` followed by `reference`.
pub fn reference_attention(g: &mut Graph, attn: &AttnProj, tokens: Var, reference: Var, heads: usize) -> Result<Var> {
    let kv = g.tape.concat(&[tokens, reference], 0)?;
    let d = attn.attend(g, tokens, kv, None, heads)?;
    g.tape.add(tokens, d)
}

/// Forward-only identity injection at one layer.
///
/// Reference modes attend over `tokens` plus that layer's reference features
/// with `ref_attn`; face-attention modes then cross-attend to the face token.
pub fn inject_identity(
    store: &ParamStore,
    ref_attn: &AttnProj,
    face_attn: Option<&FaceAttention>,
    tokens: &NdTensor,
    id: &IdentityCondition,
    layer_index: usize,
    heads: usize,
) -> Result<NdTensor> {
    let mut g = Graph::inference(store);
    let mut x = g.constant(tokens.clone());
    if id.mode.uses_ref_net() {
        let feats = id
            .ref_features
            .as_ref()
            .ok_or_else(|| Error::Contract("reference mode without reference features".into()))?;
        let layer = feats
            .layers()
            .get(layer_index)
            .ok_or_else(|| Error::Index(format!("layer {layer_index} beyond {} reference layers", feats.depth())))?;
        let r = g.constant(layer.clone());
        x = reference_attention(&mut g, ref_attn, x, r, heads)?;
    }
    if id.mode.uses_face_attention() {
        let face_attn =
            face_attn.ok_or_else(|| Error::Contract("face attention mode without face attention layer".into()))?;
        let f = g.constant(id.face_embed.clone());
        x = face_attn.forward(&mut g, x, f, heads)?;
    }
    Ok(g.value(x).clone())
}
