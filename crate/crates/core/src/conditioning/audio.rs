//! Audio features, projection and the four injection strategies.

use std::fmt;
use std::str::FromStr;

use crate::error::{shape_err, Error, Result};
use crate::model::attention::AttnProj;
use crate::model::layers::{self, Linear};
use crate::model::params::{Graph, Init, ParamGroup, ParamStore};
use crate::tensor::{ops, NdTensor, SeedRng, Var};

/// Number of stand-in encoder layers whose outputs are concatenated.
pub const AUDIO_LAYERS: usize = 12;
/// Per-frame statistics fed to every stand-in layer.
pub const STAT_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioFeatureConfig {
    pub layer_dim: usize,
    pub samples_per_frame: usize,
    /// Trailing window, in frames, of the smoothed-envelope statistic.
    pub window: usize,
    pub seed: u64,
}

impl Default for AudioFeatureConfig {
    fn default() -> Self {
        Self { layer_dim: 4, samples_per_frame: 4, window: 2, seed: 0x5eed_a0d10 }
    }
}

impl AudioFeatureConfig {
    pub fn width(&self) -> usize {
        AUDIO_LAYERS * self.layer_dim
    }
}

/// Per-frame audio features and, once projected, per-frame model-width tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioEmbedding {
    features: NdTensor,
    layer_dim: usize,
    projected: Option<NdTensor>,
}

impl AudioEmbedding {
    pub fn new(features: NdTensor, layer_dim: usize) -> Result<Self> {
        if features.rank() != 2 || features.dims()[1] != AUDIO_LAYERS * layer_dim {
            return shape_err(format!(
                "audio features must be [frames, {}], got {:?}",
                AUDIO_LAYERS * layer_dim,
                features.dims()
            ));
        }
        Ok(Self { features, layer_dim, projected: None })
    }

    pub fn features(&self) -> &NdTensor {
        &self.features
    }

    pub fn projected(&self) -> Option<&NdTensor> {
        self.projected.as_ref()
    }

    pub fn layer_dim(&self) -> usize {
        self.layer_dim
    }

    pub fn frames(&self) -> usize {
        self.features.dims()[0]
    }

    /// Output of stand-in layer `k` for every frame.
    pub fn layer(&self, k: usize) -> Result<NdTensor> {
        ops::slice(&self.features, 1, k * self.layer_dim, self.layer_dim)
    }

    /// Frames `[start, start + len)`; drops any projection.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.frames() {
            return Err(Error::Index(format!(
                "audio frames [{start}, {}) outside {} frames",
                start + len,
                self.frames()
            )));
        }
        Ok(Self { features: ops::slice(&self.features, 0, start, len)?, layer_dim: self.layer_dim, projected: None })
    }
}

/// `[frames, 4]` statistics: trailing-window mean, frame mean, rms, last sample.
pub fn frame_stats(signal: &[f32], cfg: &AudioFeatureConfig) -> Result<NdTensor> {
    if signal.is_empty() {
        return Err(Error::Config("audio signal is empty".into()));
    }
    let spf = cfg.samples_per_frame;
    if spf == 0 || cfg.window == 0 || !signal.len().is_multiple_of(spf) {
        return shape_err(format!("signal of {} samples does not split into frames of {spf}", signal.len()));
    }
    let means: Vec<f64> = signal.chunks(spf).map(|c| c.iter().map(|&x| x as f64).sum::<f64>() / spf as f64).collect();
    let env = trailing_mean(&means, cfg.window);
    let mut out = Vec::with_capacity(means.len() * STAT_DIM);
    for (f, chunk) in signal.chunks(spf).enumerate() {
        let rms = (chunk.iter().map(|&x| x as f64 * x as f64).sum::<f64>() / spf as f64).sqrt();
        out.extend_from_slice(&[env[f] as f32, means[f] as f32, rms as f32, chunk[spf - 1]]);
    }
    NdTensor::new(vec![means.len(), STAT_DIM], out)
}

/// Mean of `x[max(0, i-w+1) ..= i]` for every `i`.
pub fn trailing_mean(x: &[f64], w: usize) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            x[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// Weights and biases of stand-in layer `k`.
pub fn layer_weights(cfg: &AudioFeatureConfig, k: usize) -> Result<(NdTensor, NdTensor)> {
    let mut rng = SeedRng::new(cfg.seed).split_index("audio_layer", k as u64);
    let w = NdTensor::randn(&[STAT_DIM, cfg.layer_dim], &mut rng)?;
    let b = NdTensor::randn(&[cfg.layer_dim], &mut rng)?.map(|x| 0.1 * x);
    Ok((w, b))
}

/// Deterministic wav2vec stand-in: twelve fixed affine maps of per-frame
/// statistics, concatenated per frame.
pub fn synth_audio_features(signal: &[f32], cfg: &AudioFeatureConfig) -> Result<AudioEmbedding> {
    let stats = frame_stats(signal, cfg)?;
    let mut parts = Vec::with_capacity(AUDIO_LAYERS);
    for k in 0..AUDIO_LAYERS {
        let (w, b) = layer_weights(cfg, k)?;
        parts.push(ops::add(&ops::matmul(&stats, &w)?, &b)?);
    }
    let refs: Vec<&NdTensor> = parts.iter().collect();
    AudioEmbedding::new(ops::concat(&refs, 1)?, cfg.layer_dim)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Identity,
}

impl FromStr for Activation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Self::Gelu),
            "identity" => Ok(Self::Identity),
            _ => Err(Error::Config(format!("unknown activation {s:?}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gelu => "gelu",
            Self::Identity => "identity",
        })
    }
}

/// `L3(act(L2(act(L1 x))))`, frame by frame.
#[derive(Clone, Debug)]
pub struct AudioProjection {
    pub l1: Linear,
    pub l2: Linear,
    pub l3: Linear,
    pub act: Activation,
}

impl AudioProjection {
    pub fn new(store: &mut ParamStore, in_dim: usize, dim: usize, act: Activation, rng: &mut SeedRng) -> Result<Self> {
        let g = ParamGroup::AudioAttention;
        Ok(Self {
            l1: Linear::new(store, "audio.proj.l1", g, in_dim, dim, Init::Lecun, true, rng)?,
            l2: Linear::new(store, "audio.proj.l2", g, dim, dim, Init::Lecun, true, rng)?,
            l3: Linear::new(store, "audio.proj.l3", g, dim, dim, Init::Lecun, true, rng)?,
            act,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = self.l1.forward(g, x)?;
        let h = self.activate(g, h);
        let h = self.l2.forward(g, h)?;
        let h = self.activate(g, h);
        self.l3.forward(g, h)
    }

    fn activate(&self, g: &mut Graph, x: Var) -> Var {
        match self.act {
            Activation::Gelu => g.tape.gelu(x),
            Activation::Identity => x,
        }
    }
}

/// Returns `a` with its projected tokens filled in.
pub fn project_audio(store: &ParamStore, proj: &AudioProjection, a: &AudioEmbedding) -> Result<AudioEmbedding> {
    let mut g = Graph::inference(store);
    let x = g.constant(a.features.clone());
    let y = proj.forward(&mut g, x)?;
    Ok(AudioEmbedding { projected: Some(g.value(y).clone()), ..a.clone() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AudioStrategy {
    SelfAttention,
    Adaln,
    AdalnZero,
    CrossAttention,
}

impl AudioStrategy {
    pub const ALL: [AudioStrategy; 4] = [Self::SelfAttention, Self::Adaln, Self::AdalnZero, Self::CrossAttention];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SelfAttention => "self_attention",
            Self::Adaln => "adaln",
            Self::AdalnZero => "adaln_zero",
            Self::CrossAttention => "cross_attention",
        }
    }
}

impl fmt::Display for AudioStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AudioStrategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown audio strategy {s:?}")))
    }
}

/// How vision tokens are grouped against audio frames for cross-attention.
///
/// Group `j` covers `group_tokens` consecutive vision tokens and attends to
/// audio rows `windows[j]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AudioLayout {
    pub group_tokens: usize,
    pub windows: Vec<(usize, usize)>,
}

impl AudioLayout {
    /// Every vision token sees every audio frame.
    pub fn full(tokens: usize, frames: usize) -> Self {
        Self { group_tokens: tokens, windows: vec![(0, frames)] }
    }

    /// `groups` groups of `group_tokens`, each aligned with `frames_per_group` audio frames.
    pub fn per_frame(groups: usize, group_tokens: usize, frames_per_group: usize) -> Self {
        Self { group_tokens, windows: (0..groups).map(|j| (j * frames_per_group, frames_per_group)).collect() }
    }
}

/// One audio injection sublayer.
#[derive(Clone, Debug)]
pub enum AudioInjector {
    SelfAttention {
        attn: AttnProj,
    },
    CrossAttention {
        attn: AttnProj,
    },
    /// Shift/scale from pooled audio; zero-initialised output projection.
    Adaln {
        modulation: Linear,
        out: Linear,
    },
    /// Shift/scale/gate from pooled audio, all zero-initialised.
    AdalnZero {
        modulation: Linear,
        out: Linear,
    },
}

impl AudioInjector {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        strategy: AudioStrategy,
        dim: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let g = ParamGroup::AudioAttention;
        Ok(match strategy {
            AudioStrategy::SelfAttention => {
                Self::SelfAttention { attn: AttnProj::new(store, name, g, dim, dim, true, rng)? }
            }
            AudioStrategy::CrossAttention => {
                Self::CrossAttention { attn: AttnProj::new(store, name, g, dim, dim, true, rng)? }
            }
            AudioStrategy::Adaln => Self::Adaln {
                modulation: Linear::new(store, &format!("{name}.mod"), g, dim, 2 * dim, Init::Lecun, true, rng)?,
                out: Linear::new(store, &format!("{name}.out"), g, dim, dim, Init::Zeros, true, rng)?,
            },
            AudioStrategy::AdalnZero => Self::AdalnZero {
                modulation: Linear::new(store, &format!("{name}.mod"), g, dim, 3 * dim, Init::Zeros, true, rng)?,
                out: Linear::new(store, &format!("{name}.out"), g, dim, dim, Init::Lecun, true, rng)?,
            },
        })
    }

    pub fn strategy(&self) -> AudioStrategy {
        match self {
            Self::SelfAttention { .. } => AudioStrategy::SelfAttention,
            Self::CrossAttention { .. } => AudioStrategy::CrossAttention,
            Self::Adaln { .. } => AudioStrategy::Adaln,
            Self::AdalnZero { .. } => AudioStrategy::AdalnZero,
        }
    }

    /// Residual update of vision tokens `x` from projected audio tokens `audio`.
    pub fn forward(&self, g: &mut Graph, x: Var, audio: Var, layout: &AudioLayout, heads: usize) -> Result<Var> {
        let n = g.tape.dims(x)[0];
        let delta = match self {
            Self::CrossAttention { attn } => {
                if layout.group_tokens * layout.windows.len() != n {
                    return shape_err(format!(
                        "audio layout covers {} tokens, got {n}",
                        layout.group_tokens * layout.windows.len()
                    ));
                }
                let h = layers::norm(g, x)?;
                let mut outs = Vec::with_capacity(layout.windows.len());
                for (j, &(start, len)) in layout.windows.iter().enumerate() {
                    let q = g.tape.slice(h, 0, j * layout.group_tokens, layout.group_tokens)?;
                    let kv = g.tape.slice(audio, 0, start, len)?;
                    outs.push(attn.attend(g, q, kv, None, heads)?);
                }
                if outs.len() == 1 {
                    outs[0]
                } else {
                    g.tape.concat(&outs, 0)?
                }
            }
            Self::SelfAttention { attn } => {
                let h = layers::norm(g, x)?;
                let seq = g.tape.concat(&[h, audio], 0)?;
                let all = attn.attend(g, seq, seq, None, heads)?;
                g.tape.slice(all, 0, 0, n)?
            }
            Self::Adaln { modulation, out } => {
                let pooled = layers::mean_rows(g, audio)?;
                let m = modulation.forward(g, pooled)?;
                let c = layers::chunks(g, m, 2)?;
                let h = layers::norm(g, x)?;
                let h = layers::modulate(g, h, c[0], c[1])?;
                out.forward(g, h)?
            }
            Self::AdalnZero { modulation, out } => {
                let pooled = layers::mean_rows(g, audio)?;
                let m = modulation.forward(g, pooled)?;
                let c = layers::chunks(g, m, 3)?;
                let h = layers::norm(g, x)?;
                let h = layers::modulate(g, h, c[0], c[1])?;
                let h = out.forward(g, h)?;
                g.tape.mul(h, c[2])?
            }
        };
        g.tape.add(x, delta)
    }
}

/// Forward-only audio injection into `tokens`.
pub fn inject_audio(
    store: &ParamStore,
    injector: &AudioInjector,
    tokens: &NdTensor,
    audio: &AudioEmbedding,
    layout: &AudioLayout,
    heads: usize,
) -> Result<NdTensor> {
    let projected =
        audio.projected().ok_or_else(|| Error::Contract("audio must be projected before injection".into()))?;
    let mut g = Graph::inference(store);
    let x = g.constant(tokens.clone());
    let a = g.constant(projected.clone());
    let y = injector.forward(&mut g, x, a, layout, heads)?;
    Ok(g.value(y).clone())
}
