//! Two-phase training with freezing, condition dropout and motion masking.

pub mod ablation;
pub mod synthetic;

use std::fmt;
use std::str::FromStr;

use crate::conditioning::{synth_audio_features, AudioEmbedding, ConditionSet, IdentityCondition, TextEmbedding};
use crate::diffusion::{q_sample, v_target, NoisePair, Schedule};
use crate::error::{shape_err, Error, Result};
use crate::model::latent::LatentClip;
use crate::model::params::{Graph, ParamId};
use crate::model::patch;
use crate::model::{AnimaModel, FreezeMask, ParamGroup};
use crate::tensor::{ops, NdTensor, SeedRng};

pub use synthetic::{gen_synthetic, gen_synthetic_range, SyntheticConfig, SyntheticSample};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Identity,
    Audio,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Identity => "identity",
            Phase::Audio => "audio",
        }
    }

    /// Groups updated in this phase; everything else is frozen.
    pub fn mask(self) -> FreezeMask {
        match self {
            Phase::Identity => FreezeMask::with_trainable(&[ParamGroup::FullAttention, ParamGroup::FaceAttention]),
            Phase::Audio => FreezeMask::with_trainable(&[ParamGroup::AudioAttention]),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Phase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Phase::Identity),
            "audio" => Ok(Phase::Audio),
            _ => Err(Error::Config(format!("unknown phase {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
    pub drop_prob: f64,
    pub motion_mask_prob: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            phase: Phase::Identity,
            steps: 500,
            lr: 1e-5,
            batch: 1,
            drop_prob: 0.05,
            motion_mask_prob: 0.25,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("drop_prob", self.drop_prob), ("motion_mask_prob", self.motion_mask_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be at least 1".into()));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("lr must be finite and nonnegative, got {}", self.lr)));
        }
        Ok(())
    }
}

/// A synthetic sample encoded once for a given model.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    /// Clean latent clip `[l, H, W, C]`.
    pub z0: NdTensor,
    /// Condition half holding the motion latents, zero-padded to `l`.
    pub motion: NdTensor,
    pub audio: AudioEmbedding,
    pub text: TextEmbedding,
    pub identity: IdentityCondition,
    /// Ground-truth pixels of the clip, `[l * s, H0, W0, C0]`.
    pub pixels: NdTensor,
}

/// Encodes `sample` into training tensors; the first `n` latent frames are
/// the motion context and the next `l` the target clip.
pub fn prepare(model: &AnimaModel, sample: &SyntheticSample, n: usize) -> Result<PreparedSample> {
    let c = &model.cfg;
    let (l, s) = (c.frames, c.codec_stride);
    if sample.video.dims()[0] != (n + l) * s {
        return shape_err(format!(
            "sample has {} frames, need {} for n={n}, l={l}",
            sample.video.dims()[0],
            (n + l) * s
        ));
    }
    let latent = model.codec.encode(&model.store, &sample.video)?;
    let z0 = latent.slice_frames(n, l)?.into_data();
    let motion = if n == 0 {
        NdTensor::zeros(z0.dims())?
    } else {
        ops::pad(&latent.slice_frames(0, n)?.into_data(), 0, 0, l - n.min(l))?
    };
    let feats = synth_audio_features(&sample.audio_signal, &c.audio)?;
    let audio = feats.slice_frames(n * s, l * s)?;
    let (face, ref_latent) = model.encode_reference(&sample.ref_image)?;
    let identity = IdentityCondition::new(c.identity_mode, face, Some(ref_latent))?;
    let pixels = ops::slice(&sample.video, 0, n * s, l * s)?;
    Ok(PreparedSample { z0, motion, audio, text: sample.text_embed.clone(), identity, pixels })
}

pub fn prepare_all(model: &AnimaModel, samples: &[SyntheticSample], n: usize) -> Result<Vec<PreparedSample>> {
    samples.iter().map(|s| prepare(model, s, n)).collect()
}

/// Random choices of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepDraws {
    pub t: usize,
    pub noise: NdTensor,
    pub drop_text: bool,
    pub drop_audio: bool,
    pub drop_identity: bool,
    pub mask_motion: bool,
}

impl StepDraws {
    pub fn sample(rng: &mut SeedRng, cfg: &TrainConfig, schedule: &Schedule, dims: &[usize]) -> Result<Self> {
        let t = 1 + rng.below(schedule.steps());
        let noise = NdTensor::randn(dims, rng)?;
        Ok(Self {
            t,
            noise,
            drop_identity: rng.bernoulli(cfg.drop_prob),
            drop_audio: rng.bernoulli(cfg.drop_prob),
            drop_text: rng.bernoulli(cfg.drop_prob),
            mask_motion: rng.bernoulli(cfg.motion_mask_prob),
        })
    }
}

/// Conditions after dropout; the audio pathway is off during phase identity.
pub fn step_conditions(sample: &PreparedSample, d: &StepDraws, phase: Phase) -> ConditionSet {
    ConditionSet {
        text: (!d.drop_text).then(|| sample.text.clone()),
        audio: (phase == Phase::Audio && !d.drop_audio).then(|| sample.audio.clone()),
        identity: (!d.drop_identity).then(|| sample.identity.clone()),
    }
}

/// Mean squared error between predicted and target v.
pub fn v_loss(pred: &NdTensor, target: &NdTensor) -> Result<f32> {
    Ok(ops::mse(pred, target)?.item())
}

/// Loss and parameter gradients for one sample under fixed draws.
pub fn loss_and_grads(
    model: &AnimaModel,
    sample: &PreparedSample,
    d: &StepDraws,
    phase: Phase,
    schedule: &Schedule,
) -> Result<(f32, Vec<(ParamId, NdTensor)>)> {
    let pair = NoisePair::new(sample.z0.clone(), d.noise.clone())?;
    let zt = q_sample(&pair, d.t, schedule)?;
    let target = patch::to_patches(&v_target(&pair, d.t, schedule)?, model.cfg.patch)?;
    let cond = step_conditions(sample, d, phase);
    let motion = (!d.mask_motion).then_some(&sample.motion);
    let mut g = Graph::training(&model.store, phase.mask());
    let out = model.forward(&mut g, &zt, motion, d.t as f64, &cond)?;
    let tv = g.constant(target);
    let loss = g.tape.mse(out, tv)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at t={}", d.t)));
    }
    Ok((value, g.param_grads(loss)?))
}

/// Forward-only loss under fixed draws.
pub fn eval_loss(
    model: &AnimaModel,
    sample: &PreparedSample,
    d: &StepDraws,
    phase: Phase,
    schedule: &Schedule,
) -> Result<f32> {
    let pair = NoisePair::new(sample.z0.clone(), d.noise.clone())?;
    let zt = q_sample(&pair, d.t, schedule)?;
    let target = patch::to_patches(&v_target(&pair, d.t, schedule)?, model.cfg.patch)?;
    let cond = step_conditions(sample, d, phase);
    let motion = (!d.mask_motion).then_some(&sample.motion);
    let mut g = Graph::inference(&model.store);
    let out = model.forward(&mut g, &zt, motion, d.t as f64, &cond)?;
    v_loss(g.value(out), &target)
}

fn check_mask(cfg: &TrainConfig, mask: &FreezeMask) -> Result<()> {
    if *mask != cfg.phase.mask() {
        return Err(Error::Config(format!(
            "freeze mask {:?} is inconsistent with phase {}",
            mask.trainable_groups().collect::<Vec<_>>(),
            cfg.phase
        )));
    }
    Ok(())
}

/// Plain SGD: `p -= lr * g` for each gradient.
pub fn apply_sgd(model: &mut AnimaModel, grads: &[(ParamId, NdTensor)], lr: f32) -> Result<()> {
    for (id, grad) in grads {
        let p = model.store.get_mut(*id);
        for (w, g) in p.data_mut().iter_mut().zip(grad.data()) {
            *w -= lr * g;
        }
    }
    Ok(())
}

/// One SGD step on explicit draws; returns the pre-update loss.
pub fn train_step_with(
    model: &mut AnimaModel,
    sample: &PreparedSample,
    draws: &StepDraws,
    cfg: &TrainConfig,
    mask: &FreezeMask,
    schedule: &Schedule,
) -> Result<f32> {
    cfg.validate()?;
    check_mask(cfg, mask)?;
    let (loss, grads) = loss_and_grads(model, sample, draws, cfg.phase, schedule)?;
    apply_sgd(model, &grads, cfg.lr)?;
    Ok(loss)
}

/// Draws t, noise, dropout and motion masking from `rng`, then steps.
pub fn train_step(
    model: &mut AnimaModel,
    sample: &PreparedSample,
    cfg: &TrainConfig,
    mask: &FreezeMask,
    schedule: &Schedule,
    rng: &mut SeedRng,
) -> Result<f32> {
    let draws = StepDraws::sample(rng, cfg, schedule, sample.z0.dims())?;
    train_step_with(model, sample, &draws, cfg, mask, schedule)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f32,
}

impl fmt::Display for LossRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.step, self.phase, self.loss)
    }
}

/// `cfg.steps` minibatch SGD steps over `corpus`; the batch gradient is the
/// mean of per-sample gradients.
pub fn run_phase(
    model: &mut AnimaModel,
    corpus: &[PreparedSample],
    cfg: &TrainConfig,
    schedule: &Schedule,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Config("training corpus is empty".into()));
    }
    let mut rng = SeedRng::new(cfg.seed).split(cfg.phase.as_str());
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut total = 0.0f64;
        let mut acc: Vec<(ParamId, NdTensor)> = Vec::new();
        for _ in 0..cfg.batch {
            let sample = &corpus[rng.below(corpus.len())];
            let draws = StepDraws::sample(&mut rng, cfg, schedule, sample.z0.dims())?;
            let (loss, grads) = loss_and_grads(model, sample, &draws, cfg.phase, schedule)?;
            total += loss as f64;
            accumulate(&mut acc, grads)?;
        }
        if cfg.batch > 1 {
            let s = 1.0 / cfg.batch as f32;
            for (_, g) in &mut acc {
                *g = ops::scale(g, s);
            }
        }
        apply_sgd(model, &acc, cfg.lr)?;
        trace.push(LossRecord { step, phase: cfg.phase, loss: (total / cfg.batch as f64) as f32 });
    }
    Ok(trace)
}

fn accumulate(acc: &mut Vec<(ParamId, NdTensor)>, grads: Vec<(ParamId, NdTensor)>) -> Result<()> {
    for (id, g) in grads {
        match acc.iter_mut().find(|(a, _)| *a == id) {
            Some((_, a)) => *a = ops::add(a, &g)?,
            None => acc.push((id, g)),
        }
    }
    Ok(())
}

/// Clip of a prepared sample as a latent, for decoding comparisons.
pub fn target_clip(sample: &PreparedSample) -> Result<LatentClip> {
    LatentClip::content(sample.z0.clone())
}
