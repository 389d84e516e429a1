//! Directional ablation harness on the synthetic corpus.

use std::fmt;

use super::{prepare_all, run_phase, LossRecord, Phase, PreparedSample, SyntheticConfig, TrainConfig};
use crate::conditioning::{AudioStrategy, ConditionSet, IdentityMode, MotionCondition};
use crate::diffusion::{q_sample, v_to_x0_eps, NoisePair, Schedule};
use crate::error::{Error, Result};
use crate::guidance::{sample_with_motion, GuidanceScales, SampleOptions};
use crate::model::{AnimaModel, DitConfig, LatentClip};
use crate::tensor::{NdTensor, SeedRng};

use super::gen_synthetic_range;

/// The five guidance rows of the CFG study, base row second.
pub const CFG_GRID: [(&str, GuidanceScales); 5] = [
    ("text_low", GuidanceScales { lambda_a: 3.5, lambda_t: 1.0, lambda_i: 1.0 }),
    ("base", GuidanceScales::BALANCED),
    ("text_high", GuidanceScales { lambda_a: 3.5, lambda_t: 6.0, lambda_i: 1.0 }),
    ("audio_high", GuidanceScales { lambda_a: 6.0, lambda_t: 3.5, lambda_i: 1.0 }),
    ("identity_high", GuidanceScales { lambda_a: 3.5, lambda_t: 3.5, lambda_i: 3.5 }),
];

/// Motion-frame counts of the motion ablation.
pub const MOTION_GRID: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub model: DitConfig,
    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub motion_frames: usize,
    pub corpus: usize,
    pub held_out: usize,
    pub steps: usize,
    pub lr: f32,
    pub batch: usize,
    /// Noise levels at which the proxies are measured.
    pub eval_steps: Vec<usize>,
    /// Sampler steps used by the guidance sweep.
    pub sample_steps: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            model: DitConfig {
                depth: 2,
                ref_depth: 2,
                model_dim: 32,
                heads: 2,
                mlp_ratio: 2,
                frames: 4,
                latent_height: 4,
                latent_width: 6,
                text_tokens: 2,
                text_dim: 8,
                face_dim: 8,
                ..DitConfig::default()
            },
            schedule_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            motion_frames: 2,
            corpus: 64,
            held_out: 16,
            steps: 500,
            lr: 0.1,
            batch: 4,
            eval_steps: vec![300, 500, 700],
            sample_steps: 10,
        }
    }
}

impl AblationConfig {
    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::linear(self.schedule_steps, self.beta_start, self.beta_end)
    }

    pub fn synthetic(&self, model: &DitConfig) -> SyntheticConfig {
        SyntheticConfig::for_model(model, self.motion_frames)
    }

    fn train_config(&self, phase: Phase, seed: u64) -> TrainConfig {
        TrainConfig { phase, steps: self.steps, lr: self.lr, batch: self.batch, seed, ..TrainConfig::default() }
    }
}

/// Train and held-out splits of the seeded corpus, encoded for `model`.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub train: Vec<PreparedSample>,
    pub held_out: Vec<PreparedSample>,
    pub lip_mask: Vec<bool>,
}

impl Corpus {
    pub fn build(model: &AnimaModel, ab: &AblationConfig, seed: u64) -> Result<Self> {
        let syn = ab.synthetic(&model.cfg);
        let train = gen_synthetic_range(0, ab.corpus, &syn, seed)?;
        let held = gen_synthetic_range(ab.corpus, ab.held_out, &syn, seed)?;
        Ok(Self {
            train: prepare_all(model, &train, ab.motion_frames)?,
            held_out: prepare_all(model, &held, ab.motion_frames)?,
            lip_mask: syn.lip_mask(),
        })
    }
}

/// Held-out errors of one variant: lip region, everything outside it, and all
/// pixels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Proxies {
    pub lip: f64,
    pub drift: f64,
    pub recon: f64,
}

/// Accumulates squared pixel errors split by the lip mask.
#[derive(Default)]
struct ErrorSums {
    lip: (f64, usize),
    rest: (f64, usize),
}

impl ErrorSums {
    fn add(&mut self, pred: &NdTensor, truth: &NdTensor, mask: &[bool]) {
        for (k, (p, t)) in pred.data().iter().zip(truth.data()).enumerate() {
            let d = (*p as f64 - *t as f64).powi(2);
            let slot = if mask[k % mask.len()] { &mut self.lip } else { &mut self.rest };
            slot.0 += d;
            slot.1 += 1;
        }
    }

    fn finish(&self) -> Proxies {
        let mean = |(s, n): (f64, usize)| if n == 0 { 0.0 } else { s / n as f64 };
        Proxies {
            lip: mean(self.lip),
            drift: mean(self.rest),
            recon: mean((self.lip.0 + self.rest.0, self.lip.1 + self.rest.1)),
        }
    }
}

fn full_conditions(s: &PreparedSample) -> ConditionSet {
    ConditionSet { text: Some(s.text.clone()), audio: Some(s.audio.clone()), identity: Some(s.identity.clone()) }
}

/// One-step clean estimates from held-out clips noised to each of
/// `eval_steps` with every condition present; motion frames are masked
/// unless `with_motion`.
pub fn evaluate(
    model: &AnimaModel,
    corpus: &Corpus,
    ab: &AblationConfig,
    with_motion: bool,
    seed: u64,
) -> Result<Proxies> {
    let schedule = ab.schedule()?;
    let mut rng = SeedRng::new(seed).split("eval");
    let mut sums = ErrorSums::default();
    for s in &corpus.held_out {
        let cond = full_conditions(s);
        for &t in &ab.eval_steps {
            let eps = NdTensor::randn(s.z0.dims(), &mut rng)?;
            let zt = q_sample(&NoisePair::new(s.z0.clone(), eps)?, t, &schedule)?;
            let motion = with_motion.then_some(&s.motion);
            let v = model.predict_v_raw(&zt, motion, t as f64, &cond)?;
            let (x0, _) = v_to_x0_eps(&zt, &v, t, &schedule)?;
            let pixels = model.codec.decode(&model.store, &LatentClip::content(x0)?)?;
            sums.add(&pixels, &s.pixels, &corpus.lip_mask);
        }
    }
    check(sums.finish())
}

/// Guided sampling from seeded noise with motion frames masked.
pub fn evaluate_sampled(
    model: &AnimaModel,
    corpus: &Corpus,
    ab: &AblationConfig,
    scales: GuidanceScales,
    seed: u64,
) -> Result<Proxies> {
    let schedule = ab.schedule()?;
    let opts = SampleOptions { scales, steps: ab.sample_steps };
    let mut rng = SeedRng::new(seed).split("sample");
    let [l, h, w, c] = model.cfg.latent_dims();
    let mut sums = ErrorSums::default();
    for s in &corpus.held_out {
        let noise = NdTensor::randn(&[l, h, w, c], &mut rng)?;
        let motion = MotionCondition::empty(l, h, w, c, noise)?;
        let clip = sample_with_motion(model, &full_conditions(s), &motion, &schedule, &opts)?;
        let pixels = model.codec.decode(&model.store, &clip)?;
        sums.add(&pixels, &s.pixels, &corpus.lip_mask);
    }
    check(sums.finish())
}

fn check(p: Proxies) -> Result<Proxies> {
    if [p.lip, p.drift, p.recon].iter().all(|x| x.is_finite()) {
        Ok(p)
    } else {
        Err(Error::Numeric("ablation proxy is not finite".into()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub proxies: Proxies,
}

impl fmt::Display for AblationRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{:.6},{:.6},{:.6}", self.variant, self.proxies.lip, self.proxies.recon, self.proxies.drift)
    }
}

/// Header matching the `Display` form of [`AblationRow`].
pub const TABLE_HEADER: &str = "variant,lip_sync_error,reconstruction_error,identity_drift";

/// Phase-identity training of a fresh model; returns it with its corpus.
pub fn train_identity_phase(
    cfg: DitConfig,
    ab: &AblationConfig,
    seed: u64,
) -> Result<(AnimaModel, Corpus, Vec<LossRecord>)> {
    let mut model = AnimaModel::new(cfg, seed)?;
    let corpus = Corpus::build(&model, ab, seed)?;
    let trace = run_phase(&mut model, &corpus.train, &ab.train_config(Phase::Identity, seed), &ab.schedule()?)?;
    Ok((model, corpus, trace))
}

/// Continues `base` with each audio strategy in turn: the phase-identity
/// weights are copied into a model carrying that strategy's injectors, which
/// are then trained alone.
pub fn audio_ablation_from(
    base: &AnimaModel,
    corpus: &Corpus,
    ab: &AblationConfig,
    strategies: &[AudioStrategy],
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let schedule = ab.schedule()?;
    strategies
        .iter()
        .map(|&strategy| {
            let mut model = AnimaModel::new(DitConfig { audio_strategy: strategy, ..base.cfg.clone() }, seed)?;
            model.load_matching(&base.store);
            run_phase(&mut model, &corpus.train, &ab.train_config(Phase::Audio, seed), &schedule)?;
            Ok(AblationRow { variant: strategy.as_str().into(), proxies: evaluate(&model, corpus, ab, false, seed)? })
        })
        .collect()
}

pub fn audio_ablation(ab: &AblationConfig, strategies: &[AudioStrategy], seed: u64) -> Result<Vec<AblationRow>> {
    let (base, corpus, _) = train_identity_phase(ab.model.clone(), ab, seed)?;
    audio_ablation_from(&base, &corpus, ab, strategies, seed)
}

/// Phase-identity training under each identity mode.
pub fn identity_ablation(ab: &AblationConfig, modes: &[IdentityMode], seed: u64) -> Result<Vec<AblationRow>> {
    modes
        .iter()
        .map(|&mode| {
            let (model, corpus, _) =
                train_identity_phase(DitConfig { identity_mode: mode, ..ab.model.clone() }, ab, seed)?;
            Ok(AblationRow { variant: mode.as_str().into(), proxies: evaluate(&model, &corpus, ab, false, seed)? })
        })
        .collect()
}

/// Phase-identity training with `n` motion frames of context per variant.
/// Requires clips of at least `max(n) + 1` latent frames.
pub fn motion_ablation(ab: &AblationConfig, grid: &[usize], seed: u64) -> Result<Vec<AblationRow>> {
    grid.iter()
        .map(|&n| {
            if n > ab.model.frames {
                return Err(Error::Config(format!("{n} motion frames exceed clip length {}", ab.model.frames)));
            }
            let ab_n = AblationConfig { motion_frames: n, ..ab.clone() };
            let (model, corpus, _) = train_identity_phase(ab.model.clone(), &ab_n, seed)?;
            Ok(AblationRow { variant: format!("n={n}"), proxies: evaluate(&model, &corpus, &ab_n, true, seed)? })
        })
        .collect()
}

/// Both phases once, then guided sampling under every row of `grid`.
pub fn cfg_ablation(ab: &AblationConfig, grid: &[(&str, GuidanceScales)], seed: u64) -> Result<Vec<AblationRow>> {
    let (base, corpus, _) = train_identity_phase(ab.model.clone(), ab, seed)?;
    let mut model = base;
    run_phase(&mut model, &corpus.train, &ab.train_config(Phase::Audio, seed), &ab.schedule()?)?;
    grid.iter()
        .map(|&(name, scales)| {
            Ok(AblationRow { variant: name.into(), proxies: evaluate_sampled(&model, &corpus, ab, scales, seed)? })
        })
        .collect()
}
