//! Three-scale classifier-free guidance, clip sampling and motion-frame
//! extrapolation.

use crate::conditioning::{build_motion_condition, AudioEmbedding, ConditionSet, MotionCondition};
use crate::diffusion::{sampler_step, Schedule};
use crate::error::{shape_err, Error, Result};
use crate::model::{AnimaModel, LatentClip};
use crate::tensor::{NdTensor, SeedRng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceScales {
    pub lambda_a: f32,
    pub lambda_t: f32,
    pub lambda_i: f32,
}

impl GuidanceScales {
    pub const BALANCED: Self = Self { lambda_a: 3.5, lambda_t: 3.5, lambda_i: 1.0 };

    pub fn new(lambda_a: f32, lambda_t: f32, lambda_i: f32) -> Result<Self> {
        let s = Self { lambda_a, lambda_t, lambda_i };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_a", self.lambda_a), ("lambda_t", self.lambda_t), ("lambda_i", self.lambda_i)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }

    /// Weights on `(v_uncond, v_text, v_text_audio, v_full)` after expanding the
    /// nested combination.
    pub fn branch_weights(&self) -> [f64; 4] {
        let (a, t, i) = (self.lambda_a as f64, self.lambda_t as f64, self.lambda_i as f64);
        [1.0 - t, t - a, a - i, i]
    }
}

impl Default for GuidanceScales {
    fn default() -> Self {
        Self::BALANCED
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BranchOutputs {
    pub v_uncond: NdTensor,
    pub v_text: NdTensor,
    pub v_text_audio: NdTensor,
    pub v_full: NdTensor,
}

/// `u + λt (t - u) + λa (ta - t) + λi (full - ta)`, evaluated per element in
/// f64 as the equivalent weighted sum so unit and zero scales reproduce a
/// branch exactly.
pub fn cfg_combine(b: &BranchOutputs, g: &GuidanceScales) -> Result<NdTensor> {
    let dims = b.v_uncond.dims();
    for (name, t) in [("v_text", &b.v_text), ("v_text_audio", &b.v_text_audio), ("v_full", &b.v_full)] {
        if t.dims() != dims {
            return shape_err(format!("{name} {:?} differs from v_uncond {dims:?}", t.dims()));
        }
    }
    let [wu, wt, wa, wf] = g.branch_weights();
    let out = (0..b.v_uncond.len())
        .map(|k| {
            let u = b.v_uncond.data()[k] as f64;
            let t = b.v_text.data()[k] as f64;
            let a = b.v_text_audio.data()[k] as f64;
            let f = b.v_full.data()[k] as f64;
            (wu * u + wt * t + wa * a + wf * f) as f32
        })
        .collect();
    NdTensor::new(dims.to_vec(), out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOptions {
    pub scales: GuidanceScales,
    /// Number of sampler steps; `0` means every schedule step.
    pub steps: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self { scales: GuidanceScales::BALANCED, steps: 0 }
    }
}

/// Descending timesteps, evenly spaced over `1..=T`.
pub fn timesteps(s: &Schedule, steps: usize) -> Vec<usize> {
    let t_max = s.steps();
    let k = if steps == 0 { t_max } else { steps.min(t_max) };
    let mut ts: Vec<usize> = (1..=k).rev().map(|i| ((i * t_max) as f64 / k as f64).round() as usize).collect();
    ts.dedup();
    ts
}

/// Guided v prediction at one step; branches with zero weight are skipped.
pub fn guided_v(
    model: &AnimaModel,
    z: &NdTensor,
    motion: &MotionCondition,
    t: usize,
    cond: &ConditionSet,
    scales: &GuidanceScales,
) -> Result<NdTensor> {
    let weights = scales.branch_weights();
    let subsets = [ConditionSet::unconditional(), cond.text_only(), cond.text_audio(), cond.clone()];
    let mut outs = Vec::with_capacity(4);
    for (w, c) in weights.iter().zip(&subsets) {
        outs.push(if *w == 0.0 {
            NdTensor::zeros(z.dims())?
        } else {
            model.predict_v(z, Some(motion), t as f64, c)?
        });
    }
    let mut it = outs.into_iter();
    let b = BranchOutputs {
        v_uncond: it.next().expect("four branches"),
        v_text: it.next().expect("four branches"),
        v_text_audio: it.next().expect("four branches"),
        v_full: it.next().expect("four branches"),
    };
    cfg_combine(&b, scales)
}

/// Fills in reference features once so every step reuses them.
fn with_reference_features(model: &AnimaModel, cond: &ConditionSet) -> Result<ConditionSet> {
    let mut cond = cond.clone();
    if let Some(id) = cond.identity.as_mut() {
        if id.mode.uses_ref_net() && id.ref_features.is_none() {
            if let Some(latent) = &id.ref_latent {
                id.ref_features = Some(model.reference_forward(latent)?);
            }
        }
    }
    Ok(cond)
}

/// Runs the sampler from the noise half of `motion`.
pub fn sample_with_motion(
    model: &AnimaModel,
    cond: &ConditionSet,
    motion: &MotionCondition,
    s: &Schedule,
    opts: &SampleOptions,
) -> Result<LatentClip> {
    opts.scales.validate()?;
    let cond = with_reference_features(model, cond)?;
    let mut z = motion.noise.data().clone();
    let ts = timesteps(s, opts.steps);
    for (k, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(k + 1).copied().unwrap_or(0);
        let v = guided_v(model, &z, motion, t, &cond, &opts.scales)?;
        z = sampler_step(&z, &v, t, t_prev, s)?;
    }
    if z.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("sampler produced non-finite latents".into()));
    }
    LatentClip::content(z)
}

/// Samples one clip without motion frames from seeded Gaussian noise.
pub fn sample_clip(
    model: &AnimaModel,
    cond: &ConditionSet,
    s: &Schedule,
    opts: &SampleOptions,
    seed: u64,
) -> Result<LatentClip> {
    let [l, h, w, c] = model.cfg.latent_dims();
    let noise = NdTensor::randn(&[l, h, w, c], &mut SeedRng::new(seed))?;
    let motion = MotionCondition::empty(l, h, w, c, noise)?;
    sample_with_motion(model, cond, &motion, s, opts)
}

/// Clips of a long video plus the motion condition each was sampled under.
#[derive(Clone, Debug, PartialEq)]
pub struct Extrapolation {
    pub clips: Vec<LatentClip>,
    pub motions: Vec<MotionCondition>,
}

impl Extrapolation {
    pub fn total_frames(&self) -> usize {
        self.clips.iter().map(|c| c.frames()).sum()
    }

    pub fn concat(&self) -> Result<LatentClip> {
        LatentClip::concat(&self.clips)
    }
}

/// Noise seed of clip `k`; clip 0 uses `seed` itself.
pub fn clip_seed(seed: u64, k: usize) -> u64 {
    if k == 0 {
        seed
    } else {
        SeedRng::new(seed).split_index("clip", k as u64).next_u64()
    }
}

/// Samples `clips` consecutive clips; clip `k > 0` is conditioned on the last
/// `n` latent frames of clip `k - 1`, and each clip reads the next window of
/// `cond.audio`.
pub fn extrapolate(
    model: &AnimaModel,
    cond: &ConditionSet,
    s: &Schedule,
    opts: &SampleOptions,
    clips: usize,
    n: usize,
    seed: u64,
) -> Result<Extrapolation> {
    if clips == 0 {
        return Err(Error::Config("clips must be at least 1".into()));
    }
    let [l, h, w, c] = model.cfg.latent_dims();
    let window = model.cfg.pixel_frames();
    if let Some(a) = &cond.audio {
        if a.frames() < clips * window {
            return Err(Error::Config(format!(
                "audio has {} frames, {clips} clips need {}",
                a.frames(),
                clips * window
            )));
        }
    }
    let base = with_reference_features(model, cond)?;
    let mut out = Extrapolation { clips: Vec::with_capacity(clips), motions: Vec::with_capacity(clips) };
    for k in 0..clips {
        let audio: Option<AudioEmbedding> = match &base.audio {
            Some(a) => Some(a.slice_frames(k * window, window)?),
            None => None,
        };
        let clip_cond = ConditionSet { audio, ..base.clone() };
        let motion = match out.clips.last() {
            None => {
                let noise = NdTensor::randn(&[l, h, w, c], &mut SeedRng::new(clip_seed(seed, 0)))?;
                MotionCondition::empty(l, h, w, c, noise)?
            }
            Some(prev) => build_motion_condition(prev, n, l, clip_seed(seed, k))?,
        };
        let clip = sample_with_motion(model, &clip_cond, &motion, s, opts)?;
        out.clips.push(clip);
        out.motions.push(motion);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_branches() -> BranchOutputs {
        let s = |x: f32| NdTensor::scalar(x);
        BranchOutputs { v_uncond: s(0.0), v_text: s(1.0), v_text_audio: s(2.0), v_full: s(3.0) }
    }

    #[test]
    fn balanced_scalar_example_is_eight() {
        let v = cfg_combine(&scalar_branches(), &GuidanceScales::BALANCED).unwrap();
        assert_eq!(v.item(), 8.0);
    }

    #[test]
    fn unit_and_zero_scales_select_branches() {
        let b = scalar_branches();
        assert_eq!(cfg_combine(&b, &GuidanceScales::new(1.0, 1.0, 1.0).unwrap()).unwrap(), b.v_full);
        assert_eq!(cfg_combine(&b, &GuidanceScales::new(0.0, 0.0, 0.0).unwrap()).unwrap(), b.v_uncond);
    }

    #[test]
    fn invalid_scales_and_shapes() {
        assert!(GuidanceScales::new(-1.0, 1.0, 1.0).is_err());
        assert!(GuidanceScales::new(f32::NAN, 1.0, 1.0).is_err());
        let mut b = scalar_branches();
        b.v_full = NdTensor::zeros(&[2]).unwrap();
        assert!(cfg_combine(&b, &GuidanceScales::BALANCED).is_err());
    }

    #[test]
    fn timesteps_descend_to_one() {
        let s = Schedule::linear(1000, 1e-4, 0.02).unwrap();
        let ts = timesteps(&s, 10);
        assert_eq!(ts.first(), Some(&1000));
        assert_eq!(ts.last(), Some(&100));
        assert_eq!(ts.len(), 10);
        assert_eq!(timesteps(&s, 0).len(), 1000);
    }
}
