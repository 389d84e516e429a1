//! Motion-frame conditioning for clip-to-clip continuation.

use crate::error::{Error, Result};
use crate::model::latent::{FrameRole, LatentClip};
use crate::tensor::{ops, NdTensor, SeedRng};

/// `n` motion latents, zero padding up to `l`, and `l` noise frames.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionCondition {
    pub n: usize,
    pub l: usize,
    /// Condition half: `n` motion frames then `l - n` padded frames.
    pub cond: LatentClip,
    /// Gaussian half: `l` noise frames.
    pub noise: LatentClip,
}

impl MotionCondition {
    /// Condition with no motion frames (first clip of a sequence).
    pub fn empty(l: usize, h: usize, w: usize, c: usize, noise: NdTensor) -> Result<Self> {
        let cond = LatentClip::new(NdTensor::zeros(&[l, h, w, c])?, vec![FrameRole::Padded; l])?;
        let noise = LatentClip::new(noise, vec![FrameRole::Noise; l])?;
        Self::assemble(0, cond, noise)
    }

    fn assemble(n: usize, cond: LatentClip, noise: LatentClip) -> Result<Self> {
        if cond.data().dims() != noise.data().dims() {
            return Err(Error::Shape(format!(
                "condition {:?} and noise {:?} differ",
                cond.data().dims(),
                noise.data().dims()
            )));
        }
        Ok(Self { n, l: cond.frames(), cond, noise })
    }

    pub fn motion_latents(&self) -> Result<NdTensor> {
        if self.n == 0 {
            return Err(Error::Contract("condition holds no motion frames".into()));
        }
        Ok(self.cond.slice_frames(0, self.n)?.into_data())
    }

    /// Channel-concatenated `[l, H, W, 2C]` tensor: condition half, then noise.
    pub fn tensor(&self) -> Result<NdTensor> {
        ops::concat(&[self.cond.data(), self.noise.data()], 3)
    }

    /// Same noise with every motion frame replaced by padding.
    pub fn masked(&self) -> Result<Self> {
        let (l, h, w, c) = (self.l, self.cond.height(), self.cond.width(), self.cond.channels());
        Self::empty(l, h, w, c, self.noise.data().clone())
    }

    /// Sum of absolute values over the padded frames.
    pub fn padded_abs_sum(&self) -> f64 {
        (self.n..self.l).map(|j| self.cond.frame_data(j).iter().map(|x| x.abs() as f64).sum::<f64>()).sum()
    }
}

/// Last `n` frames of `prev`, zero-padded to `l`, beside `l` fresh noise frames.
pub fn build_motion_condition(prev: &LatentClip, n: usize, l: usize, noise_seed: u64) -> Result<MotionCondition> {
    if n > l {
        return Err(Error::Config(format!("motion frames n={n} exceed clip length l={l}")));
    }
    if prev.frames() < n {
        return Err(Error::Index(format!("need {n} motion frames, previous clip has {}", prev.frames())));
    }
    let (h, w, c) = (prev.height(), prev.width(), prev.channels());
    let noise = NdTensor::randn(&[l, h, w, c], &mut SeedRng::new(noise_seed))?;
    if n == 0 {
        return MotionCondition::empty(l, h, w, c, noise);
    }
    let motion = prev.tail(n)?.into_data();
    let data = ops::pad(&motion, 0, 0, l - n)?;
    let mut roles = vec![FrameRole::Motion; n];
    roles.resize(l, FrameRole::Padded);
    let cond = LatentClip::new(data, roles)?;
    MotionCondition::assemble(n, cond, LatentClip::new(noise, vec![FrameRole::Noise; l])?)
}
