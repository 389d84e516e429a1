//! Spatio-temporal patch rearrangement and projection.
//!
//! Tokens are ordered `(t, y, x)` over the patch grid; each patch vector is
//! ordered `(dt, dy, dx, c)`.

use super::latent::LatentClip;
use crate::error::{shape_err, Result};
use crate::tensor::{ops, NdTensor, SeedRng};

pub type PatchSize = [usize; 3];

/// Patch-grid extents `(l/pt, H/ph, W/pw)` after validating divisibility.
pub fn grid(dims: &[usize], patch: PatchSize) -> Result<[usize; 3]> {
    let [pt, ph, pw] = patch;
    let (l, h, w) = (dims[0], dims[1], dims[2]);
    if l % pt != 0 || h % ph != 0 || w % pw != 0 {
        return shape_err(format!("latent {l}x{h}x{w} not divisible by patch {pt}x{ph}x{pw}"));
    }
    Ok([l / pt, h / ph, w / pw])
}

/// `[l, H, W, C]` to `[tokens, pt*ph*pw*C]`.
pub fn to_patches(x: &NdTensor, patch: PatchSize) -> Result<NdTensor> {
    if x.rank() != 4 {
        return shape_err(format!("patchify expects rank 4, got {:?}", x.dims()));
    }
    let [gt, gh, gw] = grid(x.dims(), patch)?;
    let [pt, ph, pw] = patch;
    let (h, w, c) = (x.dims()[1], x.dims()[2], x.dims()[3]);
    let pd = pt * ph * pw * c;
    let mut out = Vec::with_capacity(gt * gh * gw * pd);
    let src = x.data();
    for t in 0..gt {
        for y in 0..gh {
            for xx in 0..gw {
                for dt in 0..pt {
                    for dy in 0..ph {
                        let base = (((t * pt + dt) * h + y * ph + dy) * w + xx * pw) * c;
                        out.extend_from_slice(&src[base..base + pw * c]);
                    }
                }
            }
        }
    }
    NdTensor::new(vec![gt * gh * gw, pd], out)
}

/// Inverse of [`to_patches`] for a target `[l, H, W, C]`.
pub fn from_patches(p: &NdTensor, dims: [usize; 4], patch: PatchSize) -> Result<NdTensor> {
    let [l, h, w, c] = dims;
    let [gt, gh, gw] = grid(&dims, patch)?;
    let [pt, ph, pw] = patch;
    if p.dims() != [gt * gh * gw, pt * ph * pw * c] {
        return shape_err(format!("patch matrix {:?} does not match clip {dims:?} with patch {patch:?}", p.dims()));
    }
    let mut out = vec![0f32; l * h * w * c];
    let mut rows = p.data().chunks(pw * c);
    for t in 0..gt {
        for y in 0..gh {
            for xx in 0..gw {
                for dt in 0..pt {
                    for dy in 0..ph {
                        let base = (((t * pt + dt) * h + y * ph + dy) * w + xx * pw) * c;
                        let r = rows.next().expect("row count checked");
                        out[base..base + pw * c].copy_from_slice(r);
                    }
                }
            }
        }
    }
    NdTensor::new(dims.to_vec(), out)
}

/// Patch-grid coordinates `(t, y, x)` of every token in order.
pub fn token_positions(dims: &[usize], patch: PatchSize) -> Result<Vec<[f64; 3]>> {
    let [gt, gh, gw] = grid(dims, patch)?;
    let mut pos = Vec::with_capacity(gt * gh * gw);
    for t in 0..gt {
        for y in 0..gh {
            for x in 0..gw {
                pos.push([t as f64, y as f64, x as f64]);
            }
        }
    }
    Ok(pos)
}

/// Bias-free linear patch embedding with transpose-based inverse.
#[derive(Clone, Debug)]
pub struct Patchifier {
    pub patch: PatchSize,
    pub proj: NdTensor,
}

impl Patchifier {
    /// Semi-orthogonal projection; exact inverse when `patch_dim <= model_dim`.
    pub fn orthogonal(patch: PatchSize, channels: usize, model_dim: usize, rng: &mut SeedRng) -> Result<Self> {
        let pd = patch.iter().product::<usize>() * channels;
        Ok(Self { patch, proj: super::params::orthogonal(pd, model_dim, rng)? })
    }

    pub fn patchify(&self, clip: &LatentClip) -> Result<NdTensor> {
        ops::matmul(&to_patches(clip.data(), self.patch)?, &self.proj)
    }

    pub fn unpatchify(&self, tokens: &NdTensor, dims: [usize; 4]) -> Result<NdTensor> {
        let back = ops::matmul(tokens, &ops::transpose(&self.proj)?)?;
        from_patches(&back, dims, self.patch)
    }
}
