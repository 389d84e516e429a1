//! Causal linear patch codec standing in for the 3D causal VAE.
//!
//! Latent frame `j` (0-based) is an orthogonal linear map of pixel frames
//! `[j*s, (j+1)*s)` over a `p x p` spatial patch. Frames past the end of the
//! input are zero, so a single image encodes to a single latent frame.

use super::latent::LatentClip;
use super::params::{Init, ParamGroup, ParamId, ParamStore};
use crate::error::{shape_err, Result};
use crate::tensor::{ops, NdTensor, SeedRng};

#[derive(Clone, Debug)]
pub struct CausalCodec {
    pub stride: usize,
    pub patch: usize,
    pub pixel_channels: usize,
    weight: ParamId,
}

impl CausalCodec {
    pub fn new(
        store: &mut ParamStore,
        stride: usize,
        patch: usize,
        pixel_channels: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let d = stride * patch * patch * pixel_channels;
        let weight = store.init("codec.w", ParamGroup::Vae, &[d, d], Init::Orthogonal, rng)?;
        Ok(Self { stride, patch, pixel_channels, weight })
    }

    pub fn latent_channels(&self) -> usize {
        self.stride * self.patch * self.patch * self.pixel_channels
    }

    /// Number of latent frames produced from `frames` pixel frames.
    pub fn latent_frames(&self, frames: usize) -> usize {
        frames.div_ceil(self.stride)
    }

    /// Causal window `[first, last]` of 0-based pixel frames feeding latent frame `j`.
    pub fn window(&self, j: usize) -> (usize, usize) {
        (j * self.stride, (j + 1) * self.stride - 1)
    }

    pub fn encode(&self, store: &ParamStore, video: &NdTensor) -> Result<LatentClip> {
        let (frames, h0, w0, c0) = video_dims(video)?;
        if c0 != self.pixel_channels {
            return shape_err(format!("codec expects {} channels, got {c0}", self.pixel_channels));
        }
        if h0 % self.patch != 0 || w0 % self.patch != 0 {
            return shape_err(format!("frame {h0}x{w0} not divisible by spatial patch {}", self.patch));
        }
        let (s, p) = (self.stride, self.patch);
        let (l, h, w, d) = (self.latent_frames(frames), h0 / p, w0 / p, self.latent_channels());
        let src = video.data();
        let mut gathered = vec![0f32; l * h * w * d];
        for j in 0..l {
            for y in 0..h {
                for x in 0..w {
                    let row = &mut gathered[((j * h + y) * w + x) * d..][..d];
                    let mut k = 0;
                    for dt in 0..s {
                        let f = j * s + dt;
                        for dy in 0..p {
                            for dx in 0..p {
                                for c in 0..c0 {
                                    if f < frames {
                                        let (py, px) = (y * p + dy, x * p + dx);
                                        row[k] = src[((f * h0 + py) * w0 + px) * c0 + c];
                                    }
                                    k += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        let patches = NdTensor::new(vec![l * h * w, d], gathered)?;
        let latent = ops::matmul(&patches, store.get(self.weight))?;
        Ok(LatentClip::content(latent.reshape(&[l, h, w, d])?)?.with_source_frames(frames))
    }

    /// Inverse map; returns `source_frames` pixel frames when known, else `l * stride`.
    pub fn decode(&self, store: &ParamStore, clip: &LatentClip) -> Result<NdTensor> {
        let (l, h, w, d) = (clip.frames(), clip.height(), clip.width(), clip.channels());
        if d != self.latent_channels() {
            return shape_err(format!("codec expects {} latent channels, got {d}", self.latent_channels()));
        }
        let (s, p, c0) = (self.stride, self.patch, self.pixel_channels);
        let wt = ops::transpose(store.get(self.weight))?;
        let flat = clip.data().reshape(&[l * h * w, d])?;
        let patches = ops::matmul(&flat, &wt)?;
        let total = if clip.source_frames() > 0 { clip.source_frames().min(l * s) } else { l * s };
        let (h0, w0) = (h * p, w * p);
        let mut out = vec![0f32; total * h0 * w0 * c0];
        let pd = patches.data();
        for j in 0..l {
            for y in 0..h {
                for x in 0..w {
                    let row = &pd[((j * h + y) * w + x) * d..][..d];
                    let mut k = 0;
                    for dt in 0..s {
                        let f = j * s + dt;
                        for dy in 0..p {
                            for dx in 0..p {
                                for c in 0..c0 {
                                    if f < total {
                                        let (py, px) = (y * p + dy, x * p + dx);
                                        out[((f * h0 + py) * w0 + px) * c0 + c] = row[k];
                                    }
                                    k += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        NdTensor::new(vec![total, h0, w0, c0], out)
    }
}

pub(crate) fn video_dims(video: &NdTensor) -> Result<(usize, usize, usize, usize)> {
    match video.dims() {
        &[f, h, w, c] => Ok((f, h, w, c)),
        d => shape_err(format!("video must be rank 4 (frames,H,W,C), got {d:?}")),
    }
}
