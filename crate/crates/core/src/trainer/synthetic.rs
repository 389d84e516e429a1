//! Seeded talking-head stand-in corpus whose lip region follows the audio.

use crate::conditioning::audio::trailing_mean;
use crate::conditioning::TextEmbedding;
use crate::error::{Error, Result};
use crate::model::DitConfig;
use crate::tensor::{NdTensor, SeedRng};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub subjects: usize,
    /// Pixel frames per sample.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Lip box `(row, col, rows, cols)` in pixels.
    pub lip: (usize, usize, usize, usize),
    pub samples_per_frame: usize,
    pub audio_window: usize,
    pub texture_scale: f32,
    pub frame_jitter: f32,
    pub vocab: usize,
    pub text_tokens: usize,
    pub text_dim: usize,
}

impl SyntheticConfig {
    /// Samples long enough for `motion_frames` context latents plus one clip.
    pub fn for_model(cfg: &DitConfig, motion_frames: usize) -> Self {
        let (h, w) = (cfg.pixel_height(), cfg.pixel_width());
        Self {
            subjects: 8,
            frames: (motion_frames + cfg.frames) * cfg.codec_stride,
            height: h,
            width: w,
            channels: cfg.pixel_channels,
            lip: (h / 2, w / 3, h - h / 2, w / 3),
            samples_per_frame: cfg.audio.samples_per_frame,
            audio_window: cfg.audio.window,
            texture_scale: 0.5,
            frame_jitter: 0.05,
            vocab: 32,
            text_tokens: cfg.text_tokens,
            text_dim: cfg.text_dim,
        }
    }

    pub fn in_lip(&self, y: usize, x: usize) -> bool {
        let (r, c, nr, nc) = self.lip;
        (r..r + nr).contains(&y) && (c..c + nc).contains(&x)
    }

    /// Per-pixel lip mask of one frame, row-major, repeated over channels.
    pub fn lip_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.height * self.width * self.channels);
        for y in 0..self.height {
            for x in 0..self.width {
                m.extend(std::iter::repeat_n(self.in_lip(y, x), self.channels));
            }
        }
        m
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    /// `[frames, H, W, C]` pixels.
    pub video: NdTensor,
    pub audio_signal: Vec<f32>,
    /// One frame of the same video, `[1, H, W, C]`.
    pub ref_image: NdTensor,
    pub text_embed: TextEmbedding,
    pub subject_id: usize,
    /// Lip value of every frame.
    pub lip: Vec<f32>,
}

/// Fixed background texture of `subject`: Gaussian detail plus a uniform offset.
pub fn subject_texture(cfg: &SyntheticConfig, subject: usize, seed: u64) -> Result<NdTensor> {
    let mut rng = SeedRng::new(seed).split_index("subject", subject as u64);
    let offset = rng.uniform_range(-1.0, 1.0);
    let dims = [cfg.height, cfg.width, cfg.channels];
    Ok(NdTensor::randn(&dims, &mut rng)?.map(|x| offset + cfg.texture_scale * x))
}

/// Lip value per frame: trailing mean of per-frame audio means.
pub fn lip_track(signal: &[f32], cfg: &SyntheticConfig) -> Vec<f32> {
    let spf = cfg.samples_per_frame;
    let means: Vec<f64> =
        signal.chunks(spf).map(|c| c.iter().map(|&x| x as f64).sum::<f64>() / c.len() as f64).collect();
    trailing_mean(&means, cfg.audio_window).into_iter().map(|x| x as f32).collect()
}

/// Samples `start .. start + count` of the corpus defined by `seed`.
pub fn gen_synthetic_range(
    start: usize,
    count: usize,
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    if count == 0 {
        return Err(Error::Config("corpus needs at least one sample".into()));
    }
    if cfg.subjects == 0 || cfg.frames == 0 || cfg.samples_per_frame == 0 || cfg.audio_window == 0 {
        return Err(Error::Config("synthetic config has a zero size".into()));
    }
    let root = SeedRng::new(seed);
    let textures = (0..cfg.subjects).map(|s| subject_texture(cfg, s, seed)).collect::<Result<Vec<_>>>()?;
    let vocab = TextEmbedding::vocabulary(cfg.vocab, cfg.text_dim, &mut root.split("vocab"))?;
    let mask = cfg.lip_mask();
    let frame_len = mask.len();
    (start..start + count)
        .map(|i| {
            let mut rng = root.split_index("sample", i as u64);
            let subject = i % cfg.subjects;
            let spf = cfg.samples_per_frame;
            let mut signal = Vec::with_capacity(cfg.frames * spf);
            for _ in 0..cfg.frames {
                let amp = rng.normal();
                signal.extend((0..spf).map(|_| amp + 0.1 * rng.normal()));
            }
            let lip = lip_track(&signal, cfg);
            let tex = textures[subject].data();
            let mut video = Vec::with_capacity(cfg.frames * frame_len);
            for &l in &lip {
                for (k, &in_lip) in mask.iter().enumerate() {
                    video.push(if in_lip { l } else { tex[k] + cfg.frame_jitter * rng.normal() });
                }
            }
            let video = NdTensor::new(vec![cfg.frames, cfg.height, cfg.width, cfg.channels], video)?;
            let r = rng.below(cfg.frames);
            let ref_image = NdTensor::new(
                vec![1, cfg.height, cfg.width, cfg.channels],
                video.data()[r * frame_len..(r + 1) * frame_len].to_vec(),
            )?;
            let words: Vec<usize> = (0..cfg.text_tokens).map(|_| rng.below(cfg.vocab)).collect();
            let text_embed = TextEmbedding::from_words(&words, &vocab)?;
            Ok(SyntheticSample { video, audio_signal: signal, ref_image, text_embed, subject_id: subject, lip })
        })
        .collect()
}

pub fn gen_synthetic(count: usize, cfg: &SyntheticConfig, seed: u64) -> Result<Vec<SyntheticSample>> {
    gen_synthetic_range(0, count, cfg, seed)
}
