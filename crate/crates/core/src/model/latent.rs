use crate::error::{shape_err, Error, Result};
use crate::tensor::{ops, NdTensor};

/// What a latent frame holds inside a clip or a motion condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FrameRole {
    Motion,
    Padded,
    Noise,
    Content,
}

/// `l x H x W x C` latent video with per-frame roles.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentClip {
    data: NdTensor,
    roles: Vec<FrameRole>,
    source_frames: usize,
}

impl LatentClip {
    pub fn new(data: NdTensor, roles: Vec<FrameRole>) -> Result<Self> {
        if data.rank() != 4 {
            return shape_err(format!("latent clip must be rank 4 (l,H,W,C), got {:?}", data.dims()));
        }
        if roles.len() != data.dims()[0] {
            return shape_err(format!("{} frame roles for {} frames", roles.len(), data.dims()[0]));
        }
        if let Some(last_motion) = roles.iter().rposition(|r| *r == FrameRole::Motion) {
            if roles[..last_motion].iter().any(|r| *r != FrameRole::Motion) {
                return Err(Error::Contract("motion frames must form a prefix".into()));
            }
        }
        Ok(Self { data, roles, source_frames: 0 })
    }

    /// Clip whose frames are all `Content`.
    pub fn content(data: NdTensor) -> Result<Self> {
        let l = data.dims().first().copied().unwrap_or(0);
        Self::new(data, vec![FrameRole::Content; l])
    }

    pub(crate) fn with_source_frames(mut self, n: usize) -> Self {
        self.source_frames = n;
        self
    }

    /// Number of pixel frames this clip was encoded from; 0 when not encoded.
    pub fn source_frames(&self) -> usize {
        self.source_frames
    }

    pub fn data(&self) -> &NdTensor {
        &self.data
    }

    pub fn into_data(self) -> NdTensor {
        self.data
    }

    pub fn roles(&self) -> &[FrameRole] {
        &self.roles
    }

    pub fn frames(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn height(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn width(&self) -> usize {
        self.data.dims()[2]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[3]
    }

    pub fn frame_len(&self) -> usize {
        self.height() * self.width() * self.channels()
    }

    pub fn frame_data(&self, j: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data.data()[j * n..(j + 1) * n]
    }

    /// Frames `[start, start + len)`.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames() || len == 0 {
            return Err(Error::Index(format!("frames [{start}, {}) outside clip of {}", start + len, self.frames())));
        }
        let data = ops::slice(&self.data, 0, start, len)?;
        Self::new(data, self.roles[start..start + len].to_vec())
    }

    /// Last `n` frames.
    pub fn tail(&self, n: usize) -> Result<Self> {
        if n > self.frames() {
            return Err(Error::Index(format!("need {n} frames, clip has {}", self.frames())));
        }
        self.slice_frames(self.frames() - n, n)
    }

    /// Joins clips along time; roles are kept per frame.
    pub fn concat(clips: &[LatentClip]) -> Result<Self> {
        let parts: Vec<&NdTensor> = clips.iter().map(|c| &c.data).collect();
        let data = ops::concat(&parts, 0)?;
        let roles = clips.iter().flat_map(|c| c.roles.iter().copied()).collect();
        Ok(Self { data, roles, source_frames: 0 })
    }
}
