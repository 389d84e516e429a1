//! Text, audio, identity and motion conditions.

pub mod audio;
pub mod identity;
pub mod motion;
pub mod text;

pub use audio::{
    inject_audio, project_audio, synth_audio_features, Activation, AudioEmbedding, AudioFeatureConfig, AudioInjector,
    AudioLayout, AudioProjection, AudioStrategy,
};
pub use identity::{inject_identity, FaceAttention, FaceEncoder, IdentityCondition, IdentityMode};
pub use motion::{build_motion_condition, MotionCondition};
pub use text::TextEmbedding;

/// Conditions for one forward pass; `None` means the null condition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConditionSet {
    pub text: Option<TextEmbedding>,
    pub audio: Option<AudioEmbedding>,
    pub identity: Option<IdentityCondition>,
}

impl ConditionSet {
    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn text_only(&self) -> Self {
        Self { text: self.text.clone(), ..Self::default() }
    }

    pub fn text_audio(&self) -> Self {
        Self { text: self.text.clone(), audio: self.audio.clone(), identity: None }
    }
}
