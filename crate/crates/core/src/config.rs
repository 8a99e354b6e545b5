//! Pipeline hyperparameters and ablation switches.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Order of the two decomposed attentions inside a block. Applies to both
/// the audio-stream and visual-stream updates.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttnOrder {
    TemporalFirst,
    SpatialFirst,
}

impl std::str::FromStr for AttnOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal-first" => Ok(AttnOrder::TemporalFirst),
            "spatial-first" => Ok(AttnOrder::SpatialFirst),
            other => Err(Error::Config(format!(
                "unknown attention order `{other}` (expected temporal-first or spatial-first)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StBavaConfig {
    /// Clip length T in frames (one frame and one spectrogram per second).
    pub frames: usize,
    /// Square input image side H_i = W_i.
    pub image_size: usize,
    /// Spectrogram rows (frequency bins).
    pub spec_h: usize,
    /// Spectrogram columns (time bins within one second).
    pub spec_w: usize,
    /// Image-encoder patch side P; the embedding grid is image_size/P.
    pub patch: usize,
    /// Shared channel width C of visual and audio embeddings.
    pub channels: usize,
    /// Attention heads in the cross-modal blocks; must divide `channels`.
    pub heads: usize,
    /// Number of cross-modal blocks L.
    pub depth: usize,
    /// Self-attention layers J in the toy image encoder.
    pub encoder_layers: usize,
    /// Audio backbone inner width.
    pub audio_channels: usize,
    pub order: AttnOrder,
    /// Skip the temporal sub-attentions of both streams.
    pub no_temporal: bool,
    /// Skip the audio-stream update entirely (audio passes through).
    pub no_bidirectional: bool,
    /// Skip the per-layer audio adapters in the image encoder.
    pub no_adapter: bool,
    /// Make the backbone encoders trainable (they are frozen by default).
    pub unfreeze_encoders: bool,
    /// Staged schedule: adapters disabled and unused until the final joint
    /// phase of at most 15 epochs.
    pub two_phase: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    /// Probability threshold for binarizing predicted masks.
    pub threshold: f64,
}

impl Default for StBavaConfig {
    fn default() -> Self {
        StBavaConfig {
            frames: 5,
            image_size: 64,
            spec_h: 96,
            spec_w: 64,
            patch: 8,
            channels: 64,
            heads: 4,
            depth: 5,
            encoder_layers: 4,
            audio_channels: 128,
            order: AttnOrder::TemporalFirst,
            no_temporal: false,
            no_bidirectional: false,
            no_adapter: false,
            unfreeze_encoders: false,
            two_phase: false,
            lr: 1e-4,
            epochs: 30,
            batch: 4,
            seed: 0,
            threshold: 0.5,
        }
    }
}

impl StBavaConfig {
    /// Single-source preset (the default: depth 5).
    pub fn single_source() -> Self {
        Self::default()
    }

    /// Multi-source preset: deeper cross-modal stack (depth 7).
    pub fn multi_source() -> Self {
        StBavaConfig { depth: 7, ..Self::default() }
    }

    /// Reduced full-featured preset for the 64-bit finite-difference check:
    /// every component enabled, all parameters trainable, sizes small enough
    /// that thousands of forward evaluations stay under the time budget.
    pub fn gradcheck_reduced() -> Self {
        StBavaConfig {
            frames: 3,
            image_size: 32,
            spec_h: 48,
            spec_w: 32,
            channels: 32,
            depth: 2,
            audio_channels: 64,
            unfreeze_encoders: true,
            ..Self::default()
        }
    }

    /// Side length of the visual embedding grid (H = W).
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// Number of visual embedding positions HW.
    pub fn hw(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Softmax temperature 1/sqrt(C) shared by all attention score maps.
    pub fn attn_scale(&self) -> f64 {
        1.0 / (self.channels as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::Config("frames must be >= 1".into()));
        }
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide channels ({})",
                self.heads, self.channels
            )));
        }
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.patch % 4 != 0 {
            return Err(Error::Config(format!(
                "patch ({}) must be a multiple of 4 so the decoder's 4x upscale divides the image size",
                self.patch
            )));
        }
        if self.channels % 8 != 0 {
            return Err(Error::Config(format!(
                "channels ({}) must be divisible by 8 for the decoder upscale projection",
                self.channels
            )));
        }
        if self.encoder_layers == 0 {
            return Err(Error::Config("encoder_layers must be >= 1".into()));
        }
        if self.spec_h == 0 || self.spec_w == 0 || self.audio_channels == 0 {
            return Err(Error::Config("spectrogram and audio dims must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config("batch and epochs must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must be in [0,1], got {}", self.threshold)));
        }
        Ok(())
    }
}
