use serde::{Deserialize, Serialize};

use crate::error::{Result, StivError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAxis {
    Spatial,
    Temporal,
}

/// Architecture and conditioning hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StivConfig {
    /// Blocks that see the kept (unmasked) tokens.
    pub n_blocks: usize,
    /// Blocks after the mask token is reinstated.
    pub n_decoder_blocks: usize,
    pub hidden_dim: usize,
    pub n_heads: usize,
    pub text_dim: usize,
    pub vocab_size: usize,
    /// Width of each sinusoidal scalar embedding.
    pub freq_dim: usize,
    pub spatial_patch: usize,
    pub temporal_patch: usize,
    pub mask_ratio: f64,
    pub mask_axis: MaskAxis,
    /// Whether blocks carry temporal attention; image-only models do not.
    pub temporal: bool,
    pub causal_temporal: bool,
    pub first_frame_loss: bool,
    pub text_dropout_p: f64,
    pub image_dropout_p: f64,
    /// Native latent clip geometry.
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub spatial_rope_scale: f64,
    pub temporal_rope_scale: f64,
}

impl Default for StivConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            n_decoder_blocks: 2,
            hidden_dim: 64,
            n_heads: 4,
            text_dim: 64,
            vocab_size: 64,
            freq_dim: 64,
            spatial_patch: 2,
            temporal_patch: 2,
            mask_ratio: 0.5,
            mask_axis: MaskAxis::Spatial,
            temporal: true,
            causal_temporal: false,
            first_frame_loss: false,
            text_dropout_p: 0.10,
            image_dropout_p: 0.08,
            frames: 8,
            height: 16,
            width: 16,
            channels: 12,
            spatial_rope_scale: 1.0,
            temporal_rope_scale: 1.0,
        }
    }
}

impl StivConfig {
    fn full_scale(n_blocks: usize, hidden_dim: usize, n_heads: usize) -> Self {
        Self {
            n_blocks: n_blocks - 2,
            n_decoder_blocks: 2,
            hidden_dim,
            n_heads,
            text_dim: hidden_dim,
            vocab_size: 32_128,
            freq_dim: 256,
            frames: 20,
            height: 32,
            width: 32,
            channels: 4,
            ..Self::default()
        }
    }

    /// 28 blocks, width 1152, 18 heads; image model.
    pub fn xl() -> Self {
        Self::full_scale(28, 1152, 18).image_only()
    }

    /// 38 blocks, width 1536, 24 heads; image model.
    pub fn xxl() -> Self {
        Self::full_scale(38, 1536, 24).image_only()
    }

    /// 46 blocks, width 3072, 48 heads; video model.
    pub fn m() -> Self {
        Self::full_scale(46, 3072, 48)
    }

    /// Image-only variant: single frame, no temporal attention.
    pub fn image_only(&self) -> Self {
        Self {
            temporal: false,
            temporal_patch: 1,
            frames: 1,
            ..self.clone()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads.max(1)
    }

    pub fn patch_dim(&self) -> usize {
        self.temporal_patch * self.spatial_patch * self.spatial_patch * self.channels
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.spatial_patch.max(1), self.width / self.spatial_patch.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StivError::Invalid(m));
        if self.n_heads == 0 || self.hidden_dim % self.n_heads != 0 {
            return bad(format!("hidden_dim {} not divisible by n_heads {}", self.hidden_dim, self.n_heads));
        }
        if self.head_dim() % 4 != 0 {
            return bad(format!("head_dim {} must be divisible by 4 for 2-D rope", self.head_dim()));
        }
        if ![1, 2, 4].contains(&self.temporal_patch) {
            return bad(format!("temporal_patch must be 1, 2 or 4, got {}", self.temporal_patch));
        }
        if self.spatial_patch == 0 || self.freq_dim == 0 || self.freq_dim % 2 != 0 {
            return bad("spatial_patch must be positive and freq_dim even".into());
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return bad(format!("mask_ratio must lie in [0, 1), got {}", self.mask_ratio));
        }
        for (name, p) in [("text_dropout_p", self.text_dropout_p), ("image_dropout_p", self.image_dropout_p)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if self.vocab_size < crate::model::text::VOCAB.len() {
            return bad(format!("vocab_size must be at least {}", crate::model::text::VOCAB.len()));
        }
        Ok(())
    }
}
