use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyper-parameters shared by all four towers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub heads: usize,
    pub visual_depth: usize,
    pub text_depth: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: usize,
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    /// Frames per 3D patch for the video tokenizer.
    pub tubelet: usize,
    /// Frame count the stored temporal position table is sized for.
    pub max_frames: usize,
    /// When false the visual encoder has no temporal sublayers at all.
    pub temporal_attention: bool,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub proj_dim: usize,
    pub init_temperature: f64,
}

impl ModelConfig {
    /// Desk-scale default: 64-wide, 4 heads, 4 blocks, 16-pixel patches.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            dim: 64,
            heads: 4,
            visual_depth: 4,
            text_depth: 4,
            decoder_depth: 2,
            mlp_ratio: 4,
            image_size: 32,
            channels: 3,
            patch_size: 16,
            tubelet: 1,
            max_frames: 8,
            temporal_attention: true,
            vocab_size,
            max_text_len: 16,
            proj_dim: 32,
            init_temperature: 0.07,
        }
    }

    /// ViT-B/16 visual tower with 12-layer BERT-base text towers.
    pub fn base(vocab_size: usize) -> Self {
        Self {
            dim: 768,
            heads: 12,
            visual_depth: 12,
            text_depth: 12,
            decoder_depth: 12,
            mlp_ratio: 4,
            image_size: 224,
            channels: 3,
            patch_size: 16,
            tubelet: 1,
            max_frames: 8,
            temporal_attention: true,
            vocab_size,
            max_text_len: 40,
            proj_dim: 256,
            init_temperature: 0.07,
        }
    }

    /// Smallest configuration that still exercises every code path.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            dim: 16,
            heads: 2,
            visual_depth: 2,
            text_depth: 1,
            decoder_depth: 1,
            mlp_ratio: 2,
            image_size: 16,
            channels: 3,
            patch_size: 8,
            tubelet: 1,
            max_frames: 4,
            temporal_attention: true,
            vocab_size,
            max_text_len: 8,
            proj_dim: 8,
            init_temperature: 0.07,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn spatial_tokens(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Rows of the stored temporal position table.
    pub fn temporal_positions(&self) -> usize {
        (self.max_frames / self.tubelet).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("visual_depth", self.visual_depth),
            ("mlp_ratio", self.mlp_ratio),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("tubelet", self.tubelet),
            ("max_frames", self.max_frames),
            ("vocab_size", self.vocab_size),
            ("proj_dim", self.proj_dim),
        ];
        for (key, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{key} must be positive")));
            }
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.dim ({}) must be divisible by model.heads ({})",
                self.dim, self.heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "model.image_size ({}) must be divisible by model.patch_size ({})",
                self.image_size, self.patch_size
            )));
        }
        if self.max_text_len < 2 {
            return Err(Error::Config("model.max_text_len must be at least 2".into()));
        }
        if self.init_temperature.is_nan() || self.init_temperature <= 0.0 {
            return Err(Error::Config("model.init_temperature must be positive".into()));
        }
        Ok(())
    }
}
