//! From-scratch encoders: a transformer over hashed word ids, a shifted-window
//! image transformer and a caption decoder used for pretraining.

pub mod caption;
pub mod image;
pub mod layers;
pub mod text;
pub mod tokenizer;

use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use caption::{decode_caption_logits, CaptionDirection};
pub use image::{encode_image, window_groups};
pub use text::encode_text;
pub use tokenizer::tokenize;

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::tensor::Matrix;

/// Architecture hyperparameters. Text-only fields are ignored by the image
/// encoder and vice versa.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of the first stage (image) or of every layer (text).
    pub d_model: usize,
    /// Transformer layers (text); regular + shifted block pairs per stage (image).
    pub n_layers: usize,
    /// Attention heads; the image encoder doubles them per stage.
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    /// Square input side in pixels.
    pub resolution: usize,
    pub patch_size: usize,
    pub window_size: usize,
    pub n_stages: usize,
    pub dropout_rate: f64,
}

impl EncoderConfig {
    pub fn text_default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 128,
            vocab_size: 4096,
            resolution: 64,
            patch_size: 4,
            window_size: 4,
            n_stages: 2,
            dropout_rate: 0.1,
        }
    }

    pub fn image_default() -> Self {
        Self { d_model: 32, n_layers: 1, n_heads: 2, ..Self::text_default() }
    }

    pub fn caption_default() -> Self {
        Self { d_model: 32, n_layers: 1, n_heads: 2, max_seq_len: 48, ..Self::text_default() }
    }

    fn validate_common(&self) -> Result<()> {
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(Error::Config("d_model, n_layers and n_heads must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!("n_heads {} must divide d_model {}", self.n_heads, self.d_model)));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate)));
        }
        Ok(())
    }

    pub fn validate_text(&self) -> Result<()> {
        self.validate_common()?;
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.vocab_size <= tokenizer::FIRST_WORD_ID {
            return Err(Error::Config(format!("vocab_size must exceed {}", tokenizer::FIRST_WORD_ID)));
        }
        Ok(())
    }

    pub fn validate_image(&self) -> Result<()> {
        self.validate_common()?;
        if self.patch_size == 0 || self.window_size == 0 || self.n_stages == 0 || self.resolution == 0 {
            return Err(Error::Config("patch_size, window_size, n_stages and resolution must be positive".into()));
        }
        if !self.resolution.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!("resolution {} not divisible by patch_size {}", self.resolution, self.patch_size)));
        }
        for s in 0..self.n_stages {
            let g = self.stage_grid(s);
            if g == 0 {
                return Err(Error::Config(format!("stage {s} has an empty grid")));
            }
            if g > self.window_size && !g.is_multiple_of(self.window_size) {
                return Err(Error::Config(format!("stage {s} grid {g} not divisible by window_size {}", self.window_size)));
            }
            if s + 1 < self.n_stages && !g.is_multiple_of(2) {
                return Err(Error::Config(format!("stage {s} grid {g} must be even for patch merging")));
            }
        }
        Ok(())
    }

    /// Patch grid side at stage `s`.
    pub fn stage_grid(&self, s: usize) -> usize {
        (self.resolution / self.patch_size) >> s
    }

    pub fn stage_dim(&self, s: usize) -> usize {
        self.d_model << s
    }

    pub fn stage_heads(&self, s: usize) -> usize {
        self.n_heads << s
    }

    /// Width of the image encoder's output states.
    pub fn image_output_dim(&self) -> usize {
        self.stage_dim(self.n_stages - 1)
    }
}

/// Encoded sequence of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    /// One row per token or patch.
    pub states: Matrix,
    pub pooled: Vec<f64>,
    /// `true` marks real positions.
    pub mask: Vec<bool>,
}

/// Graph-level encoding of a batch stacked along rows.
#[derive(Clone, Debug)]
pub struct EncodedBatch {
    pub states: Var,
    /// One row per sample.
    pub pooled: Var,
    pub spans: Vec<Range<usize>>,
    pub mask: Vec<bool>,
}
