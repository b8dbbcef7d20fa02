//! Decoder-only transformer over point-cloud token sequences.
//!
//! Each layer applies cross-attention to the conditioning tokens (image
//! patches and template geometry), causal self-attention and a feed-forward
//! block, all pre-normalised with residual connections.

mod decode;
mod model;
mod sample;
mod train;

use serde::{Deserialize, Serialize};

use crate::codec::Vocabulary;
use crate::error::{Error, Result};

pub use decode::DecodeState;
pub use model::{patchify, ArModel, Condition, FarthestPointGroups};
pub use sample::{draw, grammar_mask, sample_sequence, Generated, NextToken, SampleOptions, Sampled};
pub use train::{count_targets, target_mask, windows, TrainItem, Window, CHECKPOINT_KIND};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArConfig {
    pub coord_levels: u32,
    pub face_count: u32,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    /// Context window in tokens.
    pub window: usize,
    pub stride: usize,
    /// Body-point cap when sampling.
    pub max_points: usize,
    pub temperature: f64,
    /// 0 keeps the full distribution.
    pub top_k: usize,
    pub constrained: bool,
    /// Square conditioning image side.
    pub image_size: usize,
    pub patch: usize,
    pub anchors: usize,
}

impl Default for ArConfig {
    fn default() -> Self {
        Self {
            coord_levels: 1024,
            face_count: 320,
            d_model: 128,
            layers: 4,
            heads: 4,
            window: 1024,
            stride: 512,
            max_points: 512,
            temperature: 1.0,
            top_k: 0,
            constrained: false,
            image_size: 64,
            patch: 8,
            anchors: 16,
        }
    }
}

impl ArConfig {
    pub fn vocab(&self) -> Vocabulary {
        Vocabulary::new(self.coord_levels, self.face_count)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("ar: {m}")));
        if self.coord_levels < 2 || self.face_count < 1 {
            return bad("vocabulary needs at least 2 levels and 1 face".into());
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.layers == 0 {
            return bad("need at least one layer".into());
        }
        if self.window < 16 {
            return bad(format!("window {} below 16", self.window));
        }
        if self.stride == 0 || self.stride > self.window {
            return bad(format!("stride {} outside [1, {}]", self.stride, self.window));
        }
        if self.patch == 0 || self.image_size == 0 || self.image_size % self.patch != 0 {
            return bad(format!("image size {} not divisible by patch {}", self.image_size, self.patch));
        }
        if self.anchors == 0 || self.max_points == 0 {
            return bad("anchors and max_points must be positive".into());
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return bad("temperature must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}
