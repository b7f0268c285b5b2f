//! MiniResNet teacher and compactor-equipped student.
//!
//! Block layout: `conv3×3 → norm → [compactor] → relu → conv1×1 (+bias)`,
//! summed with the shortcut and passed through a final relu. Stages are
//! separated by 2×2 average pooling, so every convolution runs at stride 1.
//! After conversion a block keeps only a biased `conv3×3` in front of the
//! relu.

mod model;

pub use model::{
    AffineNorm, Block, Conv, ConvSpec, ForwardResult, Inference, Linear, Mode, Model, ModelVars,
    ParamKind,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const NORM_MOMENTUM: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub embedding_dim: usize,
    pub num_classes: usize,
    pub with_compactors: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_height: 32,
            image_width: 32,
            widths: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            embedding_dim: 64,
            num_classes: 16,
            with_compactors: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.len() != self.blocks_per_stage.len() {
            return bad(format!(
                "widths ({}) and blocks_per_stage ({}) must be non-empty and equally long",
                self.widths.len(),
                self.blocks_per_stage.len()
            ));
        }
        if let Some(i) = self.widths.iter().position(|&w| w == 0) {
            return bad(format!("stage {i} has zero width"));
        }
        if self.num_blocks() == 0 {
            return bad("model needs at least one residual block".into());
        }
        if self.in_channels == 0 || self.embedding_dim == 0 || self.num_classes == 0 {
            return bad("in_channels, embedding_dim and num_classes must be positive".into());
        }
        let f = 1usize << self.widths.len();
        if !self.image_height.is_multiple_of(f)
            || !self.image_width.is_multiple_of(f)
            || self.image_height == 0
            || self.image_width == 0
        {
            return bad(format!(
                "image {}x{} must be divisible by {f} (one 2x2 pool per stage)",
                self.image_height, self.image_width
            ));
        }
        Ok(())
    }

    /// Total residual block count `M`.
    pub fn num_blocks(&self) -> usize {
        self.blocks_per_stage.iter().sum()
    }

    pub fn teacher(&self) -> Self {
        Self {
            with_compactors: false,
            ..self.clone()
        }
    }

    pub fn student(&self) -> Self {
        Self {
            with_compactors: true,
            ..self.clone()
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_height, self.image_width]
    }
}

#[cfg(test)]
mod tests;
