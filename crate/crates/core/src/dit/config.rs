use serde::{Deserialize, Serialize};

use crate::conditioning::Vocab;
use crate::error::{Error, Result};

/// Architecture hyperparameters shared by the backbone, the condition
/// adapter and the in-context projectors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Pixels per image side.
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    pub ffn_dim: usize,
    pub instr_vocab_size: usize,
    pub max_icl_pairs: usize,
    pub rope_base: f64,
    /// Width of the sinusoidal timestep features.
    pub freq_dim: usize,
    pub adapter_blocks: usize,
    /// Block stride used by the interval injection plan.
    pub interval_stride: usize,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            hidden_dim: 48,
            num_heads: 2,
            num_blocks: 4,
            ffn_dim: 96,
            instr_vocab_size: Vocab::standard().len(),
            max_icl_pairs: 1,
            rope_base: 10_000.0,
            freq_dim: 32,
            adapter_blocks: 2,
            interval_stride: 2,
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if !self.head_dim().is_multiple_of(4) {
            return fail(format!("head_dim {} not divisible by 4", self.head_dim()));
        }
        if self.num_blocks == 0 || !self.num_blocks.is_multiple_of(2) {
            return fail(format!("num_blocks {} must be even and positive", self.num_blocks));
        }
        if self.freq_dim == 0 || !self.freq_dim.is_multiple_of(2) {
            return fail(format!("freq_dim {} must be even and positive", self.freq_dim));
        }
        if self.channels == 0 || self.ffn_dim == 0 || self.instr_vocab_size == 0 {
            return fail("channels, ffn_dim and instr_vocab_size must be positive".into());
        }
        if self.interval_stride == 0 {
            return fail("interval_stride must be positive".into());
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0 && self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return fail("rope_base must exceed 1 and norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Tokens per side of the image grid.
    pub fn grid_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Raw values per patch (`channels · patch²`).
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }
}
