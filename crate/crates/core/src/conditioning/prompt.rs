use serde::{Deserialize, Serialize};

use super::icl::FusionMode;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which prompt channels are active for a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptFormat {
    /// Instruction tokens only.
    Text,
    /// Exemplar pairs only.
    Visual,
    /// Instruction tokens and exemplar pairs together.
    Both,
}

impl PromptFormat {
    pub const ALL: [PromptFormat; 3] = [PromptFormat::Text, PromptFormat::Visual, PromptFormat::Both];

    pub fn uses_text(self) -> bool {
        self != PromptFormat::Visual
    }

    pub fn uses_exemplars(self) -> bool {
        self != PromptFormat::Text
    }

    pub fn label(self) -> &'static str {
        match self {
            PromptFormat::Text => "text",
            PromptFormat::Visual => "visual",
            PromptFormat::Both => "both",
        }
    }
}

/// Everything besides the condition image that steers one sample.
#[derive(Clone, Debug)]
pub struct PromptPack {
    pub instr_token_ids: Vec<usize>,
    /// `(exemplar_lq, exemplar_hq)` in model range.
    pub icl_pairs: Vec<(Tensor, Tensor)>,
    pub fusion_mode: FusionMode,
}

impl PromptPack {
    pub fn text(ids: Vec<usize>) -> Self {
        Self {
            instr_token_ids: ids,
            icl_pairs: Vec::new(),
            fusion_mode: FusionMode::ProjectionAddition,
        }
    }

    pub fn empty() -> Self {
        Self::text(Vec::new())
    }

    pub fn validate(&self, max_icl_pairs: usize) -> Result<()> {
        if self.icl_pairs.len() > max_icl_pairs {
            return Err(Error::contract(format!(
                "{} exemplar pairs exceed the limit of {max_icl_pairs}",
                self.icl_pairs.len()
            )));
        }
        Ok(())
    }

    /// Exemplar images flattened to `lq₀, hq₀, lq₁, hq₁, …`.
    pub fn exemplar_images(&self) -> Vec<Tensor> {
        self.icl_pairs
            .iter()
            .flat_map(|(lq, hq)| [lq.clone(), hq.clone()])
            .collect()
    }
}
