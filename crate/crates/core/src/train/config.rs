use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::conditioning::{FusionMode, InjectionPlan, PromptFormat};
use crate::error::{Error, Result};

/// Optimisation schedule and data selection for one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// 1: single-image tasks only. 2: adds exemplar pairs to every sample.
    pub stage: u8,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub seed: u64,
    pub tasks: Vec<String>,
    /// Pinned operator parameters, `task → field → value`.
    pub task_params: BTreeMap<String, BTreeMap<String, f64>>,
    pub plan: InjectionPlan,
    pub fusion_mode: FusionMode,
    pub prompt_format: PromptFormat,
    /// Exemplar pairs per stage-2 sample.
    pub icl_pairs: usize,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    /// Write a resumable checkpoint every this many steps; 0 only at the end.
    pub checkpoint_every: usize,
    /// Fixed pool of training samples cycled through; 0 draws fresh samples
    /// every step.
    pub pool_size: usize,
    /// Unconditional backbone steps run before the configured plan takes over.
    pub base_steps: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-4,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 0,
            tasks: vec!["denoise_gaussian".into()],
            task_params: BTreeMap::new(),
            plan: InjectionPlan::default(),
            fusion_mode: FusionMode::ProjectionAddition,
            prompt_format: PromptFormat::Text,
            icl_pairs: 1,
            eval_every: 0,
            checkpoint_every: 0,
            pool_size: 0,
            base_steps: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, max_icl_pairs: usize) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.plan.validate()?;
        if !matches!(self.stage, 1 | 2) {
            return fail(format!("stage must be 1 or 2, got {}", self.stage));
        }
        if self.stage == 2 && (max_icl_pairs == 0 || self.icl_pairs == 0 || self.icl_pairs > max_icl_pairs) {
            return fail(format!(
                "stage 2 needs 1 <= icl_pairs <= max_icl_pairs, got {} with max {}",
                self.icl_pairs, max_icl_pairs
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if self.tasks.is_empty() {
            return fail("at least one task is required".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0 && self.grad_clip > 0.0) {
            return fail("weight_decay must be >= 0 and grad_clip > 0".into());
        }
        Ok(())
    }

    /// Exemplar pairs attached to each sample.
    pub fn pairs_per_sample(&self) -> usize {
        if self.stage == 2 && self.prompt_format.uses_exemplars() {
            self.icl_pairs
        } else {
            0
        }
    }

    pub fn total_steps(&self) -> usize {
        self.base_steps + self.steps
    }
}

/// Held-out evaluation settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_per_task: usize,
    pub seed: u64,
    /// Euler steps used by the sampler.
    pub sampler_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_per_task: 8,
            seed: 1,
            sampler_steps: 20,
        }
    }
}
