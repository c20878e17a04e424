//! Top-level run document shared by every command.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::degrade::TaskCatalog;
use crate::dit::ModelConfig;
use crate::error::{Error, Result};
use crate::train::{EvalConfig, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate(self.model.max_icl_pairs)?;
        if self.eval.sampler_steps == 0 {
            return Err(Error::Config("eval.sampler_steps must be positive".into()));
        }
        let cat = self.catalog()?;
        if self.train.stage == 1 {
            if let Some(t) = self.train.tasks.iter().find(|t| cat.get(t).is_ok_and(|d| d.in_context)) {
                return Err(Error::Config(format!("task {t} is defined by exemplars and needs stage 2")));
            }
        }
        Ok(())
    }

    /// Standard catalog with the configured parameter pins applied; every
    /// selected task must exist.
    pub fn catalog(&self) -> Result<TaskCatalog> {
        let mut cat = TaskCatalog::standard();
        for task in &self.train.tasks {
            cat.get(task)?;
        }
        for (task, fields) in &self.train.task_params {
            for (field, &value) in fields {
                cat.fix_param(task, field, value)?;
            }
        }
        Ok(cat)
    }

    /// sha256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serialises");
        hex::encode(Sha256::digest(bytes))
    }
}
