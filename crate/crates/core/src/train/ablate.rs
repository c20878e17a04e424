use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::conditioning::{FusionMode, InjectionPlan, InjectionVariant, PromptFormat};
use crate::config::RunConfig;
use crate::degrade::Manifest;
use crate::error::{Error, Result};

use super::trainer::{train, RunOptions, Trainer};

pub const ABLATION_HEADER: &str = "variant,task,psnr,ssim,baseline_psnr";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationAxis {
    Injection,
    Fusion,
    PromptFormat,
}

impl AblationAxis {
    pub const ALL: [AblationAxis; 3] = [AblationAxis::Injection, AblationAxis::Fusion, AblationAxis::PromptFormat];

    pub fn flag(self) -> &'static str {
        match self {
            AblationAxis::Injection => "injection",
            AblationAxis::Fusion => "fusion",
            AblationAxis::PromptFormat => "prompt-format",
        }
    }
}

impl fmt::Display for AblationAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.flag() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation axis `{s}` (injection, fusion, prompt-format)")))
    }
}

/// One configuration per table row. Fusion and prompt-format cells run at
/// stage 2 so exemplars exist.
pub fn ablation_cells(axis: AblationAxis, base: &RunConfig) -> Vec<(String, RunConfig)> {
    let stage2 = |mut c: RunConfig| {
        c.train.stage = 2;
        c.model.max_icl_pairs = c.model.max_icl_pairs.max(1);
        c.train.icl_pairs = c.train.icl_pairs.clamp(1, c.model.max_icl_pairs);
        c
    };
    match axis {
        AblationAxis::Injection => InjectionVariant::ALL
            .into_iter()
            .map(|v| {
                let mut c = base.clone();
                c.train.plan = InjectionPlan::new(v).with_stride(base.train.plan.stride);
                (v.row_label().to_string(), c)
            })
            .collect(),
        AblationAxis::Fusion => FusionMode::ALL
            .into_iter()
            .map(|m| {
                let mut c = stage2(base.clone());
                c.train.fusion_mode = m;
                if !c.train.prompt_format.uses_exemplars() {
                    c.train.prompt_format = PromptFormat::Both;
                }
                (m.label().to_string(), c)
            })
            .collect(),
        AblationAxis::PromptFormat => PromptFormat::ALL
            .into_iter()
            .map(|p| {
                let mut c = stage2(base.clone());
                c.train.prompt_format = p;
                (p.label().to_string(), c)
            })
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub task: String,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub variant: String,
    pub config_hash: String,
    pub manifest_hash: String,
}

/// Sidecar written next to the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub tool_version: String,
    pub axis: AblationAxis,
    pub base_config_hash: String,
    pub manifest_hash: String,
    pub cells: Vec<CellRecord>,
    pub rows: Vec<AblationRow>,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{},{}\n", r.variant, r.task, r.psnr, r.ssim, r.baseline_psnr));
    }
    s
}

fn slug(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect::<String>()
        .split('_')
        .filter(|p| !p.is_empty())
        .collect::<Vec<_>>()
        .join("_")
}

/// Train and evaluate one model per cell against a single shared corpus.
///
/// With `base_steps > 0` an unconditional backbone is trained once and every
/// cell starts from it; cells then run `steps` under their own plan.
/// Writes `out/ablation_<axis>.csv` and `out/ablation_<axis>.json`.
pub fn ablate(axis: AblationAxis, base: &RunConfig, out: &Path) -> Result<AblationSummary> {
    base.validate()?;
    let cells = ablation_cells(axis, base);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    // The corpus comes from the first cell so exemplars match the stage.
    let first = Trainer::new(&cells[0].1)?;
    let mdir = out.join("testset");
    let manifest = first.build_testset(&mdir)?;
    let manifest_hash = manifest.hash();

    let shared = if base.train.base_steps > 0 {
        let mut c = cells[0].1.clone();
        c.train.steps = 0;
        c.train.plan = InjectionPlan::new(InjectionVariant::FirstHalf);
        let t = Trainer::new(&c)?;
        let mut s = t.init_state()?;
        t.run_until(&mut s, c.train.base_steps, Some(&out.join("base")), |_| Ok(()))?;
        s.save(&out.join("base"), &t.hash)?;
        Some(s.model.params)
    } else {
        None
    };

    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (label, mut cfg) in cells {
        cfg.train.base_steps = 0;
        let trainer = Trainer::new(&cfg)?;
        let initial = match &shared {
            Some(p) => {
                let mut s = trainer.init_state()?;
                s.model.params.load_matching(p);
                Some(s)
            }
            None => None,
        };
        let run = train(
            &cfg,
            &out.join("cells").join(slug(&label)),
            RunOptions {
                manifest_dir: Some(mdir.clone()),
                initial,
                ..Default::default()
            },
        )?;
        if run.report.manifest_hash != manifest_hash {
            return Err(Error::contract(format!("cell {label} evaluated on a different corpus")));
        }
        for (task, m) in &run.report.tasks {
            rows.push(AblationRow {
                variant: label.clone(),
                task: task.clone(),
                psnr: m.psnr_mean,
                ssim: m.ssim_mean,
                baseline_psnr: m.psnr_input_baseline,
            });
        }
        records.push(CellRecord {
            variant: label,
            config_hash: run.report.config_hash,
            manifest_hash: run.report.manifest_hash,
        });
    }
    let summary = AblationSummary {
        tool_version: crate::VERSION.to_string(),
        axis,
        base_config_hash: base.hash(),
        manifest_hash,
        cells: records,
        rows,
    };
    let csv = out.join(format!("ablation_{}.csv", axis.flag()));
    fs::write(&csv, ablation_csv(&summary.rows)).map_err(|e| Error::io(&csv, e))?;
    let js = out.join(format!("ablation_{}.json", axis.flag()));
    fs::write(&js, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&js, e))?;
    Ok(summary)
}

/// Reload the shared manifest of an ablation directory.
pub fn ablation_manifest(out: &Path) -> Result<Manifest> {
    Manifest::load(&crate::degrade::manifest_path(&out.join("testset")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_counts() {
        let base = RunConfig::default();
        assert_eq!(ablation_cells(AblationAxis::Injection, &base).len(), 5);
        assert_eq!(ablation_cells(AblationAxis::Fusion, &base).len(), 2);
        assert_eq!(ablation_cells(AblationAxis::PromptFormat, &base).len(), 3);
        for (_, c) in ablation_cells(AblationAxis::Fusion, &base) {
            assert!(c.validate().is_ok());
            assert_eq!(c.train.stage, 2);
        }
        for (_, c) in ablation_cells(AblationAxis::Injection, &base) {
            assert!(c.validate().is_ok());
        }
    }

    #[test]
    fn axis_names_round_trip() {
        for a in AblationAxis::ALL {
            assert_eq!(a.flag().parse::<AblationAxis>().unwrap(), a);
        }
        assert!("depth".parse::<AblationAxis>().is_err());
        assert_eq!(slug("(a) input"), "a_input");
    }
}
