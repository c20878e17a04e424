use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::conditioning::{FusionMode, PromptFormat, Vocab};
use crate::degrade::{from_model_range, to_model_range, Image, Manifest};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim};
use crate::model::OmniLv;

use super::trainer::prompt_pack;

const SAMPLE_STREAM: u64 = 0x5a4d_504c_0000_0001;

/// How held-out entries are prompted and sampled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSettings {
    pub sampler_steps: usize,
    pub prompt_format: PromptFormat,
    pub fusion_mode: FusionMode,
    /// Attach the manifest's exemplar pairs.
    pub use_exemplars: bool,
}

#[derive(Clone, Debug)]
pub struct EntryResult {
    pub task: String,
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub baseline_psnr: f64,
    pub baseline_ssim: f64,
    pub lq: Image,
    pub hq: Image,
    pub exemplars: Vec<(Image, Image)>,
    pub output: Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub n: usize,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    /// PSNR of the untouched input against the target.
    pub psnr_input_baseline: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tool_version: String,
    pub config_hash: String,
    pub manifest_hash: String,
    pub step: usize,
    pub wall_clock_secs: f64,
    pub tasks: BTreeMap<String, TaskMetrics>,
}

impl MetricReport {
    pub fn one_line(&self) -> String {
        self.tasks
            .iter()
            .map(|(t, m)| format!("{t}: {:.2} dB (input {:.2} dB), ssim {:.3}", m.psnr_mean, m.psnr_input_baseline, m.ssim_mean))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

/// Seed of the sampler noise for a held-out entry.
pub fn entry_sample_seed(entry_seed: u64) -> u64 {
    entry_seed ^ SAMPLE_STREAM
}

fn score(task: &str, index: usize, lq: Image, hq: Image, exemplars: Vec<(Image, Image)>, output: Image) -> Result<EntryResult> {
    Ok(EntryResult {
        task: task.to_string(),
        index,
        psnr: psnr(&output, &hq)?,
        ssim: ssim(&output, &hq)?,
        baseline_psnr: psnr(&lq, &hq)?,
        baseline_ssim: ssim(&lq, &hq)?,
        lq,
        hq,
        exemplars,
        output,
    })
}

/// Sample every manifest entry with `model` and score it.
pub fn evaluate_model(
    model: &OmniLv,
    settings: &EvalSettings,
    manifest: &Manifest,
    dir: &Path,
    vocab: &Vocab,
) -> Result<Vec<EntryResult>> {
    manifest.check_disjoint()?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let loaded = e.load(dir)?;
            let exemplars: Vec<_> = if settings.use_exemplars {
                loaded
                    .exemplars
                    .iter()
                    .map(|(a, b)| (to_model_range(a), to_model_range(b)))
                    .collect()
            } else {
                Vec::new()
            };
            let prompt = prompt_pack(settings.prompt_format, settings.fusion_mode, vocab, &e.instruction, &exemplars);
            let y = to_model_range(&loaded.lq);
            let out = model.sample(&y, &prompt, settings.sampler_steps, entry_sample_seed(e.seed))?;
            score(&e.task, e.index, loaded.lq, loaded.hq, loaded.exemplars, from_model_range(&out))
        })
        .collect()
}

/// Score the outputs already recorded in the manifest.
pub fn evaluate_outputs(manifest: &Manifest, dir: &Path) -> Result<Vec<EntryResult>> {
    manifest.check_disjoint()?;
    manifest
        .entries
        .iter()
        .map(|e| {
            let loaded = e.load(dir)?;
            let output = loaded
                .output
                .ok_or_else(|| Error::Config(format!("manifest entry {} #{} has no output", e.task, e.index)))?;
            score(&e.task, e.index, loaded.lq, loaded.hq, loaded.exemplars, output)
        })
        .collect()
}

/// Per-task means.
pub fn summarize(results: &[EntryResult], config_hash: &str, manifest_hash: &str, step: usize, wall_clock_secs: f64) -> MetricReport {
    let mut acc: BTreeMap<String, (usize, f64, f64, f64)> = BTreeMap::new();
    for r in results {
        let a = acc.entry(r.task.clone()).or_default();
        a.0 += 1;
        a.1 += r.psnr;
        a.2 += r.ssim;
        a.3 += r.baseline_psnr;
    }
    MetricReport {
        tool_version: crate::VERSION.to_string(),
        config_hash: config_hash.to_string(),
        manifest_hash: manifest_hash.to_string(),
        step,
        wall_clock_secs,
        tasks: acc
            .into_iter()
            .map(|(t, (n, p, s, b))| {
                let k = n as f64;
                (
                    t,
                    TaskMetrics {
                        n,
                        psnr_mean: p / k,
                        ssim_mean: s / k,
                        psnr_input_baseline: b / k,
                    },
                )
            })
            .collect(),
    }
}
