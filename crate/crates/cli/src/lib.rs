//! Command implementations behind the `omnilv` binary. Each command returns
//! a typed result so it can be driven from tests without a subprocess.

use std::fs;
use std::path::{Path, PathBuf};

use omnilv_core::conditioning::{encode_instruction, FusionMode, InjectionPlan, InjectionVariant, PromptFormat, PromptPack, Vocab};
use omnilv_core::degrade::{
    build_testset, from_model_range, manifest_path, read_ppm, to_model_range, write_ppm, Image, Manifest, TaskCatalog, TestsetSpec,
};
use omnilv_core::tensor::{read_tensor_file, write_tensor_file};
use omnilv_core::train::{
    ablate, evaluate_model, evaluate_outputs, summarize, train, AblationAxis, AblationSummary, EvalSettings, MetricReport, RunOptions,
    RunOutput,
};
use omnilv_core::{Error, OmniLv, RunConfig, VERSION};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] Error),
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    /// 2 for configuration and input errors, 3 for numeric failures, 4 for I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                Error::NonFinite { .. }
                | Error::NonFiniteLoss { .. }
                | Error::SamplerDivergence { .. }
                | Error::NumericDomain { .. } => 3,
                Error::Io { .. } | Error::Format(_) => 4,
                _ => 2,
            },
        }
    }
}

fn io(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::from)?;
    fs::write(path, text).map_err(|e| io(path, e))
}

/// Marker path for a failed command writing to `target`.
pub fn failed_marker(target: &Path) -> PathBuf {
    if target.is_dir() {
        target.join(".failed")
    } else {
        let mut s = target.as_os_str().to_owned();
        s.push(".failed");
        PathBuf::from(s)
    }
}

/// Run `f`; on error leave a `.failed` marker next to (or inside) `target`,
/// on success remove a stale one.
pub fn guarded<T>(target: &Path, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
    let result = f();
    let marker = failed_marker(target);
    match &result {
        Ok(_) => {
            let _ = fs::remove_file(&marker);
        }
        Err(e) => {
            if target.exists() || target.parent().is_some_and(Path::exists) {
                let _ = fs::write(&marker, format!("{e}\n"));
            }
        }
    }
    result
}

/// Image from `.ppm` or `.olvt` by extension.
pub fn read_image(path: &Path) -> CliResult<Image> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("ppm") => Ok(read_ppm(path)?),
        Some("olvt") => Ok(read_tensor_file(path)?),
        _ => Err(CliError::Usage(format!("{}: expected a .ppm or .olvt image", path.display()))),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DegradeArgs {
    pub tasks: Vec<String>,
    pub n: usize,
    pub seed: u64,
    pub size: usize,
    pub icl_pairs: usize,
}

/// Synthesise a held-out corpus: OLVT tensors, PPM previews and
/// `manifest.json` under `out`.
pub fn cmd_degrade(args: &DegradeArgs, out: &Path) -> CliResult<Manifest> {
    if args.tasks.is_empty() {
        return Err(CliError::Usage("at least one --task is required".into()));
    }
    let catalog = TaskCatalog::standard();
    for t in &args.tasks {
        catalog.get(t)?;
    }
    if args.size == 0 {
        return Err(CliError::Usage("--size must be positive".into()));
    }
    let hash = sha256_hex(&serde_json::to_vec(args).map_err(Error::from)?);
    let spec = TestsetSpec {
        tasks: args.tasks.clone(),
        n_per_task: args.n,
        seed: args.seed,
        image_size: args.size,
        icl_pairs: args.icl_pairs,
        config_hash: hash,
    };
    Ok(build_testset(&catalog, &spec, out)?)
}

/// Flag-level overrides of the ablation enumerations.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub inject: Option<InjectionVariant>,
    pub fusion: Option<FusionMode>,
    pub prompt_format: Option<PromptFormat>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.inject {
            cfg.train.plan = InjectionPlan::new(v).with_stride(cfg.train.plan.stride);
        }
        if let Some(f) = self.fusion {
            cfg.train.fusion_mode = f;
        }
        if let Some(p) = self.prompt_format {
            cfg.train.prompt_format = p;
        }
    }
}

/// Load a config, apply overrides and validate.
pub fn load_config(path: &Path, overrides: &Overrides) -> CliResult<RunConfig> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let mut cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig, out: Option<&Path>) -> CliResult<PathBuf> {
    out.map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Usage("no output directory: pass --out or set output_dir".into()))
}

/// Train from a config. Writes `checkpoint/`, `losses.csv`, `report.json`
/// and periodic reports under the output directory.
pub fn cmd_train(cfg: &RunConfig, out: Option<&Path>, resume: Option<&Path>) -> CliResult<(PathBuf, RunOutput)> {
    let dir = output_dir(cfg, out)?;
    let run = train(
        cfg,
        &dir,
        RunOptions {
            resume: resume.map(Path::to_path_buf),
            ..Default::default()
        },
    )?;
    Ok((dir, run))
}

#[derive(Clone, Debug)]
pub struct SampleArgs {
    pub input: PathBuf,
    pub instruction: Option<String>,
    pub icl_pairs: Vec<(PathBuf, PathBuf)>,
    pub fusion: FusionMode,
    pub steps: usize,
    pub seed: u64,
}

/// Sidecar describing a sampled image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub tool_version: String,
    pub config_hash: String,
    pub checkpoint: String,
    pub instruction: Option<String>,
    pub unknown_instruction: bool,
    pub icl_pairs: usize,
    pub steps: usize,
    pub seed: u64,
    pub output_sha256: String,
}

/// Config hash recorded by a training checkpoint, if any.
fn checkpoint_hash(dir: &Path) -> String {
    #[derive(Deserialize)]
    struct Partial {
        config_hash: String,
    }
    fs::read_to_string(dir.join("state.json"))
        .ok()
        .and_then(|t| serde_json::from_str::<Partial>(&t).ok())
        .map_or_else(String::new, |p| p.config_hash)
}

/// Sample one image. Writes `<out>.ppm`, `<out>.olvt` and `<out>.json`.
pub fn cmd_sample(checkpoint: &Path, args: &SampleArgs, out: &Path) -> CliResult<SampleRecord> {
    if args.steps == 0 {
        return Err(CliError::Usage("--steps must be positive".into()));
    }
    let model = OmniLv::load(checkpoint)?;
    let input = read_image(&args.input)?;
    if input.shape() != model.config.image_shape() {
        return Err(Error::Geometry(format!(
            "input is {:?} but the model expects {:?}",
            input.shape(),
            model.config.image_shape()
        ))
        .into());
    }
    let vocab = Vocab::standard();
    let mut ids = args
        .instruction
        .as_deref()
        .map(|s| encode_instruction(s, &vocab))
        .unwrap_or_default();
    let unknown = !ids.is_empty() && ids.iter().all(|&i| i == vocab.unk_id());
    if unknown {
        log::warn!("instruction has no known words; sampling from the visual prompt only");
        ids.clear();
    }
    let icl_pairs = args
        .icl_pairs
        .iter()
        .map(|(a, b)| Ok((to_model_range(&read_image(a)?), to_model_range(&read_image(b)?))))
        .collect::<CliResult<Vec<_>>>()?;
    let prompt = PromptPack {
        instr_token_ids: ids,
        icl_pairs,
        fusion_mode: args.fusion,
    };
    let y = to_model_range(&input);
    let img = from_model_range(&model.sample(&y, &prompt, args.steps, args.seed)?);
    let olvt = out.with_extension("olvt");
    write_tensor_file(&olvt, &img)?;
    write_ppm(&out.with_extension("ppm"), &img)?;
    let bytes = fs::read(&olvt).map_err(|e| io(&olvt, e))?;
    let record = SampleRecord {
        tool_version: VERSION.to_string(),
        config_hash: checkpoint_hash(checkpoint),
        checkpoint: checkpoint.display().to_string(),
        instruction: args.instruction.clone(),
        unknown_instruction: unknown,
        icl_pairs: args.icl_pairs.len(),
        steps: args.steps,
        seed: args.seed,
        output_sha256: sha256_hex(&bytes),
    };
    write_json(&out.with_extension("json"), &record)?;
    Ok(record)
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub steps: usize,
    pub fusion: FusionMode,
    /// Defaults to text plus exemplars when the manifest carries exemplars.
    pub prompt_format: Option<PromptFormat>,
}

impl Default for EvalArgs {
    fn default() -> Self {
        Self {
            steps: 20,
            fusion: FusionMode::ProjectionAddition,
            prompt_format: None,
        }
    }
}

/// Score a corpus. With a checkpoint every entry is sampled; without one
/// the outputs recorded in the manifest are scored.
pub fn cmd_eval(checkpoint: Option<&Path>, manifest_file: &Path, args: &EvalArgs) -> CliResult<MetricReport> {
    let manifest = Manifest::load(manifest_file)?;
    let dir = manifest_file.parent().unwrap_or(Path::new("."));
    let (results, hash) = match checkpoint {
        Some(ck) => {
            let model = OmniLv::load(ck)?;
            let has_exemplars = manifest.entries.iter().any(|e| !e.exemplars.is_empty());
            let format = args
                .prompt_format
                .unwrap_or(if has_exemplars { PromptFormat::Both } else { PromptFormat::Text });
            let settings = EvalSettings {
                sampler_steps: args.steps,
                prompt_format: format,
                fusion_mode: args.fusion,
                use_exemplars: has_exemplars,
            };
            let r = evaluate_model(&model, &settings, &manifest, dir, &Vocab::standard())?;
            (r, checkpoint_hash(ck))
        }
        None => (evaluate_outputs(&manifest, dir)?, manifest.config_hash.clone()),
    };
    Ok(summarize(&results, &hash, &manifest.hash(), 0, 0.0))
}

/// Run one ablation axis; writes `ablation_<axis>.csv` and `.json`.
pub fn cmd_ablate(axis: AblationAxis, cfg: &RunConfig, out: Option<&Path>) -> CliResult<(PathBuf, AblationSummary)> {
    let dir = output_dir(cfg, out)?;
    let summary = ablate(axis, cfg, &dir)?;
    Ok((dir, summary))
}

/// Default manifest location inside a corpus directory.
pub fn corpus_manifest(dir: &Path) -> PathBuf {
    manifest_path(dir)
}

/// Write a report as pretty JSON.
pub fn save_report(path: &Path, report: &MetricReport) -> CliResult<()> {
    write_json(path, report)
}
