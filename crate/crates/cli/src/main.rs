use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use omnilv_cli::{
    cmd_ablate, cmd_degrade, cmd_eval, cmd_sample, cmd_train, guarded, load_config, save_report, CliError, CliResult, DegradeArgs,
    EvalArgs, Overrides, SampleArgs,
};
use omnilv_core::conditioning::{FusionMode, InjectionVariant, PromptFormat};
use omnilv_core::train::AblationAxis;

#[derive(Parser)]
#[command(name = "omnilv", version, about = "Desk-scale unified low-level vision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesise a held-out corpus.
    Degrade {
        /// Task id; repeat for several tasks.
        #[arg(long = "task", required = true)]
        tasks: Vec<String>,
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Exemplar pairs per entry.
        #[arg(long, default_value_t = 0)]
        icl_pairs: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        inject: Option<InjectionVariant>,
        #[arg(long, value_parser = parse_fusion)]
        fusion: Option<FusionMode>,
        #[arg(long, value_parser = parse_format)]
        prompt_format: Option<PromptFormat>,
    },
    /// Sample one image from a checkpoint.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Condition image (.ppm or .olvt).
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        instruction: Option<String>,
        /// Exemplar pair as `LQ,HQ`; repeatable.
        #[arg(long = "icl-pair", value_parser = parse_pair)]
        icl_pairs: Vec<(PathBuf, PathBuf)>,
        #[arg(long, value_parser = parse_fusion, default_value = "projection-addition")]
        fusion: FusionMode,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path stem; `.ppm`, `.olvt` and `.json` are written.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a corpus, sampling with a checkpoint or using recorded outputs.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 20)]
        steps: usize,
        #[arg(long, value_parser = parse_fusion, default_value = "projection-addition")]
        fusion: FusionMode,
        #[arg(long, value_parser = parse_format)]
        prompt_format: Option<PromptFormat>,
        /// Report path; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every cell of one ablation axis.
    Ablate {
        #[arg(long, value_parser = parse_axis)]
        axis: AblationAxis,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_fusion(s: &str) -> Result<FusionMode, String> {
    FusionMode::ALL
        .into_iter()
        .find(|m| m.label() == s)
        .ok_or_else(|| format!("expected one of: {}", FusionMode::ALL.map(|m| m.label()).join(", ")))
}

fn parse_format(s: &str) -> Result<PromptFormat, String> {
    PromptFormat::ALL
        .into_iter()
        .find(|m| m.label() == s)
        .ok_or_else(|| format!("expected one of: {}", PromptFormat::ALL.map(|m| m.label()).join(", ")))
}

fn parse_axis(s: &str) -> Result<AblationAxis, String> {
    s.parse().map_err(|e: omnilv_core::Error| e.to_string())
}

fn parse_pair(s: &str) -> Result<(PathBuf, PathBuf), String> {
    let (a, b) = s.split_once(',').ok_or("expected LQ,HQ")?;
    Ok((a.into(), b.into()))
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Degrade {
            tasks,
            n,
            seed,
            size,
            icl_pairs,
            out,
        } => {
            let args = DegradeArgs {
                tasks,
                n,
                seed,
                size,
                icl_pairs,
            };
            let m = guarded(&out, || cmd_degrade(&args, &out))?;
            println!("{} entries, manifest {}", m.entries.len(), m.hash());
        }
        Command::Train {
            config,
            out,
            resume,
            inject,
            fusion,
            prompt_format,
        } => {
            let overrides = Overrides {
                inject,
                fusion,
                prompt_format,
            };
            let cfg = load_config(&config, &overrides)?;
            let target = out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
            let (dir, run) = guarded(&target, || cmd_train(&cfg, out.as_deref(), resume.as_deref()))?;
            println!("trained {} steps into {}", run.state.step, dir.display());
            println!("{}", run.report.one_line());
        }
        Command::Sample {
            checkpoint,
            input,
            instruction,
            icl_pairs,
            fusion,
            steps,
            seed,
            out,
        } => {
            let args = SampleArgs {
                input,
                instruction,
                icl_pairs,
                fusion,
                steps,
                seed,
            };
            let r = guarded(&out, || cmd_sample(&checkpoint, &args, &out))?;
            println!("{}", r.output_sha256);
        }
        Command::Eval {
            checkpoint,
            manifest,
            steps,
            fusion,
            prompt_format,
            out,
        } => {
            let args = EvalArgs {
                steps,
                fusion,
                prompt_format,
            };
            let target = out.clone().unwrap_or_else(|| manifest.clone());
            let report = guarded(&target, || {
                let r = cmd_eval(checkpoint.as_deref(), &manifest, &args)?;
                if let Some(p) = &out {
                    save_report(p, &r)?;
                }
                Ok(r)
            })?;
            if out.is_none() {
                println!("{}", serde_json::to_string_pretty(&report).map_err(omnilv_core::Error::from)?);
            } else {
                println!("{}", report.one_line());
            }
        }
        Command::Ablate { axis, config, out } => {
            let cfg = load_config(&config, &Overrides::default())?;
            let target = out.clone().or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
            let (dir, s) = guarded(&target, || cmd_ablate(axis, &cfg, out.as_deref()))?;
            println!(
                "{} rows for {} cells into {}",
                s.rows.len(),
                s.cells.len(),
                Path::new(&dir).join(format!("ablation_{}.csv", axis.flag())).display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("run `omnilv --help` for usage");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
