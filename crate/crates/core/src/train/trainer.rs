use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::conditioning::{encode_instruction, FusionMode, PromptFormat, PromptPack, Vocab};
use crate::config::RunConfig;
use crate::degrade::{build_testset, make_icl_sample, to_model_range, train_seed, Manifest, TaskCatalog, TestsetSpec};
use crate::error::{Error, Result};
use crate::flow::{cfm_sample_loss, FlowDraw};
use crate::model::OmniLv;
use crate::tensor::{read_tensor_file, write_tensor_file, Tape, Tensor};

use super::eval::{evaluate_model, summarize, EvalSettings, MetricReport};
use super::optim::{optimizer_step, AdamConfig, AdamState};

const DATA_STREAM: u64 = 0;
const NOISE_STREAM: u64 = 1;

/// Prompt pack for one sample under the given format.
pub fn prompt_pack(
    format: PromptFormat,
    fusion: FusionMode,
    vocab: &Vocab,
    instruction: &str,
    exemplars: &[(Tensor, Tensor)],
) -> PromptPack {
    PromptPack {
        instr_token_ids: if format.uses_text() {
            encode_instruction(instruction, vocab)
        } else {
            Vec::new()
        },
        icl_pairs: if format.uses_exemplars() {
            exemplars.to_vec()
        } else {
            Vec::new()
        },
        fusion_mode: fusion,
    }
}

/// One training example, images in model range.
#[derive(Clone, Debug)]
pub struct TrainSample {
    pub task: String,
    pub lq: Tensor,
    pub hq: Tensor,
    pub instruction: String,
    pub exemplars: Vec<(Tensor, Tensor)>,
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub sample: usize,
    pub task: String,
    pub t: f64,
    pub loss: f64,
}

/// Everything needed to continue a run exactly where it stopped. Sample and
/// noise draws are pure functions of `(seed, step, index)`, so the step
/// counter is the whole random state.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: OmniLv,
    pub adam: AdamState,
    pub step: usize,
    pub losses: Vec<LossRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateHeader {
    tool_version: String,
    config_hash: String,
    step: usize,
    adam: AdamState,
    moments: Vec<String>,
    losses: Vec<LossRecord>,
}

fn moment_path(dir: &Path, which: &str, name: &str) -> PathBuf {
    dir.join("optim").join(which).join(format!("{name}.olvt"))
}

impl TrainState {
    pub fn save(&self, dir: &Path, config_hash: &str) -> Result<()> {
        self.model.save(dir)?;
        for which in ["m", "v"] {
            let d = dir.join("optim").join(which);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (name, m) in &self.adam.m {
            write_tensor_file(moment_path(dir, "m", name), &Tensor::from_vec([m.len()], m.clone())?)?;
            let v = &self.adam.v[name];
            write_tensor_file(moment_path(dir, "v", name), &Tensor::from_vec([v.len()], v.clone())?)?;
        }
        let header = StateHeader {
            tool_version: crate::VERSION.to_string(),
            config_hash: config_hash.to_string(),
            step: self.step,
            adam: self.adam.clone(),
            moments: self.adam.m.keys().cloned().collect(),
            losses: self.losses.clone(),
        };
        let path = dir.join("state.json");
        fs::write(&path, serde_json::to_string(&header)?).map_err(|e| Error::io(&path, e))
    }

    /// Load a checkpoint; with `expect_hash` set, a config mismatch is an error.
    pub fn load(dir: &Path, expect_hash: Option<&str>) -> Result<Self> {
        let path = dir.join("state.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: StateHeader = serde_json::from_str(&text)?;
        if let Some(h) = expect_hash {
            if h != header.config_hash {
                return Err(Error::Config(format!(
                    "checkpoint was written under config {} but the current config is {h}",
                    header.config_hash
                )));
            }
        }
        let model = OmniLv::load(dir)?;
        let mut adam = header.adam;
        for name in &header.moments {
            adam.m.insert(name.clone(), read_tensor_file(moment_path(dir, "m", name))?.into_data());
            adam.v.insert(name.clone(), read_tensor_file(moment_path(dir, "v", name))?.into_data());
        }
        Ok(Self {
            model,
            adam,
            step: header.step,
            losses: header.losses,
        })
    }
}

/// Write the loss history as CSV.
pub fn write_loss_csv(path: &Path, losses: &[LossRecord]) -> Result<()> {
    let mut out = String::from("step,sample,task,t,loss\n");
    for r in losses {
        out.push_str(&format!("{},{},{},{},{}\n", r.step, r.sample, r.task, r.t, r.loss));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Deterministic batch schedule and optimisation for one [`RunConfig`].
pub struct Trainer {
    pub cfg: RunConfig,
    pub catalog: TaskCatalog,
    pub vocab: Vocab,
    pub hash: String,
    pool: Vec<TrainSample>,
}

impl Trainer {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut trainer = Self {
            catalog: cfg.catalog()?,
            vocab: Vocab::standard(),
            hash: cfg.hash(),
            cfg: cfg.clone(),
            pool: Vec::new(),
        };
        trainer.pool = (0..cfg.train.pool_size)
            .map(|k| trainer.draw(k as u64))
            .collect::<Result<_>>()?;
        Ok(trainer)
    }

    pub fn init_state(&self) -> Result<TrainState> {
        Ok(TrainState {
            model: OmniLv::new(self.cfg.model.clone(), self.cfg.train.plan, self.cfg.train.seed)?,
            adam: AdamState::default(),
            step: 0,
            losses: Vec::new(),
        })
    }

    fn draw(&self, k: u64) -> Result<TrainSample> {
        let tc = &self.cfg.train;
        let task = &tc.tasks[(k % tc.tasks.len() as u64) as usize];
        let seed = train_seed(tc.seed, DATA_STREAM, k);
        let s = make_icl_sample(task, &self.catalog, seed, self.cfg.model.image_size, tc.pairs_per_sample())?;
        Ok(TrainSample {
            task: task.clone(),
            lq: to_model_range(&s.query.lq),
            hq: to_model_range(&s.query.hq),
            instruction: s.query.instruction,
            exemplars: s
                .exemplars
                .iter()
                .map(|(a, b)| (to_model_range(a), to_model_range(b)))
                .collect(),
            noise_seed: 0,
        })
    }

    /// Samples of optimizer step `step`.
    pub fn batch(&self, step: usize) -> Result<Vec<TrainSample>> {
        let b = self.cfg.train.batch_size;
        (0..b)
            .map(|i| {
                let k = (step * b + i) as u64;
                let mut s = if self.pool.is_empty() {
                    self.draw(k)?
                } else {
                    self.pool[(k % self.pool.len() as u64) as usize].clone()
                };
                s.noise_seed = train_seed(self.cfg.train.seed, NOISE_STREAM, k);
                Ok(s)
            })
            .collect()
    }

    pub fn prompt(&self, instruction: &str, exemplars: &[(Tensor, Tensor)]) -> PromptPack {
        let tc = &self.cfg.train;
        prompt_pack(tc.prompt_format, tc.fusion_mode, &self.vocab, instruction, exemplars)
    }

    pub fn eval_settings(&self) -> EvalSettings {
        let tc = &self.cfg.train;
        EvalSettings {
            sampler_steps: self.cfg.eval.sampler_steps,
            prompt_format: tc.prompt_format,
            fusion_mode: tc.fusion_mode,
            use_exemplars: tc.pairs_per_sample() > 0,
        }
    }

    /// Held-out corpus for this config.
    pub fn testset_spec(&self) -> TestsetSpec {
        TestsetSpec {
            tasks: self.cfg.train.tasks.clone(),
            n_per_task: self.cfg.eval.n_per_task,
            seed: self.cfg.eval.seed,
            image_size: self.cfg.model.image_size,
            icl_pairs: self.cfg.train.pairs_per_sample(),
            config_hash: self.hash.clone(),
        }
    }

    pub fn build_testset(&self, dir: &Path) -> Result<Manifest> {
        build_testset(&self.catalog, &self.testset_spec(), dir)
    }

    /// Whether `step` belongs to the unconditional base phase.
    pub fn in_base_phase(&self, step: usize) -> bool {
        step < self.cfg.train.base_steps
    }

    /// One optimizer step. Returns the batch-mean loss. Gradients of the
    /// step stay in the parameter store for inspection.
    pub fn step(&self, state: &mut TrainState) -> Result<f64> {
        let step = state.step;
        let base = self.in_base_phase(step);
        let plan = self.cfg.train.plan;
        let model = &mut state.model;
        model
            .params
            .set_trainable(|n| if base { !n.starts_with("adapter.") } else { plan.is_trainable(n) });
        model.params.zero_grads();
        let batch = self.batch(step)?;
        let weight = 1.0 / batch.len() as f64;
        let nonfinite = |e: Error| match e {
            Error::NonFinite { .. } => Error::NonFiniteLoss { step, last_good: None },
            e => e,
        };
        let mut records = Vec::with_capacity(batch.len());
        for (i, s) in batch.iter().enumerate() {
            let draw = FlowDraw::sample(&s.hq, s.noise_seed)?;
            let tape = Tape::new();
            let prompt = self.prompt(&s.instruction, &s.exemplars);
            let y = (!base).then_some(&s.lq);
            let pred = model.velocity(&tape, &draw.x_t, draw.t, y, &prompt).map_err(nonfinite)?;
            let loss = cfm_sample_loss(&tape, pred, &draw.target).map_err(nonfinite)?;
            let value = tape.scalar(loss)?;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, last_good: None });
            }
            tape.backward(loss).map_err(nonfinite)?;
            model.params.accumulate_grads(&tape, weight);
            records.push(LossRecord {
                step,
                sample: i,
                task: s.task.clone(),
                t: draw.t,
                loss: value,
            });
        }
        let tc = &self.cfg.train;
        let adam = AdamConfig::new(tc.learning_rate, tc.weight_decay, tc.grad_clip);
        optimizer_step(&mut model.params, &mut state.adam, &adam).map_err(nonfinite)?;
        let mean = records.iter().map(|r| r.loss).sum::<f64>() * weight;
        state.losses.extend(records);
        state.step += 1;
        Ok(mean)
    }

    /// Advance to `until` steps. A non-finite loss aborts; the step fails
    /// before any parameter, moment or history update, so the state as left
    /// is the last good one and is saved to `out/last_good` when `out` is set.
    pub fn run_until(
        &self,
        state: &mut TrainState,
        until: usize,
        out: Option<&Path>,
        mut on_step: impl FnMut(&TrainState) -> Result<()>,
    ) -> Result<()> {
        while state.step < until {
            match self.step(state) {
                Ok(_) => on_step(state)?,
                Err(Error::NonFiniteLoss { step, .. }) => {
                    let last_good = match out {
                        Some(dir) => {
                            let d = dir.join("last_good");
                            state.save(&d, &self.hash)?;
                            Some(d)
                        }
                        None => None,
                    };
                    return Err(Error::NonFiniteLoss { step, last_good });
                }
                Err(e) => return Err(e),
            }
        }
        Ok(())
    }
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub state: TrainState,
    pub report: MetricReport,
    /// Periodic reports, in step order, ending with the final one.
    pub reports: Vec<MetricReport>,
    pub manifest: Manifest,
}

/// Where a run starts and where it may stop early.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Continue from this checkpoint instead of a fresh initialisation.
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps, checkpointing as if interrupted.
    pub stop_after: Option<usize>,
    /// Evaluate on an existing corpus instead of generating `out/testset`.
    pub manifest_dir: Option<PathBuf>,
    /// Initial state, used by the ablation runner for a shared base.
    pub initial: Option<TrainState>,
}

fn save_report(path: &Path, report: &MetricReport) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(path, e))
}

/// Full run: corpus, training with periodic evaluation and checkpoints,
/// final checkpoint under `out/checkpoint`, `out/losses.csv` and
/// `out/report.json`.
pub fn train(cfg: &RunConfig, out: &Path, opts: RunOptions) -> Result<RunOutput> {
    let started = Instant::now();
    let trainer = Trainer::new(cfg)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (manifest, mdir) = match &opts.manifest_dir {
        Some(d) => (Manifest::load(&crate::degrade::manifest_path(d))?, d.clone()),
        None => {
            let d = out.join("testset");
            (trainer.build_testset(&d)?, d)
        }
    };
    let mut state = match (&opts.resume, opts.initial) {
        (Some(dir), _) => TrainState::load(dir, Some(&trainer.hash))?,
        (None, Some(s)) => s,
        (None, None) => trainer.init_state()?,
    };
    let total = cfg.train.total_steps();
    let until = opts.stop_after.map_or(total, |s| s.min(total));
    let settings = trainer.eval_settings();
    let checkpoint = out.join("checkpoint");
    let reports_dir = out.join("reports");
    let mut reports = Vec::new();
    let eval_at = |state: &TrainState| -> Result<MetricReport> {
        let results = evaluate_model(&state.model, &settings, &manifest, &mdir, &trainer.vocab)?;
        Ok(summarize(&results, &trainer.hash, &manifest.hash(), state.step, started.elapsed().as_secs_f64()))
    };
    trainer.run_until(&mut state, until, Some(out), |s| {
        let tc = &cfg.train;
        if tc.checkpoint_every > 0 && s.step % tc.checkpoint_every == 0 {
            s.save(&checkpoint, &trainer.hash)?;
        }
        if tc.eval_every > 0 && s.step % tc.eval_every == 0 && s.step < total {
            let r = eval_at(s)?;
            fs::create_dir_all(&reports_dir).map_err(|e| Error::io(&reports_dir, e))?;
            save_report(&reports_dir.join(format!("report_{:06}.json", s.step)), &r)?;
            log::info!("step {}: {}", s.step, r.one_line());
            reports.push(r);
        }
        Ok(())
    })?;
    state.save(&checkpoint, &trainer.hash)?;
    write_loss_csv(&out.join("losses.csv"), &state.losses)?;
    let report = eval_at(&state)?;
    save_report(&out.join("report.json"), &report)?;
    reports.push(report.clone());
    let mut f = fs::File::create(out.join("config.json")).map_err(|e| Error::io(out, e))?;
    f.write_all(serde_json::to_string_pretty(cfg)?.as_bytes()).map_err(|e| Error::io(out, e))?;
    Ok(RunOutput {
        state,
        report,
        reports,
        manifest,
    })
}
