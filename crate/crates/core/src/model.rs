use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{encode_condition, init_adapter, init_projectors, Condition, InjectionPlan, PromptPack};
use crate::dit::{dit_forward, init_backbone, ForwardInputs, IclPrompt, ModelConfig};
use crate::error::{Error, Result};
use crate::flow::euler_sample;
use crate::params::ParamStore;
use crate::tensor::{read_tensor_file, write_tensor_file, Tape, Tensor, Var};

/// Backbone, condition adapter and exemplar projectors under one plan.
#[derive(Clone, Debug)]
pub struct OmniLv {
    pub config: ModelConfig,
    pub plan: InjectionPlan,
    pub params: ParamStore,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    tool_version: String,
    config: ModelConfig,
    plan: InjectionPlan,
    tensors: Vec<String>,
}

impl OmniLv {
    pub fn new(config: ModelConfig, plan: InjectionPlan, seed: u64) -> Result<Self> {
        config.validate()?;
        plan.validate()?;
        if config.hidden_dim < config.patch_dim() {
            log::warn!(
                "hidden_dim {} is below the patch dimension {}; the velocity head cannot span every pixel direction",
                config.hidden_dim,
                config.patch_dim()
            );
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        init_backbone(&mut params, &config, &plan, &mut rng);
        if plan.uses_adapter() {
            init_adapter(&mut params, &config, &plan, &mut rng);
        }
        init_projectors(&mut params, &config);
        params.set_trainable(|n| plan.is_trainable(n));
        Ok(Self { config, plan, params })
    }

    /// Condition signal for the active plan; `None` runs unconditionally.
    pub fn condition(&self, tape: &Tape, y: Option<&Tensor>) -> Result<Condition> {
        Ok(match y {
            None => Condition::None,
            Some(y) if self.plan.uses_adapter() => {
                Condition::Features(encode_condition(tape, &self.params, &self.config, &self.plan, y)?)
            }
            Some(y) => Condition::Concat(y.clone()),
        })
    }

    /// `u_θ(t, x_t, y)` with the given prompt pack. All images in model range.
    pub fn velocity(&self, tape: &Tape, x_t: &Tensor, t: f64, y: Option<&Tensor>, prompt: &PromptPack) -> Result<Var> {
        prompt.validate(self.config.max_icl_pairs)?;
        let condition = self.condition(tape, y)?;
        let images = prompt.exemplar_images();
        let inputs = ForwardInputs {
            noised: x_t,
            t,
            instr: &prompt.instr_token_ids,
            condition: &condition,
            icl: (!images.is_empty()).then_some(IclPrompt {
                images: &images,
                mode: prompt.fusion_mode,
            }),
        };
        dit_forward(tape, &self.params, &self.config, &self.plan, &inputs)
    }

    /// Euler sample in model range given a condition image in model range.
    pub fn sample(&self, y: &Tensor, prompt: &PromptPack, steps: usize, seed: u64) -> Result<Tensor> {
        let shape = self.config.image_shape();
        euler_sample(
            |t, x| {
                let tape = Tape::inference();
                let v = self.velocity(&tape, x, t, Some(y), prompt)?;
                Ok(tape.value(v))
            },
            &shape,
            steps,
            seed,
        )
    }

    /// Backbone parameter names (everything outside the adapter).
    pub fn backbone_names(&self) -> Vec<String> {
        self.params.names().into_iter().filter(|n| !n.starts_with("adapter.")).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tensors_dir = dir.join("tensors");
        fs::create_dir_all(&tensors_dir).map_err(|e| Error::io(&tensors_dir, e))?;
        for (name, t) in self.params.iter() {
            write_tensor_file(tensors_dir.join(format!("{name}.olvt")), t)?;
        }
        let header = CheckpointHeader {
            tool_version: crate::VERSION.to_string(),
            config: self.config.clone(),
            plan: self.plan,
            tensors: self.params.names(),
        };
        let path = dir.join("model.json");
        fs::write(&path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("model.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text)?;
        header.config.validate()?;
        header.plan.validate()?;
        let mut params = ParamStore::new();
        for name in &header.tensors {
            params.insert(name.clone(), read_tensor_file(dir.join("tensors").join(format!("{name}.olvt")))?);
        }
        let plan = header.plan;
        params.set_trainable(|n| plan.is_trainable(n));
        Ok(Self {
            config: header.config,
            plan,
            params,
        })
    }
}

/// Configured forward function `(tape, x_t, t, y, prompt) → velocity` for the
/// model's injection plan.
pub fn apply_plan(model: &OmniLv) -> impl Fn(&Tape, &Tensor, f64, &Tensor, &PromptPack) -> Result<Var> + '_ {
    move |tape, x_t, t, y, prompt| model.velocity(tape, x_t, t, Some(y), prompt)
}
