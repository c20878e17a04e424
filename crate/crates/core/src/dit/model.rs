use rand::Rng;

use super::attention::linear_init;
use super::block::{init_block, sandwich_block, BlockInputs, BlockKind};
use super::config::ModelConfig;
use super::patch::{patchify_raw, unpatchify, TokenGrid};
use super::rope::Rope2d;
use super::timestep::timestep_embed;
use crate::conditioning::icl::{fuse_icl_concat, fuse_icl_projection_addition, FusionMode, IclProjectors};
use crate::conditioning::{Condition, InjectionPlan, InjectionVariant};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

/// Backbone parameters: patch embedding, timestep MLP, instruction table,
/// blocks, final norm and the zero-initialised velocity head.
pub fn init_backbone<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, plan: &InjectionPlan, rng: &mut R) {
    let (h, pd) = (cfg.hidden_dim, cfg.patch_dim());
    store.insert("patch_embed.w", linear_init(rng, pd, h));
    store.insert("patch_embed.b", Tensor::zeros([h]));
    if plan.variant == InjectionVariant::InputConcat {
        store.insert("patch_embed.w_cond", Tensor::zeros([pd, h]));
    }
    store.insert("t_embed.w1", linear_init(rng, cfg.freq_dim, h));
    store.insert("t_embed.b1", Tensor::zeros([h]));
    store.insert("t_embed.w2", linear_init(rng, h, h));
    store.insert("t_embed.b2", Tensor::zeros([h]));
    store.insert("instr.embed", Tensor::randn([cfg.instr_vocab_size, h], 1.0, rng));
    for i in 0..cfg.num_blocks {
        init_block(store, &format!("blocks.{i}"), cfg, BlockKind::BACKBONE, rng);
    }
    store.insert("final.norm", Tensor::ones([h]));
    store.insert("head.w", Tensor::zeros([h, pd]));
    store.insert("head.b", Tensor::zeros([pd]));
}

/// Exemplar images for in-context fusion, ordered `lq₀, hq₀, lq₁, hq₁, …`,
/// already in model range.
#[derive(Clone, Copy, Debug)]
pub struct IclPrompt<'a> {
    pub images: &'a [Tensor],
    pub mode: FusionMode,
}

pub struct ForwardInputs<'a> {
    /// `x_t` as a `[c, H, W]` image in model range.
    pub noised: &'a Tensor,
    pub t: f64,
    pub instr: &'a [usize],
    pub condition: &'a Condition,
    pub icl: Option<IclPrompt<'a>>,
}

fn time_features(tape: &Tape, params: &ParamStore, cfg: &ModelConfig, t: f64) -> Result<Var> {
    let p = |n: &str| params.var(tape, &format!("t_embed.{n}"));
    let e = timestep_embed(t, cfg.freq_dim).reshape([1, cfg.freq_dim])?;
    let e = tape.constant(e)?;
    let hdn = tape.matmul(e, p("w1")?)?;
    let hdn = tape.silu(tape.add(hdn, p("b1")?)?)?;
    let out = tape.matmul(hdn, p("w2")?)?;
    tape.silu(tape.add(out, p("b2")?)?)
}

fn embed_image(tape: &Tape, params: &ParamStore, cfg: &ModelConfig, image: &Tensor, cond: Option<&Tensor>) -> Result<TokenGrid> {
    let p = cfg.patch_size;
    let side = cfg.grid_side();
    if image.shape() != cfg.image_shape() {
        return Err(Error::Geometry(format!(
            "expected image {:?}, got {:?}",
            cfg.image_shape(),
            image.shape()
        )));
    }
    let raw = tape.constant(patchify_raw(image, p)?)?;
    let w = params.var(tape, "patch_embed.w")?;
    let tokens = match cond {
        None => tape.matmul(raw, w)?,
        Some(c) => {
            let craw = tape.constant(patchify_raw(c, p)?)?;
            let both = tape.concat_cols(&[raw, craw])?;
            let w_all = tape.concat_rows(&[w, params.var(tape, "patch_embed.w_cond")?])?;
            tape.matmul(both, w_all)?
        }
    };
    let tokens = tape.add(tokens, params.var(tape, "patch_embed.b")?)?;
    Ok(TokenGrid::new(tokens, side, side))
}

/// Add a site feature to the image rows of `x`, leaving prompt rows alone.
fn inject(tape: &Tape, x: Var, feature: Var, image_tokens: usize) -> Result<Var> {
    let shape = tape.shape(x);
    let n = shape[0];
    if tape.shape(feature) != [image_tokens, shape[1]] {
        return Err(Error::contract(format!(
            "condition feature shape {:?} does not match {image_tokens} image tokens",
            tape.shape(feature)
        )));
    }
    if n == image_tokens {
        return tape.add(x, feature);
    }
    let img = tape.slice_rows(x, 0, image_tokens)?;
    let rest = tape.slice_rows(x, image_tokens, n - image_tokens)?;
    let img = tape.add(img, feature)?;
    tape.concat_rows(&[img, rest])
}

/// Predicted velocity `u_θ(t, x_t, y)` as a `[c, H, W]` tape value.
pub fn dit_forward(tape: &Tape, params: &ParamStore, cfg: &ModelConfig, plan: &InjectionPlan, inputs: &ForwardInputs<'_>) -> Result<Var> {
    Ok(dit_forward_traced(tape, params, cfg, plan, inputs)?.0)
}

/// [`dit_forward`] that also reports which blocks received a condition
/// feature.
pub fn dit_forward_traced(
    tape: &Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    plan: &InjectionPlan,
    inputs: &ForwardInputs<'_>,
) -> Result<(Var, Vec<usize>)> {
    let sites = plan.sites(cfg.num_blocks);
    let (concat, features): (Option<&Tensor>, &[Var]) = match (plan.variant, inputs.condition) {
        (_, Condition::None) => (None, &[]),
        (InjectionVariant::InputConcat, Condition::Concat(c)) => (Some(c), &[]),
        (InjectionVariant::InputConcat, Condition::Features(_)) => {
            return Err(Error::contract("input-concat plan takes a condition image, not adapter features"))
        }
        (_, Condition::Concat(_)) => {
            return Err(Error::contract(format!("plan {} takes adapter features", plan.variant)))
        }
        (_, Condition::Features(f)) => {
            if f.len() != sites.len() {
                return Err(Error::contract(format!(
                    "plan {} has {} injection sites but {} features were given",
                    plan.variant,
                    sites.len(),
                    f.len()
                )));
            }
            (None, f.as_slice())
        }
    };
    if let Some(c) = concat {
        if c.shape() != inputs.noised.shape() {
            return Err(Error::Geometry(format!(
                "condition image {:?} does not match {:?}",
                c.shape(),
                inputs.noised.shape()
            )));
        }
    }

    let mut grid = embed_image(tape, params, cfg, inputs.noised, concat)?;
    let image_tokens = grid.image_tokens();
    if let Some(icl) = inputs.icl {
        if icl.images.len() % 2 != 0 || icl.images.len() / 2 > cfg.max_icl_pairs {
            return Err(Error::contract(format!(
                "{} exemplar images for at most {} pairs",
                icl.images.len(),
                cfg.max_icl_pairs
            )));
        }
        if !icl.images.is_empty() {
            grid = match icl.mode {
                FusionMode::Concat => {
                    let prompts = icl
                        .images
                        .iter()
                        .map(|img| embed_image(tape, params, cfg, img, None))
                        .collect::<Result<Vec<_>>>()?;
                    fuse_icl_concat(tape, &grid, &prompts)?
                }
                FusionMode::ProjectionAddition => {
                    let side = cfg.grid_side();
                    let prompts = icl
                        .images
                        .iter()
                        .map(|img| Ok(TokenGrid::new(tape.constant(patchify_raw(img, cfg.patch_size)?)?, side, side)))
                        .collect::<Result<Vec<_>>>()?;
                    fuse_icl_projection_addition(tape, &grid, &prompts, &IclProjectors::new(params))?
                }
            };
        }
    }

    let rope = Rope2d::new(&grid.positions, cfg.head_dim(), cfg.rope_base)?;
    let time = time_features(tape, params, cfg, inputs.t)?;
    let instr = if inputs.instr.is_empty() {
        None
    } else {
        Some(tape.gather_rows(params.var(tape, "instr.embed")?, inputs.instr)?)
    };
    let block_inputs = BlockInputs {
        rope: &rope,
        time: Some(time),
        instr,
    };

    let mut injected = Vec::new();
    let mut x = grid.tokens;
    let mut next = 0;
    for b in 0..cfg.num_blocks {
        if next < features.len() && sites[next] == b {
            x = inject(tape, x, features[next], image_tokens)?;
            injected.push(b);
            next += 1;
        }
        x = sandwich_block(tape, params, &format!("blocks.{b}"), cfg, BlockKind::BACKBONE, x, &block_inputs)?;
    }

    if tape.shape(x)[0] != image_tokens {
        x = tape.slice_rows(x, 0, image_tokens)?;
    }
    let x = tape.rms_norm(x, params.var(tape, "final.norm")?, 1, cfg.norm_eps)?;
    let out = tape.matmul(x, params.var(tape, "head.w")?)?;
    let out = tape.add(out, params.var(tape, "head.b")?)?;
    let [c, hgt, wid] = cfg.image_shape();
    Ok((unpatchify(tape, out, c, hgt, wid, cfg.patch_size)?, injected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 2,
            hidden_dim: 8,
            num_heads: 2,
            num_blocks: 2,
            ffn_dim: 12,
            freq_dim: 8,
            instr_vocab_size: 5,
            ..Default::default()
        }
    }

    fn run(params: &ParamStore, cfg: &ModelConfig, x: &Tensor, instr: &[usize]) -> Tensor {
        let tape = Tape::inference();
        let plan = InjectionPlan::default();
        let inputs = ForwardInputs {
            noised: x,
            t: 0.3,
            instr,
            condition: &Condition::None,
            icl: None,
        };
        tape.value(dit_forward(&tape, params, cfg, &plan, &inputs).unwrap())
    }

    #[test]
    fn zero_head_gives_zero_field() {
        let cfg = micro();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        init_backbone(&mut s, &cfg, &InjectionPlan::default(), &mut rng);
        let x = Tensor::randn(cfg.image_shape(), 1.0, &mut rng);
        let out = run(&s, &cfg, &x, &[1, 2]);
        assert_eq!(out.shape(), &cfg.image_shape());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_shape_matches_for_several_configs() {
        let configs = [
            micro(),
            ModelConfig {
                image_size: 12,
                patch_size: 3,
                hidden_dim: 16,
                num_heads: 4,
                num_blocks: 4,
                ..micro()
            },
            ModelConfig {
                image_size: 8,
                patch_size: 4,
                hidden_dim: 12,
                num_heads: 1,
                channels: 1,
                ..micro()
            },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for cfg in configs {
            cfg.validate().unwrap();
            let mut s = ParamStore::new();
            init_backbone(&mut s, &cfg, &InjectionPlan::default(), &mut rng);
            s.jitter(&mut rng, 0.2, |_| true);
            let x = Tensor::randn(cfg.image_shape(), 1.0, &mut rng);
            assert_eq!(run(&s, &cfg, &x, &[0]).shape(), &cfg.image_shape());
        }
    }

    #[test]
    fn zero_cross_gates_ignore_instructions() {
        let cfg = micro();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = ParamStore::new();
        init_backbone(&mut s, &cfg, &InjectionPlan::default(), &mut rng);
        s.jitter(&mut rng, 0.3, |n| !n.ends_with("cross.gate"));
        let x = Tensor::randn(cfg.image_shape(), 1.0, &mut rng);
        let a = run(&s, &cfg, &x, &[]);
        let b = run(&s, &cfg, &x, &[1, 4, 0]);
        let c = run(&s, &cfg, &x, &[3]);
        assert!(a.bit_eq(&b) && a.bit_eq(&c));
        assert!(a.norm() > 0.0);
    }

    #[test]
    fn end_to_end_gradient() {
        let cfg = micro();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        init_backbone(&mut s, &cfg, &InjectionPlan::default(), &mut rng);
        s.jitter(&mut rng, 0.3, |_| true);
        let x = Tensor::randn(cfg.image_shape(), 1.0, &mut rng);
        let target = Tensor::randn(cfg.image_shape(), 1.0, &mut rng);
        let plan = InjectionPlan::default();
        for name in ["patch_embed.w", "blocks.0.mod.w", "blocks.0.cross.wk", "instr.embed", "head.w", "t_embed.w1"] {
            let err = grad_check(
                |tape, pv| {
                    // Pre-binding the name routes the store lookup to `pv`.
                    tape.bind(name, pv);
                    let inputs = ForwardInputs {
                        noised: &x,
                        t: 0.7,
                        instr: &[1, 2],
                        condition: &Condition::None,
                        icl: None,
                    };
                    let v = dit_forward(tape, &s, &cfg, &plan, &inputs)?;
                    let tv = tape.constant(target.clone())?;
                    let d = tape.sub(v, tv)?;
                    let d = tape.mul(d, d)?;
                    tape.mean(d)
                },
                s.get(name).unwrap(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
