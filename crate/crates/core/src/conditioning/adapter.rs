use rand::Rng;

use super::plan::InjectionPlan;
use crate::dit::attention::linear_init;
use crate::dit::block::{init_block, sandwich_block, BlockInputs, BlockKind};
use crate::dit::patch::{grid_positions, patchify};
use crate::dit::{ModelConfig, Rope2d};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

/// Adapter trunk (patch embedding plus unmodulated blocks) and one
/// zero-initialised linear head per injection site of `plan`.
pub fn init_adapter<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &ModelConfig, plan: &InjectionPlan, rng: &mut R) {
    let (h, pd) = (cfg.hidden_dim, cfg.patch_dim());
    store.insert("adapter.embed.w", linear_init(rng, pd, h));
    store.insert("adapter.embed.b", Tensor::zeros([h]));
    for i in 0..cfg.adapter_blocks {
        init_block(store, &format!("adapter.blocks.{i}"), cfg, BlockKind::ADAPTER, rng);
    }
    for k in 0..plan.sites(cfg.num_blocks).len() {
        store.insert(format!("adapter.heads.{k}.w"), Tensor::zeros([h, h]));
        store.insert(format!("adapter.heads.{k}.b"), Tensor::zeros([h]));
    }
}

/// Run the adapter trunk once over the condition image and emit one
/// `[n_tokens, hidden]` feature per injection site.
pub fn encode_condition(
    tape: &Tape,
    params: &ParamStore,
    cfg: &ModelConfig,
    plan: &InjectionPlan,
    lq: &Tensor,
) -> Result<Vec<Var>> {
    if !plan.uses_adapter() {
        return Err(Error::contract(
            "input-concat plan bypasses the condition adapter",
        ));
    }
    let grid = patchify(
        tape,
        lq,
        cfg.patch_size,
        params.var(tape, "adapter.embed.w")?,
        params.var(tape, "adapter.embed.b")?,
    )?;
    let rope = Rope2d::new(&grid_positions(grid.rows, grid.cols, 0), cfg.head_dim(), cfg.rope_base)?;
    let inputs = BlockInputs {
        rope: &rope,
        time: None,
        instr: None,
    };
    let mut x = grid.tokens;
    for i in 0..cfg.adapter_blocks {
        x = sandwich_block(tape, params, &format!("adapter.blocks.{i}"), cfg, BlockKind::ADAPTER, x, &inputs)?;
    }
    (0..plan.sites(cfg.num_blocks).len())
        .map(|k| {
            let f = tape.matmul(x, params.var(tape, &format!("adapter.heads.{k}.w"))?)?;
            tape.add(f, params.var(tape, &format!("adapter.heads.{k}.b"))?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::InjectionVariant;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(blocks: usize) -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 2,
            hidden_dim: 8,
            num_heads: 2,
            num_blocks: blocks,
            ffn_dim: 12,
            freq_dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn zero_features_at_init_and_site_count() {
        let cfg = cfg(8);
        let plan = InjectionPlan::new(InjectionVariant::FirstHalf);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        init_adapter(&mut s, &cfg, &plan, &mut rng);
        let lq = Tensor::randn(cfg.image_shape(), 1.0, &mut rng);
        let tape = Tape::inference();
        let feats = encode_condition(&tape, &s, &cfg, &plan, &lq).unwrap();
        assert_eq!(feats.len(), 4);
        for f in feats {
            assert_eq!(tape.shape(f), vec![16, 8]);
            assert!(tape.data(f).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn input_concat_is_rejected() {
        let cfg = cfg(2);
        let plan = InjectionPlan::new(InjectionVariant::InputConcat);
        let tape = Tape::inference();
        let err = encode_condition(&tape, &ParamStore::new(), &cfg, &plan, &Tensor::zeros(cfg.image_shape()));
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn adapter_gradient() {
        let cfg = cfg(2);
        let plan = InjectionPlan::new(InjectionVariant::Interval);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        init_adapter(&mut s, &cfg, &plan, &mut rng);
        s.jitter(&mut rng, 0.3, |_| true);
        let lq = Tensor::randn(cfg.image_shape(), 1.0, &mut rng);
        let w = Tensor::randn([16, 8], 1.0, &mut rng);
        for name in ["adapter.embed.w", "adapter.blocks.0.attn.wq", "adapter.blocks.1.ffn.w1", "adapter.heads.0.w"] {
            let err = grad_check(
                |tape, pv| {
                    tape.bind(name, pv);
                    let f = encode_condition(tape, &s, &cfg, &plan, &lq)?;
                    let wv = tape.constant(w.clone())?;
                    let y = tape.mul(f[0], wv)?;
                    let y = tape.mul(y, y)?;
                    tape.sum(y)
                },
                s.get(name).unwrap(),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name}: {err}");
        }
    }
}
