use rand::Rng;

use super::attention::{attention, init_attention, init_cross, linear_init, CrossInput};
use super::config::ModelConfig;
use super::rope::Rope2d;
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

/// Which optional pieces a block carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockKind {
    /// Timestep-driven scale/shift/gate (backbone blocks).
    pub modulated: bool,
    /// Zero-gated cross path for instruction tokens.
    pub cross: bool,
}

impl BlockKind {
    pub const BACKBONE: Self = Self {
        modulated: true,
        cross: true,
    };
    pub const ADAPTER: Self = Self {
        modulated: false,
        cross: false,
    };
}

pub fn init_block<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &ModelConfig, kind: BlockKind, rng: &mut R) {
    let (h, f) = (cfg.hidden_dim, cfg.ffn_dim);
    init_attention(store, &format!("{prefix}.attn"), h, cfg.head_dim(), rng);
    if kind.cross {
        init_cross(store, &format!("{prefix}.cross"), h, cfg.head_dim(), rng);
    }
    for n in ["attn_pre", "attn_post", "ffn_pre", "ffn_post"] {
        store.insert(format!("{prefix}.norm.{n}"), Tensor::ones([h]));
    }
    store.insert(format!("{prefix}.ffn.w1"), linear_init(rng, h, f));
    store.insert(format!("{prefix}.ffn.b1"), Tensor::zeros([f]));
    store.insert(format!("{prefix}.ffn.w2"), linear_init(rng, f, h));
    store.insert(format!("{prefix}.ffn.b2"), Tensor::zeros([h]));
    if kind.modulated {
        // Zero modulation: unit scale, zero shift, closed residual gates.
        store.insert(format!("{prefix}.mod.w"), Tensor::zeros([h, 6 * h]));
        store.insert(format!("{prefix}.mod.b"), Tensor::zeros([6 * h]));
    }
}

/// Per-call inputs shared by every block of a forward pass.
pub struct BlockInputs<'a> {
    pub rope: &'a Rope2d,
    /// `silu(timestep embedding)` as a `[1, hidden]` row; required for
    /// modulated blocks.
    pub time: Option<Var>,
    pub instr: Option<Var>,
}

fn ffn(tape: &Tape, params: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let p = |n: &str| params.var(tape, &format!("{prefix}.ffn.{n}"));
    let hdn = tape.matmul(x, p("w1")?)?;
    let hdn = tape.add(hdn, p("b1")?)?;
    let hdn = tape.silu(hdn)?;
    let out = tape.matmul(hdn, p("w2")?)?;
    tape.add(out, p("b2")?)
}

/// Sandwich-normalised transformer block.
///
/// Each sublayer computes `x + gate ⊙ post_norm(F(pre_norm(x)·(1+scale) + shift))`.
/// Unmodulated blocks use unit scale, zero shift and an open gate.
pub fn sandwich_block(
    tape: &Tape,
    params: &ParamStore,
    prefix: &str,
    cfg: &ModelConfig,
    kind: BlockKind,
    x: Var,
    inputs: &BlockInputs<'_>,
) -> Result<Var> {
    let h = cfg.hidden_dim;
    let eps = cfg.norm_eps;
    let p = |n: &str| params.var(tape, &format!("{prefix}.{n}"));

    let modulation = if kind.modulated {
        let time = inputs
            .time
            .ok_or_else(|| crate::Error::contract("modulated block needs a timestep embedding"))?;
        let m = tape.matmul(time, p("mod.w")?)?;
        let m = tape.add(m, p("mod.b")?)?;
        let mut parts = Vec::with_capacity(6);
        for i in 0..6 {
            let s = tape.slice_cols(m, i * h, h)?;
            parts.push(tape.reshape(s, [h])?);
        }
        Some(parts)
    } else {
        None
    };

    let modulate = |y: Var, shift: usize, scale: usize| -> Result<Var> {
        match &modulation {
            Some(m) => {
                let s = tape.add_scalar(m[scale], 1.0)?;
                let y = tape.mul(y, s)?;
                tape.add(y, m[shift])
            }
            None => Ok(y),
        }
    };
    let gated = |y: Var, gate: usize| -> Result<Var> {
        match &modulation {
            Some(m) => tape.mul(y, m[gate]),
            None => Ok(y),
        }
    };

    let cross_prefix = format!("{prefix}.cross");
    let cross = match (kind.cross, inputs.instr) {
        (true, Some(tokens)) => Some(CrossInput {
            tokens,
            prefix: &cross_prefix,
        }),
        _ => None,
    };

    let y = tape.rms_norm(x, p("norm.attn_pre")?, 1, eps)?;
    let y = modulate(y, 0, 1)?;
    let y = attention(tape, params, &format!("{prefix}.attn"), y, cfg.num_heads, inputs.rope, eps, cross)?;
    let y = tape.rms_norm(y, p("norm.attn_post")?, 1, eps)?;
    let x = tape.add(x, gated(y, 2)?)?;

    let y = tape.rms_norm(x, p("norm.ffn_pre")?, 1, eps)?;
    let y = modulate(y, 3, 4)?;
    let y = ffn(tape, params, prefix, y)?;
    let y = tape.rms_norm(y, p("norm.ffn_post")?, 1, eps)?;
    tape.add(x, gated(y, 5)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::patch::grid_positions;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg() -> ModelConfig {
        ModelConfig {
            image_size: 8,
            patch_size: 2,
            hidden_dim: 8,
            num_heads: 2,
            ffn_dim: 12,
            ..Default::default()
        }
    }

    #[test]
    fn zero_gates_make_block_identity() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        init_block(&mut s, "b", &cfg, BlockKind::BACKBONE, &mut rng);
        let x = Tensor::randn([16, 8], 1.0, &mut rng);
        let tape = Tape::inference();
        let xv = tape.constant(x.clone()).unwrap();
        let time = tape.constant(Tensor::randn([1, 8], 1.0, &mut rng)).unwrap();
        let instr = tape.constant(Tensor::randn([3, 8], 1.0, &mut rng)).unwrap();
        let rope = Rope2d::new(&grid_positions(4, 4, 0), 4, 10_000.0).unwrap();
        let inputs = BlockInputs {
            rope: &rope,
            time: Some(time),
            instr: Some(instr),
        };
        let out = sandwich_block(&tape, &s, "b", &cfg, BlockKind::BACKBONE, xv, &inputs).unwrap();
        assert!(tape.value(out).bit_eq(&x));
    }

    #[test]
    fn shape_preserved_and_gradients_agree() {
        let cfg = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for kind in [BlockKind::BACKBONE, BlockKind::ADAPTER] {
            let mut s = ParamStore::new();
            init_block(&mut s, "b", &cfg, kind, &mut rng);
            s.jitter(&mut rng, 0.3, |_| true);
            let x = Tensor::randn([16, 8], 1.0, &mut rng);
            let time = Tensor::randn([1, 8], 1.0, &mut rng);
            let instr = Tensor::randn([3, 8], 1.0, &mut rng);
            let rope = Rope2d::new(&grid_positions(4, 4, 0), 4, 10_000.0).unwrap();
            let w = Tensor::randn([16, 8], 1.0, &mut rng);
            let f = |tape: &Tape, xv: Var| {
                let inputs = BlockInputs {
                    rope: &rope,
                    time: Some(tape.constant(time.clone())?),
                    instr: Some(tape.constant(instr.clone())?),
                };
                let y = sandwich_block(tape, &s, "b", &cfg, kind, xv, &inputs)?;
                assert_eq!(tape.shape(y), vec![16, 8]);
                let wv = tape.constant(w.clone())?;
                let y = tape.mul(y, wv)?;
                tape.sum(y)
            };
            let err = grad_check(f, &x, 1e-5).unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
    }
}
