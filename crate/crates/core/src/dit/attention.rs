use rand::Rng;

use super::rope::Rope2d;
use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

/// Instruction tokens reaching a block through the zero-gated cross path.
#[derive(Clone, Copy, Debug)]
pub struct CrossInput<'a> {
    pub tokens: Var,
    pub prefix: &'a str,
}

pub(crate) fn linear_init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::randn([fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

pub fn init_attention<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, hidden: usize, head_dim: usize, rng: &mut R) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.{w}"), linear_init(rng, hidden, hidden));
    }
    store.insert(format!("{prefix}.q_gain"), Tensor::ones([head_dim]));
    store.insert(format!("{prefix}.k_gain"), Tensor::ones([head_dim]));
}

/// Key/value projections for instruction tokens plus a per-channel gate that
/// starts at exactly zero.
pub fn init_cross<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, hidden: usize, head_dim: usize, rng: &mut R) {
    store.insert(format!("{prefix}.wk"), linear_init(rng, hidden, hidden));
    store.insert(format!("{prefix}.wv"), linear_init(rng, hidden, hidden));
    store.insert(format!("{prefix}.k_gain"), Tensor::ones([head_dim]));
    store.insert(format!("{prefix}.gate"), Tensor::zeros([hidden]));
}

/// `[n, hidden] -> [heads, n, head_dim]`, optionally RMS-normalised per head.
fn split_heads(tape: &Tape, x: Var, heads: usize, gain: Option<Var>, eps: f64) -> Result<Var> {
    let shape = tape.shape(x);
    let (n, hidden) = (shape[0], shape[1]);
    let x = tape.reshape(x, [n, heads, hidden / heads])?;
    let x = match gain {
        Some(g) => tape.rms_norm(x, g, 2, eps)?,
        None => x,
    };
    tape.swap_axes01(x)
}

fn merge_heads(tape: &Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    let (heads, n, d) = (shape[0], shape[1], shape[2]);
    let x = tape.swap_axes01(x)?;
    tape.reshape(x, [n, heads * d])
}

fn scaled_dot(tape: &Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = *tape.shape(q).last().expect("rank 3");
    let logits = tape.matmul_nt(q, k)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt())?;
    let probs = tape.softmax(logits, 2)?;
    tape.matmul(probs, v)
}

/// Full bidirectional multi-head attention over `x: [n, hidden]`.
///
/// Queries and keys are RMS-normalised per head with learned gains, then
/// rotated by `rope`. When `cross` is given, the same queries also attend to
/// the instruction tokens; that result is scaled by the cross gate and added
/// before the output projection.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    tape: &Tape,
    params: &ParamStore,
    prefix: &str,
    x: Var,
    heads: usize,
    rope: &Rope2d,
    eps: f64,
    cross: Option<CrossInput<'_>>,
) -> Result<Var> {
    let p = |name: &str| params.var(tape, &format!("{prefix}.{name}"));
    let q = tape.matmul(x, p("wq")?)?;
    let k = tape.matmul(x, p("wk")?)?;
    let v = tape.matmul(x, p("wv")?)?;
    let q = split_heads(tape, q, heads, Some(p("q_gain")?), eps)?;
    let k = split_heads(tape, k, heads, Some(p("k_gain")?), eps)?;
    let v = split_heads(tape, v, heads, None, eps)?;
    let q = rope.apply(tape, q)?;
    let k = rope.apply(tape, k)?;
    let mut out = merge_heads(tape, scaled_dot(tape, q, k, v)?)?;

    if let Some(cross) = cross {
        let cp = |name: &str| params.var(tape, &format!("{}.{name}", cross.prefix));
        let ck = tape.matmul(cross.tokens, cp("wk")?)?;
        let cv = tape.matmul(cross.tokens, cp("wv")?)?;
        let ck = split_heads(tape, ck, heads, Some(cp("k_gain")?), eps)?;
        let cv = split_heads(tape, cv, heads, None, eps)?;
        let c = merge_heads(tape, scaled_dot(tape, q, ck, cv)?)?;
        let c = tape.mul(c, cp("gate")?)?;
        out = tape.add(out, c)?;
    }
    tape.matmul(out, p("wo")?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::patch::grid_positions;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(hidden: usize, heads: usize, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        init_attention(&mut s, "a", hidden, hidden / heads, &mut rng);
        init_cross(&mut s, "c", hidden, hidden / heads, &mut rng);
        s
    }

    #[test]
    fn single_token_returns_value() {
        let mut s = store(8, 2, 0);
        *s.get_mut("a.wv").unwrap() = Tensor::eye(8).with_grad(true);
        *s.get_mut("a.wo").unwrap() = Tensor::eye(8).with_grad(true);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn([1, 8], 1.0, &mut rng);
        let tape = Tape::inference();
        let xv = tape.constant(x.clone()).unwrap();
        let rope = Rope2d::new(&grid_positions(1, 1, 0), 4, 10_000.0).unwrap();
        let out = attention(&tape, &s, "a", xv, 2, &rope, 1e-6, None).unwrap();
        assert!(tape.value(out).max_abs_diff(&x) < 1e-15);
    }

    #[test]
    fn zero_gate_ignores_instructions_bitwise() {
        let s = store(8, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn([6, 8], 1.0, &mut rng);
        let rope = Rope2d::new(&grid_positions(2, 3, 0), 4, 10_000.0).unwrap();
        let run = |instr: Option<Tensor>| {
            let tape = Tape::inference();
            let xv = tape.constant(x.clone()).unwrap();
            let cross = instr.map(|t| CrossInput {
                tokens: tape.constant(t).unwrap(),
                prefix: "c",
            });
            let out = attention(&tape, &s, "a", xv, 2, &rope, 1e-6, cross).unwrap();
            tape.value(out)
        };
        let plain = run(None);
        let a = run(Some(Tensor::randn([3, 8], 1.0, &mut rng)));
        let b = run(Some(Tensor::randn([5, 8], 1.0, &mut rng)));
        assert!(plain.bit_eq(&a) && plain.bit_eq(&b));
    }

    #[test]
    fn qk_norm_makes_logits_scale_free() {
        let mut s = store(8, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn([4, 8], 1.0, &mut rng);
        let rope = Rope2d::new(&grid_positions(2, 2, 0), 4, 10_000.0).unwrap();
        let run = |s: &ParamStore| {
            let tape = Tape::inference();
            let xv = tape.constant(x.clone()).unwrap();
            tape.value(attention(&tape, s, "a", xv, 2, &rope, 1e-12, None).unwrap())
        };
        let before = run(&s);
        let wq = s.get("a.wq").unwrap().map(|v| v * 100.0).with_grad(true);
        *s.get_mut("a.wq").unwrap() = wq;
        let after = run(&s);
        assert!(before.max_abs_diff(&after) < 1e-6);
    }
}
