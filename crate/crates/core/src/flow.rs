//! Rectified-flow objective and Euler sampler. Noise sits at `t = 0`, data at
//! `t = 1`, and the target velocity along the straight path is `x1 − x0`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// `(1 − t)·x0 + t·x1`.
pub fn sample_path(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::contract(format!("path time {t} outside [0, 1]")));
    }
    x0.zip_map(x1, |a, b| (1.0 - t) * a + t * b)
}

/// One training draw along the probability path.
#[derive(Clone, Debug)]
pub struct FlowDraw {
    pub t: f64,
    pub x0: Tensor,
    pub x_t: Tensor,
    pub target: Tensor,
}

impl FlowDraw {
    /// `t ~ U[0, 1)` and `x0 ~ N(0, I)` from a dedicated seed.
    pub fn sample(x1: &Tensor, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t: f64 = rng.gen();
        let x0 = Tensor::randn(x1.shape(), 1.0, &mut rng);
        Ok(Self {
            t,
            x_t: sample_path(&x0, x1, t)?,
            target: x1.zip_map(&x0, |a, b| a - b)?,
            x0,
        })
    }
}

/// Mean over elements of `(prediction − target)²` for one sample.
pub fn cfm_sample_loss(tape: &Tape, prediction: Var, target: &Tensor) -> Result<Var> {
    let tv = tape.constant(target.clone())?;
    let d = tape.sub(prediction, tv)?;
    let sq = tape.mul(d, d)?;
    tape.mean(sq)
}

/// Batch CFM loss, one tape per sample.
///
/// With `grad` set, each sample loss is back-propagated and `collect` is
/// called with the tape and the batch-mean weight `1/B` before the tape is
/// dropped.
pub fn cfm_loss<F, G>(draws: &[FlowDraw], grad: bool, mut predict: F, mut collect: G) -> Result<f64>
where
    F: FnMut(&Tape, usize, &FlowDraw) -> Result<Var>,
    G: FnMut(&Tape, f64),
{
    if draws.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let weight = 1.0 / draws.len() as f64;
    let mut total = 0.0;
    for (i, d) in draws.iter().enumerate() {
        let tape = if grad { Tape::new() } else { Tape::inference() };
        let pred = predict(&tape, i, d)?;
        let loss = cfm_sample_loss(&tape, pred, &d.target)?;
        total += tape.scalar(loss)?;
        if grad {
            tape.backward(loss)?;
            collect(&tape, weight);
        }
    }
    Ok(total * weight)
}

/// Integrate `dx/dt = velocity(t, x)` from `x0 ~ N(0, I)` with `steps`
/// uniform Euler steps; the result is clamped to `[−1, 1]` at the end only.
pub fn euler_sample<F>(mut velocity: F, shape: &[usize], steps: usize, seed: u64) -> Result<Tensor>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0 = Tensor::randn(shape, 1.0, &mut rng);
    Ok(euler_integrate(&mut velocity, x0, steps)?.map(|v| v.clamp(-1.0, 1.0)))
}

/// Unclamped Euler integration from a given start point.
pub fn euler_integrate<F>(velocity: &mut F, mut x: Tensor, steps: usize) -> Result<Tensor>
where
    F: FnMut(f64, &Tensor) -> Result<Tensor>,
{
    if steps == 0 {
        return Err(Error::contract("euler sampler needs at least one step"));
    }
    let dt = 1.0 / steps as f64;
    for k in 0..steps {
        let v = match velocity(k as f64 * dt, &x) {
            Ok(v) => v,
            Err(Error::NonFinite { .. }) => return Err(Error::SamplerDivergence { step: k }),
            Err(e) => return Err(e),
        };
        x = x.zip_map(&v, |a, b| a + dt * b)?;
        if !x.all_finite() {
            return Err(Error::SamplerDivergence { step: k });
        }
    }
    Ok(x)
}

/// Kolmogorov–Smirnov distance between `samples` and `U[0, 1]`.
pub fn ks_uniform(samples: &[f64]) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    s.iter()
        .enumerate()
        .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (Tensor::randn([3, 4, 4], 1.0, &mut rng), Tensor::randn([3, 4, 4], 1.0, &mut rng).map(f64::tanh))
    }

    #[test]
    fn path_endpoints_and_midpoint() {
        let (x0, x1) = pair(0);
        assert!(sample_path(&x0, &x1, 0.0).unwrap().bit_eq(&x0));
        assert!(sample_path(&x0, &x1, 1.0).unwrap().bit_eq(&x1));
        let neg = x1.map(|v| -v);
        assert!(sample_path(&neg, &x1, 0.5).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(sample_path(&x0, &x1, 1.5), Err(Error::Contract(_))));
        assert!(sample_path(&x0, &x1, -0.1).is_err());
    }

    #[test]
    fn perfect_model_has_zero_loss() {
        let draws: Vec<_> = (0..8).map(|i| FlowDraw::sample(&pair(i).1, i).unwrap()).collect();
        let loss = cfm_loss(&draws, false, |tape, _, d| tape.constant(d.target.clone()), |_, _| {}).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn zero_model_matches_target_mean_square() {
        let x1 = pair(1).1;
        let draws: Vec<_> = (0..1000).map(|i| FlowDraw::sample(&x1, 100 + i).unwrap()).collect();
        let loss = cfm_loss(&draws, false, |tape, _, d| tape.constant(Tensor::zeros(d.target.shape())), |_, _| {}).unwrap();
        // E‖x1 − x0‖² per element = x1² + 1
        let expected = x1.data().iter().map(|v| v * v + 1.0).sum::<f64>() / x1.numel() as f64;
        assert!((loss - expected).abs() / expected < 0.02, "{loss} vs {expected}");
    }

    #[test]
    fn constant_field_is_integrated_exactly() {
        let (x0, x1) = pair(2);
        let v = x1.zip_map(&x0, |a, b| a - b).unwrap();
        let mut field = |_t: f64, _x: &Tensor| Ok(v.clone());
        let one = euler_integrate(&mut field, x0.clone(), 1).unwrap();
        let fifty = euler_integrate(&mut field, x0.clone(), 50).unwrap();
        assert!(one.max_abs_diff(&x1) < 1e-12);
        assert!(one.max_abs_diff(&fifty) < 1e-10);
    }

    #[test]
    fn sampler_is_deterministic_and_clamped() {
        let mut field = |t: f64, x: &Tensor| Ok(x.map(|v| 3.0 * v + t));
        let a = euler_sample(&mut field, &[3, 4, 4], 10, 9).unwrap();
        let b = euler_sample(&mut field, &[3, 4, 4], 10, 9).unwrap();
        assert!(a.bit_eq(&b));
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn divergence_names_the_step() {
        let mut field = |t: f64, x: &Tensor| Ok(x.map(|v| if t >= 0.5 { f64::INFINITY } else { v }));
        match euler_sample(&mut field, &[2], 4, 0) {
            Err(Error::SamplerDivergence { step }) => assert_eq!(step, 2),
            other => panic!("{other:?}"),
        }
        assert!(euler_sample(&mut field, &[2], 0, 0).is_err());
    }

    #[test]
    fn time_draws_cover_the_unit_interval() {
        let ts: Vec<f64> = (0..10_000)
            .map(|i| FlowDraw::sample(&Tensor::zeros([1]), crate::degrade::train_seed(0, 0, i)).unwrap().t)
            .collect();
        assert!(ks_uniform(&ts) < 0.02);
    }
}
