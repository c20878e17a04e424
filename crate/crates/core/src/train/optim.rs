use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Decoupled-weight-decay Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm threshold; `f64::INFINITY` disables clipping.
    pub grad_clip: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, weight_decay: f64, grad_clip: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            grad_clip,
        }
    }
}

/// Moment accumulators keyed by parameter name, plus the step count used
/// for bias correction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    #[serde(skip)]
    pub m: BTreeMap<String, Vec<f64>>,
    #[serde(skip)]
    pub v: BTreeMap<String, Vec<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to every gradient (1 when no clipping happened).
    pub clip_scale: f64,
}

/// Global L2 norm over the gradients of trainable tensors.
pub fn global_grad_norm(params: &ParamStore) -> f64 {
    params
        .iter()
        .filter(|(_, t)| t.requires_grad)
        .filter_map(|(_, t)| t.grad.as_ref())
        .flat_map(|g| g.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Scale so that the global norm does not exceed `clip`.
pub fn clip_scale(norm: f64, clip: f64) -> f64 {
    if norm > clip {
        clip / norm
    } else {
        1.0
    }
}

/// One AdamW update in place. `g` is the already-clipped gradient.
pub fn adamw_update(p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[i]);
    }
}

/// Clip then update every trainable tensor that holds a gradient. Frozen
/// tensors and tensors without a gradient are left untouched, including by
/// weight decay. Gradients are not cleared.
pub fn optimizer_step(params: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) -> Result<StepStats> {
    let grad_norm = global_grad_norm(params);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite { op: "optimizer_step" });
    }
    let scale = clip_scale(grad_norm, cfg.grad_clip);
    state.t += 1;
    for (name, t) in params.iter_mut() {
        if !t.requires_grad {
            continue;
        }
        let Some(grad) = t.grad.take() else { continue };
        let g: Vec<f64> = grad.iter().map(|x| x * scale).collect();
        let n = g.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        adamw_update(t.data_mut(), &g, m, v, state.t, cfg);
        t.grad = Some(grad);
    }
    Ok(StepStats {
        grad_norm,
        clip_scale: scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(w: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(w));
        s.get_mut("w").unwrap().grad = Some(vec![g]);
        s
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut s = store(0.7, 0.0);
        let before = s.clone();
        let mut st = AdamState::default();
        for _ in 0..3 {
            optimizer_step(&mut s, &mut st, &AdamConfig::new(0.1, 0.0, f64::INFINITY)).unwrap();
        }
        assert!(s.bit_eq(&before));
    }

    #[test]
    fn quadratic_step_moves_toward_zero() {
        // f(w) = w², w = 1 → g = 2
        let mut s = store(1.0, 2.0);
        let mut st = AdamState::default();
        optimizer_step(&mut s, &mut st, &AdamConfig::new(0.1, 0.0, f64::INFINITY)).unwrap();
        let w = s.get("w").unwrap().data()[0];
        assert!(w < 1.0 && w > 0.0);
        assert!((1.0 - w).abs() <= 0.1 + 1e-12);
    }

    #[test]
    fn clipping_scales_the_consumed_gradient() {
        let mk = || {
            let mut s = ParamStore::new();
            s.insert("a", Tensor::from_vec([2], vec![0.5, -0.5]).unwrap());
            s.get_mut("a").unwrap().grad = Some(vec![6.0, 8.0]);
            s
        };
        let (mut s1, mut s2) = (mk(), mk());
        let (mut st1, mut st2) = (AdamState::default(), AdamState::default());
        let clipped = optimizer_step(&mut s1, &mut st1, &AdamConfig::new(0.01, 0.0, 1.0)).unwrap();
        let free = optimizer_step(&mut s2, &mut st2, &AdamConfig::new(0.01, 0.0, f64::INFINITY)).unwrap();
        assert_eq!(clipped.grad_norm, 10.0);
        assert!((clipped.clip_scale - 0.1).abs() < 1e-15);
        assert_eq!(free.clip_scale, 1.0);
        for (a, b) in st1.m["a"].iter().zip(&st2.m["a"]) {
            assert!((a - 0.1 * b).abs() < 1e-15);
        }
        for (a, b) in st1.v["a"].iter().zip(&st2.v["a"]) {
            assert!((a - 0.01 * b).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_tensors_are_untouched() {
        let mut s = store(1.0, 2.0);
        s.set_trainable(|_| false);
        let before = s.clone();
        optimizer_step(&mut s, &mut AdamState::default(), &AdamConfig::new(0.1, 0.5, 1.0)).unwrap();
        assert!(s.bit_eq(&before));
    }

    #[test]
    fn decoupled_decay_shrinks_weights() {
        let mut s = store(2.0, 0.0);
        optimizer_step(&mut s, &mut AdamState::default(), &AdamConfig::new(0.1, 0.5, 1.0)).unwrap();
        assert!((s.get("w").unwrap().data()[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut s = store(1.0, f64::NAN);
        let err = optimizer_step(&mut s, &mut AdamState::default(), &AdamConfig::new(0.1, 0.0, 1.0));
        assert!(matches!(err, Err(Error::NonFinite { .. })));
    }
}
