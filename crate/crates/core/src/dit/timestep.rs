use crate::tensor::Tensor;

/// Scale applied to `t ∈ [0, 1]` before the sinusoid bank, so the fastest
/// feature completes many periods over the unit interval.
pub const TIME_SCALE: f64 = 1000.0;
const MAX_PERIOD: f64 = 10_000.0;

/// Angular frequencies of the embedding, one per sin/cos pair.
pub fn frequencies(dim: usize) -> Vec<f64> {
    let half = dim / 2;
    (0..half)
        .map(|j| TIME_SCALE * (-(MAX_PERIOD.ln()) * j as f64 / half as f64).exp())
        .collect()
}

/// Interleaved `[sin(ω₀t), cos(ω₀t), sin(ω₁t), ...]` of length `dim`.
pub fn timestep_embed(t: f64, dim: usize) -> Tensor {
    let data = frequencies(dim)
        .into_iter()
        .flat_map(|w| [(w * t).sin(), (w * t).cos()])
        .collect();
    Tensor::from_vec([dim / 2 * 2], data).expect("length matches")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_time() {
        let e = timestep_embed(0.0, 16);
        for pair in e.data().chunks(2) {
            assert_eq!(pair, &[0.0, 1.0]);
        }
    }

    #[test]
    fn coarse_grid_is_injective() {
        let es: Vec<_> = [0.0, 0.5, 1.0].iter().map(|&t| timestep_embed(t, 32)).collect();
        for i in 0..3 {
            for j in i + 1..3 {
                assert!(es[i].max_abs_diff(&es[j]) > 1e-3);
            }
        }
    }

    #[test]
    fn lipschitz_in_sum_of_frequencies() {
        let dim = 32;
        let lip: f64 = frequencies(dim).iter().sum();
        let grid: Vec<f64> = (0..=200).map(|i| i as f64 / 200.0).collect();
        for &a in &grid {
            for &b in grid.iter().step_by(7) {
                if a == b {
                    continue;
                }
                let d = timestep_embed(a, dim)
                    .zip_map(&timestep_embed(b, dim), |x, y| x - y)
                    .unwrap()
                    .norm();
                assert!(d <= lip * (a - b).abs() + 1e-12);
            }
        }
    }
}
