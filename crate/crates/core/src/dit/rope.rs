//! Axial 2D rotary position encoding: the first half of each head is rotated
//! by row-indexed angles, the second half by column-indexed angles.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::tape::PairRotation;
use crate::tensor::{Tape, Var};

/// Precomputed rotation tables for one token layout.
#[derive(Clone, Debug)]
pub struct Rope2d {
    rot: Rc<PairRotation>,
}

/// `θ_j = base^(−2j / (head_dim/2))` for `j < head_dim/4`.
pub fn axis_frequencies(head_dim: usize, base: f64) -> Vec<f64> {
    let half = (head_dim / 2) as f64;
    (0..head_dim / 4)
        .map(|j| base.powf(-2.0 * j as f64 / half))
        .collect()
}

impl Rope2d {
    pub fn new(positions: &[(usize, usize)], head_dim: usize, base: f64) -> Result<Self> {
        if !head_dim.is_multiple_of(4) || head_dim == 0 {
            return Err(Error::Config(format!("head_dim {head_dim} not divisible by 4")));
        }
        let freqs = axis_frequencies(head_dim, base);
        let quarter = freqs.len();
        let pairs = head_dim / 2;
        let mut cos = Vec::with_capacity(positions.len() * pairs);
        let mut sin = Vec::with_capacity(positions.len() * pairs);
        for &(row, col) in positions {
            for axis_pos in [row, col] {
                for f in &freqs {
                    let angle = axis_pos as f64 * f;
                    cos.push(angle.cos());
                    sin.push(angle.sin());
                }
            }
        }
        debug_assert_eq!(cos.len(), positions.len() * 2 * quarter);
        Ok(Self {
            rot: Rc::new(PairRotation {
                cos,
                sin,
                tokens: positions.len(),
                pairs,
            }),
        })
    }

    pub fn tokens(&self) -> usize {
        self.rot.tokens
    }

    /// Rotate `x: [heads, tokens, head_dim]`.
    pub fn apply(&self, tape: &Tape, x: Var) -> Result<Var> {
        tape.rotate_pairs(x, self.rot.clone())
    }
}

/// Convenience wrapper: rotate `q_or_k: [heads, n, head_dim]` on a
/// `rows × cols` grid.
pub fn rope2d(tape: &Tape, q_or_k: Var, rows: usize, cols: usize, base: f64) -> Result<Var> {
    let shape = tape.shape(q_or_k);
    let head_dim = *shape.last().unwrap_or(&0);
    let positions = super::patch::grid_positions(rows, cols, 0);
    Rope2d::new(&positions, head_dim, base)?.apply(tape, q_or_k)
}
