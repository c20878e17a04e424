use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Token sequence with the 2D grid coordinates used by rotary encoding.
///
/// Image tokens come first in row-major order; appended prompt tokens carry
/// their own (offset) coordinates.
#[derive(Clone, Debug)]
pub struct TokenGrid {
    pub tokens: Var,
    pub rows: usize,
    pub cols: usize,
    pub positions: Vec<(usize, usize)>,
}

impl TokenGrid {
    pub fn new(tokens: Var, rows: usize, cols: usize) -> Self {
        Self {
            tokens,
            rows,
            cols,
            positions: grid_positions(rows, cols, 0),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Tokens belonging to the image grid itself.
    pub fn image_tokens(&self) -> usize {
        self.rows * self.cols
    }
}

/// Row-major `(row, col)` coordinates, rows shifted by `row_offset`.
pub fn grid_positions(rows: usize, cols: usize, row_offset: usize) -> Vec<(usize, usize)> {
    (0..rows * cols)
        .map(|i| (row_offset + i / cols, i % cols))
        .collect()
}

fn check_geometry(shape: &[usize], patch: usize) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::Geometry(format!("expected [c, H, W], got {shape:?}")));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Geometry(format!(
            "{h}x{w} image is not divisible into {patch}x{patch} patches"
        )));
    }
    Ok((c, h, w))
}

/// Flat index map from a `[c, H, W]` image to `[n_tokens, c·p·p]` patches.
/// Within a patch values are ordered channel, then row, then column.
fn patch_map(c: usize, h: usize, w: usize, p: usize) -> Vec<usize> {
    let (rows, cols) = (h / p, w / p);
    let mut map = Vec::with_capacity(c * h * w);
    for r in 0..rows {
        for q in 0..cols {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        map.push((ch * h + r * p + dy) * w + q * p + dx);
                    }
                }
            }
        }
    }
    map
}

fn invert(map: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; map.len()];
    for (i, &m) in map.iter().enumerate() {
        inv[m] = i;
    }
    inv
}

/// Non-overlapping patches of `image` as a `[n_tokens, c·p·p]` matrix,
/// before any embedding.
pub fn patchify_raw(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (c, h, w) = check_geometry(image.shape(), patch)?;
    let map = patch_map(c, h, w, patch);
    let data = map.iter().map(|&i| image.data()[i]).collect();
    Tensor::from_vec([(h / patch) * (w / patch), c * patch * patch], data)
}

/// Inverse of [`patchify_raw`].
pub fn unpatchify_raw(patches: &Tensor, channels: usize, height: usize, width: usize, patch: usize) -> Result<Tensor> {
    check_geometry(&[channels, height, width], patch)?;
    let inv = invert(&patch_map(channels, height, width, patch));
    if patches.numel() != inv.len() {
        return Err(Error::Geometry(format!(
            "{} patch values cannot fill a {channels}x{height}x{width} image",
            patches.numel()
        )));
    }
    let data = inv.iter().map(|&i| patches.data()[i]).collect();
    Tensor::from_vec([channels, height, width], data)
}

/// Unfold a raw image into patches and embed them linearly.
pub fn patchify(tape: &Tape, image: &Tensor, patch: usize, weight: Var, bias: Var) -> Result<TokenGrid> {
    let (_, h, w) = check_geometry(image.shape(), patch)?;
    let raw = tape.constant(patchify_raw(image, patch)?)?;
    let tokens = tape.matmul(raw, weight)?;
    let tokens = tape.add(tokens, bias)?;
    Ok(TokenGrid::new(tokens, h / patch, w / patch))
}

/// Fold a `[n_tokens, c·p·p]` tape value back into a `[c, H, W]` image.
pub fn unpatchify(tape: &Tape, patches: Var, channels: usize, height: usize, width: usize, patch: usize) -> Result<Var> {
    check_geometry(&[channels, height, width], patch)?;
    let inv = invert(&patch_map(channels, height, width, patch));
    tape.index_flat(patches, Rc::new(inv), [channels, height, width])
}
