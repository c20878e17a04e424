use serde::{Deserialize, Serialize};

use crate::dit::patch::TokenGrid;
use crate::dit::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor, Var};

/// How exemplar tokens are combined with the query tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// Exemplar tokens appended along the token axis.
    Concat,
    /// Exemplar tokens projected and summed into the query tokens.
    ProjectionAddition,
}

impl FusionMode {
    pub const ALL: [FusionMode; 2] = [FusionMode::ProjectionAddition, FusionMode::Concat];

    pub fn label(self) -> &'static str {
        match self {
            FusionMode::Concat => "concat",
            FusionMode::ProjectionAddition => "projection-addition",
        }
    }
}

/// One zero-initialised linear map per exemplar image slot
/// (`2 · max_icl_pairs` slots: lq then hq for each pair).
pub fn init_projectors(store: &mut ParamStore, cfg: &ModelConfig) {
    for slot in 0..2 * cfg.max_icl_pairs {
        store.insert(format!("icl.proj.{slot}.w"), Tensor::zeros([cfg.patch_dim(), cfg.hidden_dim]));
        store.insert(format!("icl.proj.{slot}.b"), Tensor::zeros([cfg.hidden_dim]));
    }
}

/// View of the projector parameters inside a store.
#[derive(Clone, Copy, Debug)]
pub struct IclProjectors<'a> {
    params: &'a ParamStore,
}

impl<'a> IclProjectors<'a> {
    pub fn new(params: &'a ParamStore) -> Self {
        Self { params }
    }

    pub fn slots(&self) -> usize {
        (0..)
            .take_while(|s| self.params.contains(&format!("icl.proj.{s}.w")))
            .count()
    }

    /// `φ_slot(x) = x·W + b`.
    pub fn project(&self, tape: &Tape, slot: usize, x: Var) -> Result<Var> {
        let name = format!("icl.proj.{slot}.w");
        if !self.params.contains(&name) {
            return Err(Error::contract(format!("no projector for exemplar slot {slot}")));
        }
        let y = tape.matmul(x, self.params.var(tape, &name)?)?;
        tape.add(y, self.params.var(tape, &format!("icl.proj.{slot}.b"))?)
    }
}

fn width(tape: &Tape, v: Var) -> usize {
    *tape.shape(v).last().unwrap_or(&0)
}

/// Token-axis concatenation `[H_img; H_p1; …; H_pn]`. Prompt grids are
/// stacked below the image so every segment keeps distinct row coordinates.
pub fn fuse_icl_concat(tape: &Tape, h_img: &TokenGrid, prompts: &[TokenGrid]) -> Result<TokenGrid> {
    if prompts.is_empty() {
        return Ok(h_img.clone());
    }
    let hidden = width(tape, h_img.tokens);
    let mut tokens = vec![h_img.tokens];
    let mut positions = h_img.positions.clone();
    let mut next_row = positions.iter().map(|p| p.0 + 1).max().unwrap_or(0);
    for (i, p) in prompts.iter().enumerate() {
        if width(tape, p.tokens) != hidden {
            return Err(Error::contract(format!(
                "prompt {i} has width {} but the image grid has {hidden}",
                width(tape, p.tokens)
            )));
        }
        let base = p.positions.iter().map(|q| q.0).min().unwrap_or(0);
        positions.extend(p.positions.iter().map(|&(r, c)| (next_row + r - base, c)));
        next_row = positions.iter().map(|q| q.0 + 1).max().unwrap_or(next_row);
        tokens.push(p.tokens);
    }
    Ok(TokenGrid {
        tokens: tape.concat_rows(&tokens)?,
        rows: h_img.rows,
        cols: h_img.cols,
        positions,
    })
}

/// `H_img + Σ_i φ_i(H_prompt_i)`, tokenwise. Prompts carry raw patch values.
pub fn fuse_icl_projection_addition(
    tape: &Tape,
    h_img: &TokenGrid,
    prompts: &[TokenGrid],
    projectors: &IclProjectors<'_>,
) -> Result<TokenGrid> {
    let mut out = h_img.tokens;
    for (slot, p) in prompts.iter().enumerate() {
        if p.len() != h_img.len() {
            return Err(Error::contract(format!(
                "prompt {slot} has {} tokens, image grid has {}",
                p.len(),
                h_img.len()
            )));
        }
        let projected = projectors.project(tape, slot, p.tokens)?;
        out = tape.add(out, projected)?;
    }
    Ok(TokenGrid {
        tokens: out,
        ..h_img.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dit::patch::grid_positions;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid(tape: &Tape, rng: &mut ChaCha8Rng, n_side: usize, width: usize) -> TokenGrid {
        let t = Tensor::randn([n_side * n_side, width], 1.0, rng);
        TokenGrid::new(tape.constant(t).unwrap(), n_side, n_side)
    }

    #[test]
    fn concat_counts_segments_and_offsets() {
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = grid(&tape, &mut rng, 8, 4);
        assert_eq!(tape.value(fuse_icl_concat(&tape, &img, &[]).unwrap().tokens), tape.value(img.tokens));
        let prompts: Vec<_> = (0..4).map(|_| grid(&tape, &mut rng, 8, 4)).collect();
        let fused = fuse_icl_concat(&tape, &img, &prompts).unwrap();
        assert_eq!(fused.len(), 320);
        let value = tape.value(fused.tokens);
        for (k, seg) in std::iter::once(&img).chain(&prompts).enumerate() {
            let part = &value.data()[k * 64 * 4..(k + 1) * 64 * 4];
            let orig = tape.value(seg.tokens);
            assert!(part.iter().zip(orig.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert_eq!(&fused.positions[k * 64..(k + 1) * 64], &grid_positions(8, 8, 8 * k)[..]);
        }
    }

    #[test]
    fn concat_rejects_width_mismatch() {
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = grid(&tape, &mut rng, 2, 4);
        let bad = grid(&tape, &mut rng, 2, 5);
        assert!(matches!(fuse_icl_concat(&tape, &img, &[bad]), Err(Error::Contract(_))));
    }

    fn proj_store(width: usize, hidden: usize) -> ParamStore {
        let cfg = ModelConfig {
            image_size: 4,
            patch_size: 1,
            channels: width,
            hidden_dim: hidden,
            num_heads: 1,
            ..Default::default()
        };
        let mut s = ParamStore::new();
        init_projectors(&mut s, &cfg);
        s
    }

    #[test]
    fn zero_projectors_and_empty_sum() {
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = proj_store(3, 4);
        let proj = IclProjectors::new(&s);
        assert_eq!(proj.slots(), 2);
        let img = grid(&tape, &mut rng, 4, 4);
        let prompts = [grid(&tape, &mut rng, 4, 3), grid(&tape, &mut rng, 4, 3)];
        let base = tape.value(img.tokens);
        let fused = fuse_icl_projection_addition(&tape, &img, &prompts, &proj).unwrap();
        assert_eq!(fused.len(), img.len());
        assert!(tape.value(fused.tokens).bit_eq(&base));
        let empty = fuse_icl_projection_addition(&tape, &img, &[], &proj).unwrap();
        assert!(tape.value(empty.tokens).bit_eq(&base));
    }

    #[test]
    fn identity_projector_adds_prompt() {
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = proj_store(4, 4);
        *s.get_mut("icl.proj.0.w").unwrap() = Tensor::eye(4).with_grad(true);
        let img = grid(&tape, &mut rng, 4, 4);
        let prompt = grid(&tape, &mut rng, 4, 4);
        let fused = fuse_icl_projection_addition(&tape, &img, std::slice::from_ref(&prompt), &IclProjectors::new(&s)).unwrap();
        let expect = tape.value(img.tokens).zip_map(&tape.value(prompt.tokens), |a, b| a + b).unwrap();
        assert!(tape.value(fused.tokens).max_abs_diff(&expect) == 0.0);
    }

    #[test]
    fn projection_rejects_geometry_mismatch() {
        let tape = Tape::inference();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = proj_store(4, 4);
        let img = grid(&tape, &mut rng, 4, 4);
        let small = grid(&tape, &mut rng, 2, 4);
        let err = fuse_icl_projection_addition(&tape, &img, &[small], &IclProjectors::new(&s));
        assert!(matches!(err, Err(Error::Contract(_))));
    }
}
