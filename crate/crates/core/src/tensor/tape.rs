use std::cell::{Ref, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Pointwise operations routed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Exp,
    Ln,
    PowScalar(f64),
    Silu,
}

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

/// Cosine/sine tables for pairwise rotations, one row per token.
#[derive(Debug)]
pub(crate) struct PairRotation {
    pub cos: Vec<f64>,
    pub sin: Vec<f64>,
    pub tokens: usize,
    pub pairs: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Const,
    MatMul {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        trans_b: bool,
    },
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
    },
    Neg(usize),
    Exp(usize),
    Ln(usize),
    Pow(usize, f64),
    Silu(usize),
    Scale(usize, f64),
    Shift(usize),
    Softmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    RmsNorm {
        x: usize,
        gain: usize,
        outer: usize,
        len: usize,
        inner: usize,
        inv_rms: Vec<f64>,
    },
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    SwapAxes01 {
        a: usize,
        d0: usize,
        d1: usize,
        rest: usize,
    },
    SliceRows {
        a: usize,
        start: usize,
        row: usize,
    },
    ConcatRows {
        parts: Vec<usize>,
    },
    SliceCols {
        a: usize,
        start: usize,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<(usize, usize)>,
        rows: usize,
    },
    Rotate {
        a: usize,
        rot: Rc<PairRotation>,
    },
    Gather {
        table: usize,
        ids: Vec<usize>,
        width: usize,
    },
    Index {
        a: usize,
        map: Rc<Vec<usize>>,
    },
}

struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Define-by-run reverse-mode tape.
///
/// Nodes are appended in evaluation order, so parents always precede
/// children and a single reverse sweep visits each node once.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    leaf_grads: RefCell<BTreeMap<usize, Vec<f64>>>,
    bindings: RefCell<HashMap<String, Var>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            leaf_grads: RefCell::new(BTreeMap::new()),
            bindings: RefCell::new(HashMap::new()),
            grad_enabled: true,
        }
    }

    /// A tape that never records gradient information.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, shape: Vec<usize>, data: Vec<f64>, op: Op, op_name: &'static str) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = self.grad_enabled
            && match &op {
                Op::Leaf | Op::Const => false,
                other => parents(other).iter().any(|&p| nodes[p].requires_grad),
            };
        let op = if requires_grad { op } else { Op::Const };
        nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Ok(Var(nodes.len() - 1))
    }

    /// Record a leaf; gradients are kept for it when `t.requires_grad` is set.
    pub fn leaf(&self, t: Tensor) -> Result<Var> {
        let requires_grad = t.requires_grad && self.grad_enabled;
        if !t.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape: t.shape,
            data: t.data,
            requires_grad,
            op: Op::Leaf,
        });
        Ok(Var(nodes.len() - 1))
    }

    pub fn constant(&self, t: Tensor) -> Result<Var> {
        self.leaf(t.with_grad(false))
    }

    /// Look up a named binding (used for parameters).
    pub fn binding(&self, name: &str) -> Option<Var> {
        self.bindings.borrow().get(name).copied()
    }

    pub fn bind(&self, name: impl Into<String>, v: Var) {
        self.bindings.borrow_mut().insert(name.into(), v);
    }

    pub fn bindings(&self) -> Vec<(String, Var)> {
        let mut out: Vec<_> = self
            .bindings
            .borrow()
            .iter()
            .map(|(k, v)| (k.clone(), *v))
            .collect();
        out.sort();
        out
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn data(&self, v: Var) -> Ref<'_, [f64]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].data.as_slice())
    }

    pub fn value(&self, v: Var) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor {
            shape: n.shape.clone(),
            data: n.data.clone(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        if n.data.len() != 1 {
            return Err(Error::contract(format!("expected scalar, got {:?}", n.shape)));
        }
        Ok(n.data[0])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let shape = self.shape(v);
        self.leaf_grads.borrow().get(&v.0).map(|g| Tensor {
            shape,
            data: g.clone(),
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zero_grads(&self) {
        self.leaf_grads.borrow_mut().clear();
    }

    // ---- linear algebra ---------------------------------------------------

    /// Matrix product of `[m×k]·[k×n]`, or batched `[b×m×k]·[b×k×n]`.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` with `b` laid out as `[n×k]` (or batched `[b×n×k]`).
    pub fn matmul_nt(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (shape, data, op) = {
            let nodes = self.nodes.borrow();
            let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
            let mismatch = || Error::Dimension {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            };
            let (batch, m, k, kb, n) = match (sa.len(), sb.len()) {
                (2, 2) => {
                    let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
                    (1, sa[0], sa[1], kb, n)
                }
                (3, 3) if sa[0] == sb[0] => {
                    let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
                    (sa[0], sa[1], sa[2], kb, n)
                }
                _ => return Err(mismatch()),
            };
            if k != kb {
                return Err(mismatch());
            }
            let (ad, bd) = (&nodes[a.0].data, &nodes[b.0].data);
            let mut out = vec![0.0; batch * m * n];
            for bi in 0..batch {
                let a_s = &ad[bi * m * k..(bi + 1) * m * k];
                let b_s = &bd[bi * k * n..(bi + 1) * k * n];
                let c_s = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt(a_s, b_s, c_s, m, k, n);
                } else {
                    gemm_nn(a_s, b_s, c_s, m, k, n);
                }
            }
            let shape = if sa.len() == 3 { vec![batch, m, n] } else { vec![m, n] };
            let op = Op::MatMul {
                a: a.0,
                b: b.0,
                batch,
                m,
                k,
                n,
                trans_b,
            };
            (shape, out, op)
        };
        self.push(shape, data, op, "matmul")
    }

    // ---- pointwise ----------------------------------------------------------

    /// Dispatch a pointwise operation. Binary operations broadcast `b` when
    /// its shape is a trailing suffix of `a`'s shape.
    pub fn elementwise(&self, op: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || {
            b.ok_or_else(|| Error::contract(format!("{op:?} needs a second operand")))
        };
        match op {
            ElementwiseOp::Add => self.binary(BinKind::Add, a, need_b()?),
            ElementwiseOp::Sub => self.binary(BinKind::Sub, a, need_b()?),
            ElementwiseOp::Mul => self.binary(BinKind::Mul, a, need_b()?),
            ElementwiseOp::Div => self.binary(BinKind::Div, a, need_b()?),
            ElementwiseOp::Neg => self.neg(a),
            ElementwiseOp::Exp => self.exp(a),
            ElementwiseOp::Ln => self.ln(a),
            ElementwiseOp::PowScalar(p) => self.pow_scalar(a, p),
            ElementwiseOp::Silu => self.silu(a),
        }
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    fn binary(&self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            let suffix_ok = nb.shape.len() <= na.shape.len()
                && na.shape[na.shape.len() - nb.shape.len()..] == nb.shape[..];
            if !suffix_ok {
                return Err(Error::Dimension {
                    op: "elementwise",
                    lhs: na.shape.clone(),
                    rhs: nb.shape.clone(),
                });
            }
            let bl = nb.data.len();
            if matches!(kind, BinKind::Div) && nb.data.contains(&0.0) {
                return Err(Error::NumericDomain {
                    op: "div",
                    detail: "division by zero".into(),
                });
            }
            let data: Vec<f64> = na
                .data
                .chunks(bl)
                .flat_map(|chunk| {
                    chunk.iter().zip(&nb.data).map(move |(&x, &y)| match kind {
                        BinKind::Add => x + y,
                        BinKind::Sub => x - y,
                        BinKind::Mul => x * y,
                        BinKind::Div => x / y,
                    })
                })
                .collect();
            (na.shape.clone(), data)
        };
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        self.push(shape, data, Op::Binary { kind, a: a.0, b: b.0 }, name)
    }

    fn unary(
        &self,
        a: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
        name: &'static str,
    ) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            (n.shape.clone(), n.data.iter().map(|&x| f(x)).collect())
        };
        self.push(shape, data, op, name)
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| -x, Op::Neg(a.0), "neg")
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, f64::exp, Op::Exp(a.0), "exp")
    }

    pub fn ln(&self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x <= 0.0) {
            return Err(Error::NumericDomain {
                op: "ln",
                detail: "logarithm of a non-positive value".into(),
            });
        }
        self.unary(a, f64::ln, Op::Ln(a.0), "ln")
    }

    pub fn pow_scalar(&self, a: Var, p: f64) -> Result<Var> {
        self.unary(a, |x| x.powf(p), Op::Pow(a.0, p), "pow")
    }

    pub fn silu(&self, a: Var) -> Result<Var> {
        self.unary(a, |x| x * sigmoid(x), Op::Silu(a.0), "silu")
    }

    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x * c, Op::Scale(a.0, c), "scale")
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, |x| x + c, Op::Shift(a.0), "add_scalar")
    }

    // ---- normalisation ------------------------------------------------------

    fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok((
            shape[..axis].iter().product(),
            shape[axis],
            shape[axis + 1..].iter().product(),
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let (shape, data, outer, len, inner) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let (outer, len, inner) = Self::axis_split(&n.shape, axis)?;
            let mut out = vec![0.0; n.data.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let max = (0..len).map(|l| n.data[idx(l)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for l in 0..len {
                        let e = (n.data[idx(l)] - max).exp();
                        out[idx(l)] = e;
                        total += e;
                    }
                    for l in 0..len {
                        out[idx(l)] /= total;
                    }
                }
            }
            (n.shape.clone(), out, outer, len, inner)
        };
        self.push(
            shape,
            data,
            Op::Softmax {
                a: a.0,
                outer,
                len,
                inner,
            },
            "softmax",
        )
    }

    /// `x / sqrt(mean(x²) + eps) * gain` along `axis`; `gain` has length
    /// `shape[axis]`.
    pub fn rms_norm(&self, x: Var, gain: Var, axis: usize, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::contract("rms_norm eps must be positive"));
        }
        let (shape, data, outer, len, inner, inv_rms) = {
            let nodes = self.nodes.borrow();
            let (nx, ng) = (&nodes[x.0], &nodes[gain.0]);
            let (outer, len, inner) = Self::axis_split(&nx.shape, axis)?;
            if ng.data.len() != len {
                return Err(Error::Dimension {
                    op: "rms_norm",
                    lhs: nx.shape.clone(),
                    rhs: ng.shape.clone(),
                });
            }
            let mut out = vec![0.0; nx.data.len()];
            let mut inv_rms = vec![0.0; outer * inner];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |l: usize| (o * len + l) * inner + i;
                    let ms = (0..len).map(|l| nx.data[idx(l)].powi(2)).sum::<f64>() / len as f64;
                    let r = 1.0 / (ms + eps).sqrt();
                    inv_rms[o * inner + i] = r;
                    for l in 0..len {
                        out[idx(l)] = nx.data[idx(l)] * r * ng.data[l];
                    }
                }
            }
            (nx.shape.clone(), out, outer, len, inner, inv_rms)
        };
        self.push(
            shape,
            data,
            Op::RmsNorm {
                x: x.0,
                gain: gain.0,
                outer,
                len,
                inner,
                inv_rms,
            },
            "rms_norm",
        )
    }

    // ---- reductions ----------------------------------------------------------

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s = self.data(a).iter().sum::<f64>();
        self.push(Vec::new(), vec![s], Op::Sum(a.0), "sum")
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let (s, n) = {
            let d = self.data(a);
            (d.iter().sum::<f64>(), d.len())
        };
        self.push(Vec::new(), vec![s / n as f64], Op::Mean(a.0), "mean")
    }

    // ---- layout ------------------------------------------------------------

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let data = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            if numel(&shape) != n.data.len() {
                return Err(Error::Dimension {
                    op: "reshape",
                    lhs: n.shape.clone(),
                    rhs: shape,
                });
            }
            n.data.clone()
        };
        self.push(shape, data, Op::Reshape(a.0), "reshape")
    }

    /// `[d0, d1, ...] -> [d1, d0, ...]`.
    pub fn swap_axes01(&self, a: Var) -> Result<Var> {
        let (shape, data, d0, d1, rest) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            if n.shape.len() < 2 {
                return Err(Error::contract("swap_axes01 needs rank >= 2"));
            }
            let (d0, d1) = (n.shape[0], n.shape[1]);
            let rest: usize = n.shape[2..].iter().product();
            let mut out = vec![0.0; n.data.len()];
            for i in 0..d0 {
                for j in 0..d1 {
                    let src = (i * d1 + j) * rest;
                    let dst = (j * d0 + i) * rest;
                    out[dst..dst + rest].copy_from_slice(&n.data[src..src + rest]);
                }
            }
            let mut shape = n.shape.clone();
            shape.swap(0, 1);
            (shape, out, d0, d1, rest)
        };
        self.push(shape, data, Op::SwapAxes01 { a: a.0, d0, d1, rest }, "swap_axes01")
    }

    /// Rows `[start, start+len)` along axis 0.
    pub fn slice_rows(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (shape, data, row) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            if n.shape.is_empty() || start + len > n.shape[0] {
                return Err(Error::contract(format!(
                    "slice_rows [{start}, {}) out of range for {:?}",
                    start + len,
                    n.shape
                )));
            }
            let row: usize = n.shape[1..].iter().product();
            let mut shape = n.shape.clone();
            shape[0] = len;
            (shape, n.data[start * row..(start + len) * row].to_vec(), row)
        };
        self.push(shape, data, Op::SliceRows { a: a.0, start, row }, "slice_rows")
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
            let tail = nodes[first.0].shape[1..].to_vec();
            let mut rows = 0;
            let mut data = Vec::new();
            for p in parts {
                let n = &nodes[p.0];
                if n.shape.is_empty() || n.shape[1..] != tail[..] {
                    return Err(Error::Dimension {
                        op: "concat_rows",
                        lhs: nodes[first.0].shape.clone(),
                        rhs: n.shape.clone(),
                    });
                }
                rows += n.shape[0];
                data.extend_from_slice(&n.data);
            }
            let mut shape = vec![rows];
            shape.extend(tail);
            (shape, data)
        };
        self.push(
            shape,
            data,
            Op::ConcatRows {
                parts: parts.iter().map(|p| p.0).collect(),
            },
            "concat_rows",
        )
    }

    /// Columns `[start, start+width)` of a matrix.
    pub fn slice_cols(&self, a: Var, start: usize, width: usize) -> Result<Var> {
        let (shape, data, cols) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            if n.shape.len() != 2 || start + width > n.shape[1] {
                return Err(Error::contract(format!(
                    "slice_cols [{start}, {}) out of range for {:?}",
                    start + width,
                    n.shape
                )));
            }
            let (rows, cols) = (n.shape[0], n.shape[1]);
            let mut out = Vec::with_capacity(rows * width);
            for r in 0..rows {
                out.extend_from_slice(&n.data[r * cols + start..r * cols + start + width]);
            }
            (vec![rows, width], out, cols)
        };
        self.push(shape, data, Op::SliceCols { a: a.0, start, cols }, "slice_cols")
    }

    /// Concatenate matrices side by side; row counts must agree.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        let (shape, data, widths, rows) = {
            let nodes = self.nodes.borrow();
            let first = parts
                .first()
                .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
            let rows = nodes[first.0].shape.first().copied().unwrap_or(0);
            let mut widths = Vec::new();
            for p in parts {
                let s = &nodes[p.0].shape;
                if s.len() != 2 || s[0] != rows {
                    return Err(Error::Dimension {
                        op: "concat_cols",
                        lhs: nodes[first.0].shape.clone(),
                        rhs: s.clone(),
                    });
                }
                widths.push((p.0, s[1]));
            }
            let total: usize = widths.iter().map(|w| w.1).sum();
            let mut out = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for &(id, w) in &widths {
                    out.extend_from_slice(&nodes[id].data[r * w..(r + 1) * w]);
                }
            }
            (vec![rows, total], out, widths, rows)
        };
        self.push(shape, data, Op::ConcatCols { parts: widths, rows }, "concat_cols")
    }

    /// Rotate consecutive element pairs of the last axis by per-token angles.
    /// `a` has shape `[.., tokens, 2·pairs]`.
    pub(crate) fn rotate_pairs(&self, a: Var, rot: Rc<PairRotation>) -> Result<Var> {
        let (shape, data) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[a.0];
            let d = rot.pairs * 2;
            let r = n.shape.len();
            if r < 2 || n.shape[r - 1] != d || n.shape[r - 2] != rot.tokens {
                return Err(Error::Dimension {
                    op: "rotate_pairs",
                    lhs: n.shape.clone(),
                    rhs: vec![rot.tokens, d],
                });
            }
            let mut out = n.data.clone();
            for (chunk_idx, chunk) in out.chunks_mut(d).enumerate() {
                let tok = chunk_idx % rot.tokens;
                for j in 0..rot.pairs {
                    let (c, s) = (rot.cos[tok * rot.pairs + j], rot.sin[tok * rot.pairs + j]);
                    let (x0, x1) = (chunk[2 * j], chunk[2 * j + 1]);
                    chunk[2 * j] = x0 * c - x1 * s;
                    chunk[2 * j + 1] = x0 * s + x1 * c;
                }
            }
            (n.shape.clone(), out)
        };
        self.push(shape, data, Op::Rotate { a: a.0, rot }, "rotate_pairs")
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather_rows(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let (shape, data, width) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[table.0];
            if n.shape.len() != 2 {
                return Err(Error::contract("gather_rows needs a matrix"));
            }
            let (rows, width) = (n.shape[0], n.shape[1]);
            let mut out = Vec::with_capacity(ids.len() * width);
            for &id in ids {
                if id >= rows {
                    return Err(Error::contract(format!("row {id} out of range ({rows} rows)")));
                }
                out.extend_from_slice(&n.data[id * width..(id + 1) * width]);
            }
            (vec![ids.len(), width], out, width)
        };
        self.push(
            shape,
            data,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
                width,
            },
            "gather_rows",
        )
    }

    /// `out[i] = a.flat[map[i]]`, reshaped to `shape`. Covers arbitrary
    /// permutations such as patch (un)folding.
    pub fn index_flat(&self, a: Var, map: Rc<Vec<usize>>, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let data = {
            let nodes = self.nodes.borrow();
            let src = &nodes[a.0].data;
            if numel(&shape) != map.len() || map.iter().any(|&i| i >= src.len()) {
                return Err(Error::contract(format!(
                    "index map of {} entries does not fit {:?} from {} elements",
                    map.len(),
                    shape,
                    src.len()
                )));
            }
            map.iter().map(|&i| src[i]).collect()
        };
        self.push(shape, data, Op::Index { a: a.0, map }, "index_flat")
    }

    // ---- reverse sweep ----------------------------------------------------

    /// Backpropagate from a scalar. Leaf gradients accumulate across calls
    /// until [`Tape::zero_grads`].
    pub fn backward(&self, loss: Var) -> Result<()> {
        self.backward_scaled(loss, 1.0)
    }

    /// Backpropagate `seed · d(loss)`.
    pub fn backward_scaled(&self, loss: Var, seed: f64) -> Result<()> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if nodes[loss.0].data.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![seed]);
        let mut leaf_grads = self.leaf_grads.borrow_mut();

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            propagate(&nodes, node, id, &g, &mut grads, &mut leaf_grads);
        }
        Ok(())
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf | Op::Const => vec![],
        Op::MatMul { a, b, .. } | Op::Binary { a, b, .. } => vec![*a, *b],
        Op::Neg(a)
        | Op::Exp(a)
        | Op::Ln(a)
        | Op::Pow(a, _)
        | Op::Silu(a)
        | Op::Scale(a, _)
        | Op::Shift(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::Reshape(a) => vec![*a],
        Op::Softmax { a, .. }
        | Op::SwapAxes01 { a, .. }
        | Op::SliceRows { a, .. }
        | Op::SliceCols { a, .. }
        | Op::Rotate { a, .. } => vec![*a],
        Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
        Op::ConcatRows { parts } => parts.clone(),
        Op::ConcatCols { parts, .. } => parts.iter().map(|p| p.0).collect(),
        Op::Gather { table, .. } => vec![*table],
        Op::Index { a, .. } => vec![*a],
    }
}

fn slot<'a>(
    grads: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].data.len()]))
}

fn propagate(
    nodes: &[Node],
    node: &Node,
    id: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    leaf_grads: &mut BTreeMap<usize, Vec<f64>>,
) {
    match &node.op {
        Op::Const => {}
        Op::Leaf => {
            let acc = leaf_grads
                .entry(id)
                .or_insert_with(|| vec![0.0; g.len()]);
            acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            trans_b,
        } => {
            let (ad, bd) = (&nodes[a].data, &nodes[b].data);
            if let Some(ga) = slot(grads, nodes, a) {
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let bs = &bd[bi * k * n..(bi + 1) * k * n];
                    let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                    if trans_b {
                        // dA = dC · B, B is [n×k]
                        gemm_nn(gs, bs, out, m, n, k);
                    } else {
                        // dA = dC · Bᵀ, B is [k×n]
                        gemm_nt(gs, bs, out, m, n, k);
                    }
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for bi in 0..batch {
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let as_ = &ad[bi * m * k..(bi + 1) * m * k];
                    let out = &mut gb[bi * k * n..(bi + 1) * k * n];
                    if trans_b {
                        // dB = dCᵀ · A -> [n×k]
                        gemm_tn(gs, as_, out, m, n, k);
                    } else {
                        // dB = Aᵀ · dC -> [k×n]
                        gemm_tn(as_, gs, out, m, k, n);
                    }
                }
            }
        }
        &Op::Binary { kind, a, b } => {
            let (ad, bd) = (&nodes[a].data, &nodes[b].data);
            let bl = bd.len();
            if let Some(ga) = slot(grads, nodes, a) {
                for (i, gi) in g.iter().enumerate() {
                    ga[i] += match kind {
                        BinKind::Add | BinKind::Sub => *gi,
                        BinKind::Mul => gi * bd[i % bl],
                        BinKind::Div => gi / bd[i % bl],
                    };
                }
            }
            if let Some(gb) = slot(grads, nodes, b) {
                for (i, gi) in g.iter().enumerate() {
                    let j = i % bl;
                    gb[j] += match kind {
                        BinKind::Add => *gi,
                        BinKind::Sub => -gi,
                        BinKind::Mul => gi * ad[i],
                        BinKind::Div => -gi * ad[i] / (bd[j] * bd[j]),
                    };
                }
            }
        }
        &Op::Neg(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x -= gi);
            }
        }
        &Op::Exp(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * node.data[i];
                }
            }
        }
        &Op::Ln(a) => {
            let ad = &nodes[a].data;
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..g.len() {
                    ga[i] += g[i] / ad[i];
                }
            }
        }
        &Op::Pow(a, p) => {
            let ad = &nodes[a].data;
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..g.len() {
                    ga[i] += g[i] * p * ad[i].powf(p - 1.0);
                }
            }
        }
        &Op::Silu(a) => {
            let ad = &nodes[a].data;
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..g.len() {
                    let s = sigmoid(ad[i]);
                    ga[i] += g[i] * s * (1.0 + ad[i] * (1.0 - s));
                }
            }
        }
        &Op::Scale(a, c) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi * c);
            }
        }
        &Op::Shift(a) | &Op::Reshape(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().zip(g).for_each(|(x, gi)| *x += gi);
            }
        }
        &Op::Softmax {
            a,
            outer,
            len,
            inner,
        } => {
            let y = &node.data;
            if let Some(ga) = slot(grads, nodes, a) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * y[idx(l)]).sum();
                        for l in 0..len {
                            ga[idx(l)] += y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
            }
        }
        Op::RmsNorm {
            x,
            gain,
            outer,
            len,
            inner,
            inv_rms,
        } => {
            let (x, gain, outer, len, inner) = (*x, *gain, *outer, *len, *inner);
            let (xd, gd) = (&nodes[x].data, &nodes[gain].data);
            if let Some(gx) = slot(grads, nodes, x) {
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let r = inv_rms[o * inner + i];
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * gd[l] * xd[idx(l)]).sum();
                        let coef = r * r * r * dot / len as f64;
                        for l in 0..len {
                            gx[idx(l)] += r * gd[l] * g[idx(l)] - coef * xd[idx(l)];
                        }
                    }
                }
            }
            if let Some(gg) = slot(grads, nodes, gain) {
                for o in 0..outer {
                    for i in 0..inner {
                        let r = inv_rms[o * inner + i];
                        for (l, gl) in gg.iter_mut().enumerate() {
                            let k = (o * len + l) * inner + i;
                            *gl += g[k] * xd[k] * r;
                        }
                    }
                }
            }
        }
        &Op::Sum(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
        }
        &Op::Mean(a) => {
            if let Some(ga) = slot(grads, nodes, a) {
                let s = g[0] / ga.len() as f64;
                ga.iter_mut().for_each(|x| *x += s);
            }
        }
        &Op::SwapAxes01 { a, d0, d1, rest } => {
            if let Some(ga) = slot(grads, nodes, a) {
                for i in 0..d0 {
                    for j in 0..d1 {
                        let src = (j * d0 + i) * rest;
                        let dst = (i * d1 + j) * rest;
                        for r in 0..rest {
                            ga[dst + r] += g[src + r];
                        }
                    }
                }
            }
        }
        &Op::SliceRows { a, start, row } => {
            if let Some(ga) = slot(grads, nodes, a) {
                let off = start * row;
                for (i, gi) in g.iter().enumerate() {
                    ga[off + i] += gi;
                }
            }
        }
        Op::ConcatRows { parts } => {
            let mut off = 0;
            for &p in parts {
                let len = nodes[p].data.len();
                if let Some(gp) = slot(grads, nodes, p) {
                    gp.iter_mut()
                        .zip(&g[off..off + len])
                        .for_each(|(x, gi)| *x += gi);
                }
                off += len;
            }
        }
        &Op::SliceCols { a, start, cols } => {
            let width = node.shape[1];
            if let Some(ga) = slot(grads, nodes, a) {
                for r in 0..node.shape[0] {
                    for c in 0..width {
                        ga[r * cols + start + c] += g[r * width + c];
                    }
                }
            }
        }
        Op::ConcatCols { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut off = 0;
            for &(p, w) in parts {
                if let Some(gp) = slot(grads, nodes, p) {
                    for r in 0..*rows {
                        for c in 0..w {
                            gp[r * w + c] += g[r * total + off + c];
                        }
                    }
                }
                off += w;
            }
        }
        Op::Rotate { a, rot } => {
            let d = rot.pairs * 2;
            if let Some(ga) = slot(grads, nodes, *a) {
                for (chunk_idx, (gc, out)) in g.chunks(d).zip(ga.chunks_mut(d)).enumerate() {
                    let tok = chunk_idx % rot.tokens;
                    for j in 0..rot.pairs {
                        let (c, s) = (rot.cos[tok * rot.pairs + j], rot.sin[tok * rot.pairs + j]);
                        let (g0, g1) = (gc[2 * j], gc[2 * j + 1]);
                        out[2 * j] += g0 * c + g1 * s;
                        out[2 * j + 1] += -g0 * s + g1 * c;
                    }
                }
            }
        }
        Op::Index { a, map } => {
            if let Some(ga) = slot(grads, nodes, *a) {
                for (gi, &src) in g.iter().zip(map.iter()) {
                    ga[src] += gi;
                }
            }
        }
        Op::Gather { table, ids, width } => {
            if let Some(gt) = slot(grads, nodes, *table) {
                for (r, &id) in ids.iter().enumerate() {
                    for c in 0..*width {
                        gt[id * width + c] += g[r * width + c];
                    }
                }
            }
        }
    }
}
