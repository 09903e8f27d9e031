use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Index of a recorded node on a tape.
pub type NodeId = usize;

/// Value snapshot a backward rule needs: data, shape, and the producing node
/// (None when the operand was an untracked constant).
#[derive(Clone)]
pub(crate) struct Saved<F> {
    pub data: Rc<[F]>,
    pub shape: Vec<usize>,
    pub node: Option<NodeId>,
}

impl<F: Scalar> Saved<F> {
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }
}

/// One output row of a row-mixing op: `out[r] = Σ w_i · in[src_i]`.
#[derive(Clone, Debug)]
pub struct RowMix<F> {
    pub sources: Vec<(usize, F)>,
}

/// Backward rule of a recorded operation.
pub(crate) enum Rule<F> {
    Leaf,
    Matmul { a: Saved<F>, b: Saved<F> },
    Transpose { x: Option<NodeId>, rows: usize, cols: usize },
    Add { a: Option<NodeId>, b: Option<NodeId> },
    Sub { a: Option<NodeId>, b: Option<NodeId> },
    Mul { a: Saved<F>, b: Saved<F> },
    Div { a: Saved<F>, b: Saved<F> },
    Scale { x: Option<NodeId>, factor: F },
    AddScalar { x: Option<NodeId> },
    Neg { x: Option<NodeId> },
    Relu { x: Saved<F> },
    Sigmoid { x: Option<NodeId>, y: Rc<[F]> },
    Ln { x: Saved<F> },
    PowConst { x: Saved<F>, exponent: F },
    ClampMin { x: Saved<F>, min: F },
    SoftmaxRows { x: Option<NodeId>, y: Rc<[F]>, rows: usize, cols: usize },
    ConcatCols { parts: Vec<(Option<NodeId>, usize)>, rows: usize },
    Mean { x: Option<NodeId>, len: usize },
    Sum { x: Option<NodeId>, len: usize },
    SumCols { x: Option<NodeId>, rows: usize, cols: usize },
    BroadcastRows { x: Option<NodeId>, rows: usize, cols: usize },
    TakeRows { x: Option<NodeId>, indices: Rc<[usize]>, src_rows: usize, cols: usize },
    TakePerRow { x: Option<NodeId>, cols_idx: Rc<[usize]>, src_cols: usize },
    ScaleRows { x: Option<NodeId>, weights: Rc<[F]>, cols: usize },
    GatherElems { x: Option<NodeId>, map: Rc<[i64]>, src_len: usize },
    MixRows { x: Option<NodeId>, table: Rc<[RowMix<F>]>, src_rows: usize, cols: usize },
    Reshape { x: Option<NodeId> },
}

pub(crate) struct TapeInner<F> {
    pub rules: Vec<Rule<F>>,
    /// Persistent leaf gradients, accumulated across backward calls.
    pub grads: Vec<Option<Vec<F>>>,
}

/// Recording tape for reverse-mode differentiation.
///
/// Cheap to clone (shared handle). Not `Send`: one tape, one thread.
pub struct Tape<F: Scalar> {
    pub(crate) inner: Rc<RefCell<TapeInner<F>>>,
}

impl<F: Scalar> Clone for Tape<F> {
    fn clone(&self) -> Self {
        Tape {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                rules: Vec::new(),
                grads: Vec::new(),
            })),
        }
    }

    pub(crate) fn same_tape(&self, other: &Tape<F>) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub(crate) fn record(&self, rule: Rule<F>) -> NodeId {
        let mut inner = self.inner.borrow_mut();
        inner.rules.push(rule);
        inner.grads.push(None);
        inner.rules.len() - 1
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.inner.borrow().rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Create a differentiable leaf (`requires_grad` = true) on this tape.
    pub fn leaf(&self, shape: &[usize], data: Vec<F>) -> Result<Tensor<F>> {
        Tensor::new_leaf(self, shape, data)
    }

    /// Clear all accumulated leaf gradients.
    pub fn zero_grads(&self) {
        let mut inner = self.inner.borrow_mut();
        for g in inner.grads.iter_mut() {
            *g = None;
        }
    }

    pub(crate) fn leaf_grad(&self, node: NodeId) -> Option<Vec<F>> {
        self.inner.borrow().grads[node].clone()
    }

    /// Reverse sweep from a scalar loss. Leaf gradients accumulate across
    /// repeated calls; interior gradients are transient.
    pub fn backward(&self, loss: &Tensor<F>) -> Result<()> {
        let (loss_tape, loss_node) = loss
            .track()
            .ok_or(Error::UntrackedLoss)?;
        if !self.same_tape(&loss_tape) {
            return Err(Error::TapeMismatch { op: "backward" });
        }
        if loss.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: loss.shape().to_vec(),
            });
        }

        let mut guard = self.inner.borrow_mut();
        let inner = &mut *guard;
        let n = inner.rules.len();
        let mut pass: Vec<Option<Vec<F>>> = vec![None; n];
        pass[loss_node] = Some(vec![F::one()]);

        for id in (0..=loss_node).rev() {
            let Some(g) = pass[id].take() else { continue };
            apply_rule(&inner.rules[id], &g, &mut pass)?;
            if let Rule::Leaf = inner.rules[id] {
                // Put the pass gradient back so the leaf accumulation below sees it.
                pass[id] = Some(g);
            }
        }

        for (id, rule) in inner.rules.iter().enumerate() {
            if let Rule::Leaf = rule {
                if let Some(g) = pass[id].take() {
                    check_finite("backward", &g)?;
                    match &mut inner.grads[id] {
                        Some(acc) => {
                            for (a, v) in acc.iter_mut().zip(g.iter()) {
                                *a += *v;
                            }
                        }
                        slot => *slot = Some(g),
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn check_finite<F: Scalar>(op: &'static str, data: &[F]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn accum<F: Scalar>(pass: &mut [Option<Vec<F>>], node: Option<NodeId>, contrib: Vec<F>) {
    let Some(id) = node else { return };
    match &mut pass[id] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(contrib.iter()) {
                *a += *v;
            }
        }
        slot => *slot = Some(contrib),
    }
}

fn apply_rule<F: Scalar>(rule: &Rule<F>, g: &[F], pass: &mut [Option<Vec<F>>]) -> Result<()> {
    match rule {
        Rule::Leaf => {}

        Rule::Matmul { a, b } => {
            let (m, k) = (a.rows(), a.cols());
            let n = b.cols();
            if a.node.is_some() {
                // dA = g · Bᵀ
                let mut da = vec![F::zero(); m * k];
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    let darow = &mut da[i * k..(i + 1) * k];
                    for (j, dv) in darow.iter_mut().enumerate() {
                        let brow = &b.data[j * n..(j + 1) * n];
                        let mut acc = F::zero();
                        for l in 0..n {
                            acc += grow[l] * brow[l];
                        }
                        *dv = acc;
                    }
                }
                accum(pass, a.node, da);
            }
            if b.node.is_some() {
                // dB = Aᵀ · g
                let mut db = vec![F::zero(); k * n];
                for l in 0..m {
                    let arow = &a.data[l * k..(l + 1) * k];
                    let grow = &g[l * n..(l + 1) * n];
                    for (i, &av) in arow.iter().enumerate() {
                        let dbrow = &mut db[i * n..(i + 1) * n];
                        for j in 0..n {
                            dbrow[j] += av * grow[j];
                        }
                    }
                }
                accum(pass, b.node, db);
            }
        }

        Rule::Transpose { x, rows, cols } => {
            if x.is_some() {
                // output is cols×rows; transpose the gradient back
                let mut dx = vec![F::zero(); rows * cols];
                for i in 0..*cols {
                    for j in 0..*rows {
                        dx[j * cols + i] = g[i * rows + j];
                    }
                }
                accum(pass, *x, dx);
            }
        }

        Rule::Add { a, b } => {
            accum(pass, *a, g.to_vec());
            accum(pass, *b, g.to_vec());
        }

        Rule::Sub { a, b } => {
            accum(pass, *a, g.to_vec());
            if b.is_some() {
                accum(pass, *b, g.iter().map(|v| -*v).collect());
            }
        }

        Rule::Mul { a, b } => {
            if a.node.is_some() {
                accum(pass, a.node, g.iter().zip(b.data.iter()).map(|(gv, bv)| *gv * *bv).collect());
            }
            if b.node.is_some() {
                accum(pass, b.node, g.iter().zip(a.data.iter()).map(|(gv, av)| *gv * *av).collect());
            }
        }

        Rule::Div { a, b } => {
            if a.node.is_some() {
                accum(pass, a.node, g.iter().zip(b.data.iter()).map(|(gv, bv)| *gv / *bv).collect());
            }
            if b.node.is_some() {
                let contrib: Vec<F> = g
                    .iter()
                    .zip(a.data.iter().zip(b.data.iter()))
                    .map(|(gv, (av, bv))| -(*gv) * *av / (*bv * *bv))
                    .collect();
                accum(pass, b.node, contrib);
            }
        }

        Rule::Scale { x, factor } => {
            accum(pass, *x, g.iter().map(|v| *v * *factor).collect());
        }

        Rule::AddScalar { x } => {
            accum(pass, *x, g.to_vec());
        }

        Rule::Neg { x } => {
            accum(pass, *x, g.iter().map(|v| -*v).collect());
        }

        Rule::Relu { x } => {
            if x.node.is_some() {
                let contrib: Vec<F> = g
                    .iter()
                    .zip(x.data.iter())
                    .map(|(gv, xv)| if *xv > F::zero() { *gv } else { F::zero() })
                    .collect();
                accum(pass, x.node, contrib);
            }
        }

        Rule::Sigmoid { x, y } => {
            if x.is_some() {
                let contrib: Vec<F> = g
                    .iter()
                    .zip(y.iter())
                    .map(|(gv, yv)| *gv * *yv * (F::one() - *yv))
                    .collect();
                accum(pass, *x, contrib);
            }
        }

        Rule::Ln { x } => {
            if x.node.is_some() {
                accum(pass, x.node, g.iter().zip(x.data.iter()).map(|(gv, xv)| *gv / *xv).collect());
            }
        }

        Rule::PowConst { x, exponent } => {
            if x.node.is_some() {
                let e = *exponent;
                let contrib: Vec<F> = g
                    .iter()
                    .zip(x.data.iter())
                    .map(|(gv, xv)| {
                        if *xv == F::zero() && e > F::one() {
                            F::zero()
                        } else {
                            *gv * e * xv.powf(e - F::one())
                        }
                    })
                    .collect();
                accum(pass, x.node, contrib);
            }
        }

        Rule::ClampMin { x, min } => {
            if x.node.is_some() {
                let contrib: Vec<F> = g
                    .iter()
                    .zip(x.data.iter())
                    .map(|(gv, xv)| if *xv > *min { *gv } else { F::zero() })
                    .collect();
                accum(pass, x.node, contrib);
            }
        }

        Rule::SoftmaxRows { x, y, rows, cols } => {
            if x.is_some() {
                let mut dx = vec![F::zero(); rows * cols];
                for r in 0..*rows {
                    let yr = &y[r * cols..(r + 1) * cols];
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mut dot = F::zero();
                    for c in 0..*cols {
                        dot += gr[c] * yr[c];
                    }
                    let dr = &mut dx[r * cols..(r + 1) * cols];
                    for c in 0..*cols {
                        dr[c] = yr[c] * (gr[c] - dot);
                    }
                }
                accum(pass, *x, dx);
            }
        }

        Rule::ConcatCols { parts, rows } => {
            let total: usize = parts.iter().map(|(_, w)| *w).sum();
            let mut offset = 0usize;
            for (node, width) in parts {
                if node.is_some() {
                    let mut dx = vec![F::zero(); rows * width];
                    for r in 0..*rows {
                        dx[r * width..(r + 1) * width]
                            .copy_from_slice(&g[r * total + offset..r * total + offset + width]);
                    }
                    accum(pass, *node, dx);
                }
                offset += width;
            }
        }

        Rule::Mean { x, len } => {
            if x.is_some() {
                let v = g[0] / F::of_f64(*len as f64);
                accum(pass, *x, vec![v; *len]);
            }
        }

        Rule::Sum { x, len } => {
            accum(pass, *x, vec![g[0]; *len]);
        }

        Rule::SumCols { x, rows, cols } => {
            if x.is_some() {
                let mut dx = vec![F::zero(); rows * cols];
                for r in 0..*rows {
                    dx[r * cols..(r + 1) * cols].copy_from_slice(g);
                }
                accum(pass, *x, dx);
            }
        }

        Rule::BroadcastRows { x, rows, cols } => {
            if x.is_some() {
                let mut dx = vec![F::zero(); *cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        dx[c] += g[r * cols + c];
                    }
                }
                accum(pass, *x, dx);
            }
        }

        Rule::TakeRows { x, indices, src_rows, cols } => {
            if x.is_some() {
                let mut dx = vec![F::zero(); src_rows * cols];
                for (r, &src) in indices.iter().enumerate() {
                    let dst = &mut dx[src * cols..(src + 1) * cols];
                    let grow = &g[r * cols..(r + 1) * cols];
                    for c in 0..*cols {
                        dst[c] += grow[c];
                    }
                }
                accum(pass, *x, dx);
            }
        }

        Rule::TakePerRow { x, cols_idx, src_cols } => {
            if x.is_some() {
                let mut dx = vec![F::zero(); cols_idx.len() * src_cols];
                for (r, &c) in cols_idx.iter().enumerate() {
                    dx[r * src_cols + c] += g[r];
                }
                accum(pass, *x, dx);
            }
        }

        Rule::ScaleRows { x, weights, cols } => {
            if x.is_some() {
                let mut dx = vec![F::zero(); weights.len() * cols];
                for (r, &w) in weights.iter().enumerate() {
                    let grow = &g[r * cols..(r + 1) * cols];
                    let drow = &mut dx[r * cols..(r + 1) * cols];
                    for c in 0..*cols {
                        drow[c] = grow[c] * w;
                    }
                }
                accum(pass, *x, dx);
            }
        }

        Rule::GatherElems { x, map, src_len } => {
            if x.is_some() {
                let mut dx = vec![F::zero(); *src_len];
                for (i, &src) in map.iter().enumerate() {
                    if src >= 0 {
                        dx[src as usize] += g[i];
                    }
                }
                accum(pass, *x, dx);
            }
        }

        Rule::MixRows { x, table, src_rows, cols } => {
            if x.is_some() {
                let mut dx = vec![F::zero(); src_rows * cols];
                for (r, mix) in table.iter().enumerate() {
                    let grow = &g[r * cols..(r + 1) * cols];
                    for &(src, w) in &mix.sources {
                        let drow = &mut dx[src * cols..(src + 1) * cols];
                        for c in 0..*cols {
                            drow[c] += w * grow[c];
                        }
                    }
                }
                accum(pass, *x, dx);
            }
        }

        Rule::Reshape { x } => {
            accum(pass, *x, g.to_vec());
        }
    }
    Ok(())
}
