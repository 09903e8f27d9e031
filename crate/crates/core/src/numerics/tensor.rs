use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tape::{check_finite, NodeId, Rule, RowMix, Saved, Tape};

/// Dense n-dimensional value array, optionally tracked on a [`Tape`].
///
/// Values are immutable after construction. Clones share storage.
pub struct Tensor<F: Scalar> {
    shape: Vec<usize>,
    data: Rc<[F]>,
    track: Option<(Tape<F>, NodeId)>,
    requires_grad: bool,
}

impl<F: Scalar> Clone for Tensor<F> {
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            track: self.track.as_ref().map(|(t, n)| (t.clone(), *n)),
            requires_grad: self.requires_grad,
        }
    }
}

impl<F: Scalar> std::fmt::Debug for Tensor<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("requires_grad", &self.requires_grad)
            .field("tracked", &self.track.is_some())
            .finish()
    }
}

fn check_shape(op: &'static str, shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![len],
        });
    }
    Ok(())
}

impl<F: Scalar> Tensor<F> {
    /// Untracked constant tensor.
    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        check_shape("from_vec", shape, data.len())?;
        check_finite("from_vec", &data)?;
        Ok(Tensor {
            shape: shape.to_vec(),
            data: data.into(),
            track: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![F::zero(); numel].into(),
            track: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: F) -> Result<Self> {
        let numel = shape.iter().product();
        Self::from_vec(shape, vec![value; numel])
    }

    pub(crate) fn new_leaf(tape: &Tape<F>, shape: &[usize], data: Vec<F>) -> Result<Self> {
        check_shape("leaf", shape, data.len())?;
        check_finite("leaf", &data)?;
        let node = tape.record(Rule::Leaf);
        Ok(Tensor {
            shape: shape.to_vec(),
            data: data.into(),
            track: Some((tape.clone(), node)),
            requires_grad: true,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> F {
        debug_assert_eq!(self.numel(), 1);
        self.data[0]
    }

    /// Accumulated gradient, present on leaves after a backward pass.
    pub fn grad(&self) -> Option<Vec<F>> {
        let (tape, node) = self.track.as_ref()?;
        if !self.requires_grad {
            return None;
        }
        tape.leaf_grad(*node)
    }

    pub(crate) fn track(&self) -> Option<(Tape<F>, NodeId)> {
        self.track.as_ref().map(|(t, n)| (t.clone(), *n))
    }

    fn node(&self) -> Option<NodeId> {
        self.track.as_ref().map(|(_, n)| *n)
    }

    fn saved(&self) -> Saved<F> {
        Saved {
            data: Rc::clone(&self.data),
            shape: self.shape.clone(),
            node: self.node(),
        }
    }

    fn rows(&self) -> usize {
        self.shape[0]
    }

    fn cols(&self) -> usize {
        self.shape[1]
    }

    fn require_matrix(&self, op: &'static str) -> Result<()> {
        if self.shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0, 0],
            });
        }
        Ok(())
    }

    fn joint_tape(op: &'static str, inputs: &[&Tensor<F>]) -> Result<Option<Tape<F>>> {
        let mut tape: Option<Tape<F>> = None;
        for t in inputs {
            if let Some((tp, _)) = &t.track {
                match &tape {
                    None => tape = Some(tp.clone()),
                    Some(existing) => {
                        if !existing.same_tape(tp) {
                            return Err(Error::TapeMismatch { op });
                        }
                    }
                }
            }
        }
        Ok(tape)
    }

    fn emit(
        op: &'static str,
        shape: Vec<usize>,
        data: Vec<F>,
        tape: Option<Tape<F>>,
        rule: impl FnOnce(&Rc<[F]>) -> Rule<F>,
    ) -> Result<Tensor<F>> {
        check_finite(op, &data)?;
        let data: Rc<[F]> = data.into();
        let track = tape.map(|t| {
            let node = t.record(rule(&data));
            (t, node)
        });
        Ok(Tensor {
            shape,
            data,
            track,
            requires_grad: false,
        })
    }

    fn same_shape(&self, op: &'static str, other: &Tensor<F>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(())
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Matrix product of `self` (m×k) and `rhs` (k×n).
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.require_matrix("matmul")?;
        rhs.require_matrix("matmul")?;
        if self.cols() != rhs.rows() {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.rows(), self.cols(), rhs.cols());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let arow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (l, &av) in arow.iter().enumerate() {
                let brow = &rhs.data[l * n..(l + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let tape = Self::joint_tape("matmul", &[self, rhs])?;
        let (a, b) = (self.saved(), rhs.saved());
        Self::emit("matmul", vec![m, n], out, tape, |_| Rule::Matmul { a, b })
    }

    pub fn transpose(&self) -> Result<Tensor<F>> {
        self.require_matrix("transpose")?;
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        let tape = Self::joint_tape("transpose", &[self])?;
        let x = self.node();
        Self::emit("transpose", vec![n, m], out, tape, |_| Rule::Transpose {
            x,
            rows: m,
            cols: n,
        })
    }

    // ── Elementwise ─────────────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.same_shape("add", rhs)?;
        let out: Vec<F> = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| *a + *b).collect();
        let tape = Self::joint_tape("add", &[self, rhs])?;
        let (a, b) = (self.node(), rhs.node());
        Self::emit("add", self.shape.clone(), out, tape, |_| Rule::Add { a, b })
    }

    pub fn sub(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.same_shape("sub", rhs)?;
        let out: Vec<F> = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| *a - *b).collect();
        let tape = Self::joint_tape("sub", &[self, rhs])?;
        let (a, b) = (self.node(), rhs.node());
        Self::emit("sub", self.shape.clone(), out, tape, |_| Rule::Sub { a, b })
    }

    pub fn mul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.same_shape("mul", rhs)?;
        let out: Vec<F> = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| *a * *b).collect();
        let tape = Self::joint_tape("mul", &[self, rhs])?;
        let (a, b) = (self.saved(), rhs.saved());
        Self::emit("mul", self.shape.clone(), out, tape, |_| Rule::Mul { a, b })
    }

    pub fn div(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        self.same_shape("div", rhs)?;
        let out: Vec<F> = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| *a / *b).collect();
        let tape = Self::joint_tape("div", &[self, rhs])?;
        let (a, b) = (self.saved(), rhs.saved());
        Self::emit("div", self.shape.clone(), out, tape, |_| Rule::Div { a, b })
    }

    pub fn scale(&self, factor: F) -> Result<Tensor<F>> {
        let out: Vec<F> = self.data.iter().map(|v| *v * factor).collect();
        let tape = Self::joint_tape("scale", &[self])?;
        let x = self.node();
        Self::emit("scale", self.shape.clone(), out, tape, |_| Rule::Scale { x, factor })
    }

    pub fn add_scalar(&self, value: F) -> Result<Tensor<F>> {
        let out: Vec<F> = self.data.iter().map(|v| *v + value).collect();
        let tape = Self::joint_tape("add_scalar", &[self])?;
        let x = self.node();
        Self::emit("add_scalar", self.shape.clone(), out, tape, |_| Rule::AddScalar { x })
    }

    pub fn neg(&self) -> Result<Tensor<F>> {
        let out: Vec<F> = self.data.iter().map(|v| -*v).collect();
        let tape = Self::joint_tape("neg", &[self])?;
        let x = self.node();
        Self::emit("neg", self.shape.clone(), out, tape, |_| Rule::Neg { x })
    }

    pub fn relu(&self) -> Result<Tensor<F>> {
        let out: Vec<F> = self.data.iter().map(|v| v.max(F::zero())).collect();
        let tape = Self::joint_tape("relu", &[self])?;
        let x = self.saved();
        Self::emit("relu", self.shape.clone(), out, tape, |_| Rule::Relu { x })
    }

    pub fn sigmoid(&self) -> Result<Tensor<F>> {
        let out: Vec<F> = self
            .data
            .iter()
            .map(|v| F::one() / (F::one() + (-*v).exp()))
            .collect();
        let tape = Self::joint_tape("sigmoid", &[self])?;
        let x = self.node();
        Self::emit("sigmoid", self.shape.clone(), out, tape, |y| Rule::Sigmoid {
            x,
            y: Rc::clone(y),
        })
    }

    /// Natural log. Non-positive inputs surface as a non-finite error.
    pub fn ln(&self) -> Result<Tensor<F>> {
        let out: Vec<F> = self.data.iter().map(|v| v.ln()).collect();
        let tape = Self::joint_tape("ln", &[self])?;
        let x = self.saved();
        Self::emit("ln", self.shape.clone(), out, tape, |_| Rule::Ln { x })
    }

    /// Elementwise power with a constant exponent.
    pub fn powf(&self, exponent: F) -> Result<Tensor<F>> {
        let out: Vec<F> = self.data.iter().map(|v| v.powf(exponent)).collect();
        let tape = Self::joint_tape("powf", &[self])?;
        let x = self.saved();
        Self::emit("powf", self.shape.clone(), out, tape, |_| Rule::PowConst { x, exponent })
    }

    pub fn clamp_min(&self, min: F) -> Result<Tensor<F>> {
        let out: Vec<F> = self.data.iter().map(|v| v.max(min)).collect();
        let tape = Self::joint_tape("clamp_min", &[self])?;
        let x = self.saved();
        Self::emit("clamp_min", self.shape.clone(), out, tape, |_| Rule::ClampMin { x, min })
    }

    /// Clamp to `[0, 1]`. Mask-path helper with no backward rule: the result
    /// is a fresh untracked constant.
    pub fn clamp01(&self) -> Tensor<F> {
        let out: Vec<F> = self
            .data
            .iter()
            .map(|v| v.max(F::zero()).min(F::one()))
            .collect();
        Tensor {
            shape: self.shape.clone(),
            data: out.into(),
            track: None,
            requires_grad: false,
        }
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&self) -> Result<Tensor<F>> {
        self.require_matrix("softmax_rows")?;
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); m * n];
        for r in 0..m {
            let row = &self.data[r * n..(r + 1) * n];
            let mut mx = row[0];
            for &v in row.iter().skip(1) {
                if v > mx {
                    mx = v;
                }
            }
            let orow = &mut out[r * n..(r + 1) * n];
            let mut sum = F::zero();
            for c in 0..n {
                let e = (row[c] - mx).exp();
                orow[c] = e;
                sum += e;
            }
            for c in 0..n {
                orow[c] = orow[c] / sum;
            }
        }
        let tape = Self::joint_tape("softmax_rows", &[self])?;
        let x = self.node();
        Self::emit("softmax_rows", vec![m, n], out, tape, |y| Rule::SoftmaxRows {
            x,
            y: Rc::clone(y),
            rows: m,
            cols: n,
        })
    }

    /// Concatenate matrices along the last (column) axis.
    pub fn concat_cols(parts: &[&Tensor<F>]) -> Result<Tensor<F>> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "concat_cols",
                lhs: vec![],
                rhs: vec![],
            });
        }
        for p in parts {
            p.require_matrix("concat_cols")?;
        }
        let rows = parts[0].rows();
        for p in parts.iter().skip(1) {
            if p.rows() != rows {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = vec![F::zero(); rows * total];
        for r in 0..rows {
            let mut offset = 0usize;
            for p in parts {
                let w = p.cols();
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&p.data[r * w..(r + 1) * w]);
                offset += w;
            }
        }
        let refs: Vec<&Tensor<F>> = parts.to_vec();
        let tape = Self::joint_tape("concat_cols", &refs)?;
        let meta: Vec<(Option<NodeId>, usize)> = parts.iter().map(|p| (p.node(), p.cols())).collect();
        Self::emit("concat_cols", vec![rows, total], out, tape, |_| Rule::ConcatCols {
            parts: meta,
            rows,
        })
    }

    // ── Reductions ──────────────────────────────────────────────────

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&self) -> Result<Tensor<F>> {
        let len = self.numel();
        let mut sum = F::zero();
        for &v in self.data.iter() {
            sum += v;
        }
        let out = vec![sum / F::of_f64(len as f64)];
        let tape = Self::joint_tape("mean", &[self])?;
        let x = self.node();
        Self::emit("mean", vec![1], out, tape, |_| Rule::Mean { x, len })
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Result<Tensor<F>> {
        let len = self.numel();
        let mut sum = F::zero();
        for &v in self.data.iter() {
            sum += v;
        }
        let tape = Self::joint_tape("sum", &[self])?;
        let x = self.node();
        Self::emit("sum", vec![1], vec![sum], tape, |_| Rule::Sum { x, len })
    }

    /// Column sums of a matrix, as a `1×n` tensor.
    pub fn sum_cols(&self) -> Result<Tensor<F>> {
        self.require_matrix("sum_cols")?;
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); n];
        for r in 0..m {
            for c in 0..n {
                out[c] += self.data[r * n + c];
            }
        }
        let tape = Self::joint_tape("sum_cols", &[self])?;
        let x = self.node();
        Self::emit("sum_cols", vec![1, n], out, tape, |_| Rule::SumCols { x, rows: m, cols: n })
    }

    /// Repeat a `1×n` row to an `m×n` matrix.
    pub fn broadcast_rows(&self, rows: usize) -> Result<Tensor<F>> {
        self.require_matrix("broadcast_rows")?;
        if self.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                lhs: self.shape.clone(),
                rhs: vec![1, self.cols()],
            });
        }
        let n = self.cols();
        let mut out = vec![F::zero(); rows * n];
        for r in 0..rows {
            out[r * n..(r + 1) * n].copy_from_slice(&self.data);
        }
        let tape = Self::joint_tape("broadcast_rows", &[self])?;
        let x = self.node();
        Self::emit("broadcast_rows", vec![rows, n], out, tape, |_| Rule::BroadcastRows {
            x,
            rows,
            cols: n,
        })
    }

    // ── Structured data movement ────────────────────────────────────

    /// Select rows by index (duplicates allowed).
    pub fn take_rows(&self, indices: &[usize]) -> Result<Tensor<F>> {
        self.require_matrix("take_rows")?;
        let (m, n) = (self.rows(), self.cols());
        for &i in indices {
            if i >= m {
                return Err(Error::ShapeMismatch {
                    op: "take_rows",
                    lhs: self.shape.clone(),
                    rhs: vec![i],
                });
            }
        }
        let mut out = vec![F::zero(); indices.len() * n];
        for (r, &src) in indices.iter().enumerate() {
            out[r * n..(r + 1) * n].copy_from_slice(&self.data[src * n..(src + 1) * n]);
        }
        let tape = Self::joint_tape("take_rows", &[self])?;
        let x = self.node();
        let idx: Rc<[usize]> = indices.to_vec().into();
        Self::emit("take_rows", vec![indices.len(), n], out, tape, |_| Rule::TakeRows {
            x,
            indices: idx,
            src_rows: m,
            cols: n,
        })
    }

    /// Per-row column pick: `out[r] = self[r, cols_idx[r]]`, as an `m×1` tensor.
    pub fn take_per_row(&self, cols_idx: &[usize]) -> Result<Tensor<F>> {
        self.require_matrix("take_per_row")?;
        let (m, n) = (self.rows(), self.cols());
        if cols_idx.len() != m {
            return Err(Error::ShapeMismatch {
                op: "take_per_row",
                lhs: self.shape.clone(),
                rhs: vec![cols_idx.len()],
            });
        }
        let mut out = vec![F::zero(); m];
        for (r, &c) in cols_idx.iter().enumerate() {
            if c >= n {
                return Err(Error::ShapeMismatch {
                    op: "take_per_row",
                    lhs: self.shape.clone(),
                    rhs: vec![c],
                });
            }
            out[r] = self.data[r * n + c];
        }
        let tape = Self::joint_tape("take_per_row", &[self])?;
        let x = self.node();
        let idx: Rc<[usize]> = cols_idx.to_vec().into();
        Self::emit("take_per_row", vec![m, 1], out, tape, |_| Rule::TakePerRow {
            x,
            cols_idx: idx,
            src_cols: n,
        })
    }

    /// Scale each row by a constant weight (weights are not differentiated).
    pub fn scale_rows(&self, weights: &[F]) -> Result<Tensor<F>> {
        self.require_matrix("scale_rows")?;
        let (m, n) = (self.rows(), self.cols());
        if weights.len() != m {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: self.shape.clone(),
                rhs: vec![weights.len()],
            });
        }
        let mut out = vec![F::zero(); m * n];
        for (r, &w) in weights.iter().enumerate() {
            let src = &self.data[r * n..(r + 1) * n];
            let dst = &mut out[r * n..(r + 1) * n];
            for c in 0..n {
                dst[c] = src[c] * w;
            }
        }
        let tape = Self::joint_tape("scale_rows", &[self])?;
        let x = self.node();
        let w: Rc<[F]> = weights.to_vec().into();
        Self::emit("scale_rows", vec![m, n], out, tape, |_| Rule::ScaleRows {
            x,
            weights: w,
            cols: n,
        })
    }

    /// Element gather: `out[i] = self.data[map[i]]`, with `-1` reading zero.
    /// The index map is a fixed (non-differentiated) layout; used for
    /// padded patch extraction.
    pub fn gather_elems(&self, map: &[i64], out_shape: &[usize]) -> Result<Tensor<F>> {
        check_shape("gather_elems", out_shape, map.len())?;
        let src_len = self.numel();
        let mut out = vec![F::zero(); map.len()];
        for (i, &src) in map.iter().enumerate() {
            if src >= 0 {
                let s = src as usize;
                if s >= src_len {
                    return Err(Error::ShapeMismatch {
                        op: "gather_elems",
                        lhs: self.shape.clone(),
                        rhs: vec![s],
                    });
                }
                out[i] = self.data[s];
            }
        }
        let tape = Self::joint_tape("gather_elems", &[self])?;
        let x = self.node();
        let map: Rc<[i64]> = map.to_vec().into();
        Self::emit("gather_elems", out_shape.to_vec(), out, tape, |_| Rule::GatherElems {
            x,
            map,
            src_len,
        })
    }

    /// Weighted row mixing: `out[r] = Σ w · self[src]` per table entry.
    /// The table is a fixed layout (bilinear resampling weights).
    pub fn mix_rows(&self, table: &[RowMix<F>]) -> Result<Tensor<F>> {
        self.require_matrix("mix_rows")?;
        let (m, n) = (self.rows(), self.cols());
        let mut out = vec![F::zero(); table.len() * n];
        for (r, mix) in table.iter().enumerate() {
            let dst = &mut out[r * n..(r + 1) * n];
            for &(src, w) in &mix.sources {
                if src >= m {
                    return Err(Error::ShapeMismatch {
                        op: "mix_rows",
                        lhs: self.shape.clone(),
                        rhs: vec![src],
                    });
                }
                let srow = &self.data[src * n..(src + 1) * n];
                for c in 0..n {
                    dst[c] += w * srow[c];
                }
            }
        }
        let tape = Self::joint_tape("mix_rows", &[self])?;
        let x = self.node();
        let table: Rc<[RowMix<F>]> = table.to_vec().into();
        Self::emit("mix_rows", vec![table.len(), n], out, tape, |_| Rule::MixRows {
            x,
            table,
            src_rows: m,
            cols: n,
        })
    }

    /// Reinterpret the value under a new shape with the same element count.
    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor<F>> {
        check_shape("reshape", new_shape, self.numel())?;
        let tape = Self::joint_tape("reshape", &[self])?;
        let x = self.node();
        Self::emit("reshape", new_shape.to_vec(), self.data.to_vec(), tape, |_| Rule::Reshape { x })
    }
}
