//! Reverse-mode tape over dense matrices.
//!
//! Ops are recorded in evaluation order; [`Tape::backward`] walks them in
//! reverse and accumulates gradients. The model records the same sequence of
//! ops on every pass, so the tape is effectively a fixed program replayed
//! with new parameter values.
//!
//! Every reduction runs in a fixed sequential order. Large matrix products
//! may split their *output rows* across threads, which leaves each
//! accumulated value bit-identical to the single-threaded result.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which entries a softmax normalizes together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Each row sums to one.
    Row,
    /// Each column sums to one.
    Col,
}

/// A user-supplied op with its own backward rule.
pub trait CustomOp: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    /// Gradient with respect to each input, given the upstream gradient.
    fn backward(&self, inputs: &[&Tensor], output: &Tensor, upstream: &Tensor) -> Vec<Tensor>;
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    Exp(Var),
    Softmax(Var, Axis),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    RowSum(Var),
    RowDot(Var, Var),
    GatherRows(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    MeanRows(Var, Option<Arc<[usize]>>),
    Sum(Var),
    Select(Var, usize, usize),
    Dropout(Var, Arc<[f64]>),
    BceWithLogits(Var, Arc<Tensor>),
    Custom(Vec<Var>, Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Products with at least this many multiply-adds go parallel.
const PAR_THRESHOLD: usize = 1 << 16;

pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<(ParamId, Var)>,
    parallel: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_into(a: &Tensor, b: &Tensor, out: &mut Tensor, parallel: bool) {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let a_data = a.data();
    let b_data = b.data();
    let kernel = |(i, out_row): (usize, &mut [f64])| {
        let a_row = &a_data[i * k..(i + 1) * k];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b_data[kk * m..(kk + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m == 0 {
        return;
    }
    if parallel && n * k * m >= PAR_THRESHOLD && n > 1 {
        out.data_mut().par_chunks_mut(m).enumerate().for_each(kernel);
    } else {
        out.data_mut().chunks_mut(m).enumerate().for_each(kernel);
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    sigmoid(x)
}

fn softmax_slice(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Per-row binary cross-entropy summed over columns, in the stable form
/// `max(z, 0) - z y + ln(1 + exp(-|z|))`.
pub(crate) fn bce_row(z: &[f64], y: &[f64]) -> f64 {
    z.iter()
        .zip(y)
        .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
        .sum()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            parallel: true,
        }
    }

    /// Single-threaded tape.
    pub fn strict() -> Self {
        Tape {
            parallel: false,
            ..Tape::new()
        }
    }

    pub fn set_parallel(&mut self, parallel: bool) {
        self.parallel = parallel;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf not tied to a parameter store.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Record parameter `id` of `store` as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.params.push((id, v));
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::dim(
                "matmul",
                format!(
                    "{}x{} times {}x{}",
                    ta.rows(),
                    ta.cols(),
                    tb.rows(),
                    tb.cols()
                ),
            ));
        }
        let mut out = Tensor::zeros(ta.rows(), tb.cols());
        matmul_into(ta, tb, &mut out, self.parallel);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                op,
                format!("shapes {:?} and {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_vec(ta.rows(), ta.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    /// `x` (n x m) plus row vector `b` (1 x m) on every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Error::dim(
                "add_row",
                format!("{:?} plus {:?}", tx.shape(), tb.shape()),
            ));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            for (o, &bv) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let ng = self.ng(x) || self.ng(b);
        Ok(self.push(out, Op::AddRow(x, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Row `r` of `x` scaled by `c[r]`, for a column `c` (n x 1).
    pub fn mul_col(&mut self, x: Var, c: Var) -> Result<Var> {
        let (tx, tc) = (self.value(x), self.value(c));
        if tc.cols() != 1 || tc.rows() != tx.rows() {
            return Err(Error::dim(
                "mul_col",
                format!("{:?} scaled by {:?}", tx.shape(), tc.shape()),
            ));
        }
        let mut out = tx.clone();
        for r in 0..out.rows() {
            let s = tc.data()[r];
            out.row_mut(r).iter_mut().for_each(|o| *o *= s);
        }
        let ng = self.ng(x) || self.ng(c);
        Ok(self.push(out, Op::MulCol(x, c), ng))
    }

    /// `x` times the 1 x 1 value `s`.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::dim(
                "mul_scalar",
                format!("scale has shape {:?}", self.shape(s)),
            ));
        }
        let k = self.value(s).item();
        let out = self.value(x).map(|v| v * k);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(out, Op::MulScalar(x, s), ng))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let out = self.value(x).map(|v| v * k);
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, k), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(out, Op::Tanh(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(x);
        self.push(out, Op::LeakyRelu(x, slope), ng)
    }

    /// ELU with unit scale: `x` for `x > 0`, `exp(x) - 1` otherwise.
    pub fn elu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { v.exp_m1() });
        let ng = self.ng(x);
        self.push(out, Op::Elu(x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        let ng = self.ng(x);
        self.push(out, Op::Exp(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: Axis) -> Var {
        let tx = self.value(x);
        let out = match axis {
            Axis::Row => {
                let mut out = Tensor::zeros(tx.rows(), tx.cols());
                for r in 0..tx.rows() {
                    softmax_slice(tx.row(r), out.row_mut(r));
                }
                out
            }
            Axis::Col => {
                let t = tx.transpose();
                let mut out = Tensor::zeros(t.rows(), t.cols());
                for r in 0..t.rows() {
                    softmax_slice(t.row(r), out.row_mut(r));
                }
                out.transpose()
            }
        };
        let ng = self.ng(x);
        self.push(out, Op::Softmax(x, axis), ng)
    }

    /// Side-by-side concatenation; all parts share a row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = match parts.first() {
            Some(&p) => self.shape(p).0,
            None => return Err(Error::dim("concat_cols", "no inputs")),
        };
        if parts.iter().any(|&p| self.shape(p).0 != rows) {
            return Err(Error::dim("concat_cols", "row counts differ"));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacked concatenation; all parts share a column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = match parts.first() {
            Some(&p) => self.shape(p).1,
            None => return Err(Error::dim("concat_rows", "no inputs")),
        };
        if parts.iter().any(|&p| self.shape(p).1 != cols) {
            return Err(Error::dim("concat_rows", "column counts differ"));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rows = parts.iter().map(|&p| self.shape(p).0).sum();
        let out = Tensor::from_vec(rows, cols, data)?;
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `start..start + len`.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of {}", start + len, tx.cols()),
            ));
        }
        let mut out = Tensor::zeros(tx.rows(), len);
        for r in 0..tx.rows() {
            out.row_mut(r).copy_from_slice(&tx.row(r)[start..start + len]);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceCols(x, start), ng))
    }

    /// Rows `start..start + len`.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.rows() {
            return Err(Error::dim(
                "slice_rows",
                format!("rows {start}..{} of {}", start + len, tx.rows()),
            ));
        }
        let c = tx.cols();
        let out = Tensor::from_vec(len, c, tx.data()[start * c..(start + len) * c].to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::SliceRows(x, start), ng))
    }

    /// Sum of each row, as an n x 1 column.
    pub fn row_sum(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::column((0..tx.rows()).map(|r| tx.row(r).iter().sum()).collect());
        let ng = self.ng(x);
        self.push(out, Op::RowSum(x), ng)
    }

    /// Row-wise inner products of two equally shaped matrices (n x 1).
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("row_dot", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let out = Tensor::column(
            (0..ta.rows())
                .map(|r| ta.row(r).iter().zip(tb.row(r)).map(|(x, y)| x * y).sum())
                .collect(),
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::RowDot(a, b), ng))
    }

    pub fn gather_rows(&mut self, x: Var, indices: Arc<[usize]>) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= tx.rows()) {
            return Err(Error::dim(
                "gather_rows",
                format!("row {bad} of {}", tx.rows()),
            ));
        }
        let out = tx.gather_rows(&indices);
        let ng = self.ng(x);
        Ok(self.push(out, Op::GatherRows(x, indices), ng))
    }

    /// Softmax of a column within groups: entries sharing `segments[r]` are
    /// normalized together.
    pub fn segment_softmax(&mut self, x: Var, segments: Arc<[usize]>) -> Result<Var> {
        let tx = self.value(x);
        if tx.cols() != 1 || tx.rows() != segments.len() {
            return Err(Error::dim(
                "segment_softmax",
                format!("{:?} with {} segment ids", tx.shape(), segments.len()),
            ));
        }
        let n_seg = segments.iter().max().map_or(0, |m| m + 1);
        let mut max = vec![f64::NEG_INFINITY; n_seg];
        for (&s, &v) in segments.iter().zip(tx.data()) {
            max[s] = max[s].max(v);
        }
        let mut total = vec![0.0; n_seg];
        let mut out: Vec<f64> = segments
            .iter()
            .zip(tx.data())
            .map(|(&s, &v)| {
                let e = (v - max[s]).exp();
                total[s] += e;
                e
            })
            .collect();
        for (o, &s) in out.iter_mut().zip(segments.iter()) {
            *o /= total[s];
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::column(out), Op::SegmentSoftmax(x, segments), ng))
    }

    /// Rows of `x` summed by group: output row `s` is the sum of every row
    /// `r` with `segments[r] == s`. Groups with no rows give zero rows.
    pub fn segment_sum(&mut self, x: Var, segments: Arc<[usize]>, n_segments: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.rows() != segments.len() {
            return Err(Error::dim(
                "segment_sum",
                format!("{} rows with {} segment ids", tx.rows(), segments.len()),
            ));
        }
        if let Some(&bad) = segments.iter().find(|&&s| s >= n_segments) {
            return Err(Error::dim(
                "segment_sum",
                format!("segment {bad} of {n_segments}"),
            ));
        }
        let mut out = Tensor::zeros(n_segments, tx.cols());
        for (r, &s) in segments.iter().enumerate() {
            let src = tx.row(r);
            for (o, &v) in out.row_mut(s).iter_mut().zip(src) {
                *o += v;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::SegmentSum(x, segments), ng))
    }

    /// Mean of the selected rows (all rows when `rows` is `None`), as 1 x m.
    pub fn mean_rows(&mut self, x: Var, rows: Option<Arc<[usize]>>) -> Result<Var> {
        let tx = self.value(x);
        let selected: Vec<usize> = match &rows {
            Some(r) => r.to_vec(),
            None => (0..tx.rows()).collect(),
        };
        if selected.is_empty() {
            return Err(Error::dim("mean_rows", "no rows selected"));
        }
        if let Some(&bad) = selected.iter().find(|&&i| i >= tx.rows()) {
            return Err(Error::dim("mean_rows", format!("row {bad} of {}", tx.rows())));
        }
        let mut out = Tensor::zeros(1, tx.cols());
        for &r in &selected {
            for (o, &v) in out.row_mut(0).iter_mut().zip(tx.row(r)) {
                *o += v;
            }
        }
        let n = selected.len() as f64;
        out.data_mut().iter_mut().for_each(|o| *o /= n);
        let ng = self.ng(x);
        Ok(self.push(out, Op::MeanRows(x, rows), ng))
    }

    /// Sum of every entry (1 x 1).
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(out, Op::Sum(x), ng)
    }

    /// Entry `(r, c)` as a 1 x 1 value.
    pub fn select(&mut self, x: Var, r: usize, c: usize) -> Result<Var> {
        let (rows, cols) = self.shape(x);
        if r >= rows || c >= cols {
            return Err(Error::dim(
                "select",
                format!("entry ({r}, {c}) of {rows}x{cols}"),
            ));
        }
        let out = Tensor::scalar(self.value(x).get(r, c));
        let ng = self.ng(x);
        Ok(self.push(out, Op::Select(x, r, c), ng))
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout rate {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).len();
        let mask: Arc<[f64]> = (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(mask.iter()).map(|(v, m)| v * m).collect();
        let out = Tensor::from_vec(tx.rows(), tx.cols(), data)?;
        let ng = self.ng(x);
        Ok(self.push(out, Op::Dropout(x, mask), ng))
    }

    /// Per-row binary cross-entropy with logits, summed over columns (n x 1).
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Tensor>) -> Result<Var> {
        let tz = self.value(logits);
        if tz.shape() != targets.shape() {
            return Err(Error::dim(
                "bce_with_logits",
                format!("logits {:?}, targets {:?}", tz.shape(), targets.shape()),
            ));
        }
        let out = Tensor::column(
            (0..tz.rows())
                .map(|r| bce_row(tz.row(r), targets.row(r)))
                .collect(),
        );
        let ng = self.ng(logits);
        Ok(self.push(out, Op::BceWithLogits(logits, targets), ng))
    }

    pub fn custom(&mut self, inputs: &[Var], op: Box<dyn CustomOp>) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = op.forward(&values)?;
        let ng = inputs.iter().any(|&v| self.ng(v));
        Ok(self.push(out, Op::Custom(inputs.to_vec(), op), ng))
    }

    /// Gradients of the 1 x 1 value `output` with respect to every recorded
    /// value that needs one.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.shape(output) != (1, 1) {
            return Err(Error::dim(
                "backward",
                format!("output has shape {:?}", self.shape(output)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, delta: Tensor| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        let y = &node.value;
        let elementwise = |f: &dyn Fn(usize) -> f64| -> Tensor {
            let data = g.data().iter().enumerate().map(|(i, &gi)| gi * f(i)).collect();
            Tensor::from_vec(g.rows(), g.cols(), data).expect("shape")
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    let mut da = Tensor::zeros(ta.rows(), ta.cols());
                    matmul_into(g, &tb.transpose(), &mut da, self.parallel);
                    acc(*a, da);
                }
                if self.ng(*b) {
                    let mut db = Tensor::zeros(tb.rows(), tb.cols());
                    matmul_into(&ta.transpose(), g, &mut db, self.parallel);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone());
                if self.ng(*b) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &v) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(*b, db);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, elementwise(&|i| tb.data()[i]));
                acc(*b, elementwise(&|i| ta.data()[i]));
            }
            Op::MulCol(x, c) => {
                let (tx, tc) = (self.value(*x), self.value(*c));
                if self.ng(*x) {
                    let mut dx = g.clone();
                    for r in 0..dx.rows() {
                        let s = tc.data()[r];
                        dx.row_mut(r).iter_mut().for_each(|o| *o *= s);
                    }
                    acc(*x, dx);
                }
                if self.ng(*c) {
                    let dc = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(tx.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(*c, Tensor::column(dc));
                }
            }
            Op::MulScalar(x, s) => {
                let (tx, ts) = (self.value(*x), self.value(*s));
                let k = ts.item();
                acc(*x, g.map(|v| v * k));
                if self.ng(*s) {
                    let ds = g.data().iter().zip(tx.data()).map(|(a, b)| a * b).sum();
                    acc(*s, Tensor::scalar(ds));
                }
            }
            Op::Scale(x, k) => acc(*x, g.map(|v| v * k)),
            Op::Sigmoid(x) => acc(*x, elementwise(&|i| {
                let s = y.data()[i];
                s * (1.0 - s)
            })),
            Op::Tanh(x) => acc(*x, elementwise(&|i| {
                let t = y.data()[i];
                1.0 - t * t
            })),
            Op::LeakyRelu(x, slope) => {
                let tx = self.value(*x);
                acc(*x, elementwise(&|i| if tx.data()[i] > 0.0 { 1.0 } else { *slope }));
            }
            Op::Elu(x) => {
                let tx = self.value(*x);
                acc(*x, elementwise(&|i| {
                    if tx.data()[i] > 0.0 {
                        1.0
                    } else {
                        y.data()[i] + 1.0
                    }
                }));
            }
            Op::Exp(x) => acc(*x, elementwise(&|i| y.data()[i])),
            Op::Softmax(x, axis) => {
                let back = |yv: &Tensor, gv: &Tensor| {
                    let mut dx = Tensor::zeros(yv.rows(), yv.cols());
                    for r in 0..yv.rows() {
                        let dot: f64 = yv.row(r).iter().zip(gv.row(r)).map(|(a, b)| a * b).sum();
                        for ((o, &yy), &gg) in dx.row_mut(r).iter_mut().zip(yv.row(r)).zip(gv.row(r)) {
                            *o = yy * (gg - dot);
                        }
                    }
                    dx
                };
                let dx = match axis {
                    Axis::Row => back(y, g),
                    Axis::Col => back(&y.transpose(), &g.transpose()).transpose(),
                };
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.ng(p) {
                        let mut dp = Tensor::zeros(rows, cols);
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(p, dp);
                    }
                    off += cols;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (rows, cols) = self.shape(p);
                    if self.ng(p) {
                        let slice = g.data()[off * cols..(off + rows) * cols].to_vec();
                        acc(p, Tensor::from_vec(rows, cols, slice).expect("shape"));
                    }
                    off += rows;
                }
            }
            Op::SliceCols(x, start) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    dx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*x, dx);
            }
            Op::SliceRows(x, start) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Tensor::zeros(rows, cols);
                dx.data_mut()[*start * cols..*start * cols + g.len()].copy_from_slice(g.data());
                acc(*x, dx);
            }
            Op::RowSum(x) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Tensor::zeros(rows, cols);
                for r in 0..rows {
                    let gv = g.data()[r];
                    dx.row_mut(r).iter_mut().for_each(|o| *o = gv);
                }
                acc(*x, dx);
            }
            Op::RowDot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let scaled = |t: &Tensor| {
                    let mut d = t.clone();
                    for r in 0..d.rows() {
                        let gv = g.data()[r];
                        d.row_mut(r).iter_mut().for_each(|o| *o *= gv);
                    }
                    d
                };
                if self.ng(*a) {
                    acc(*a, scaled(tb));
                }
                if self.ng(*b) {
                    acc(*b, scaled(ta));
                }
            }
            Op::GatherRows(x, idx) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Tensor::zeros(rows, cols);
                for (r, &i) in idx.iter().enumerate() {
                    for (o, &v) in dx.row_mut(i).iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                acc(*x, dx);
            }
            Op::SegmentSoftmax(x, seg) => {
                let n_seg = seg.iter().max().map_or(0, |m| m + 1);
                let mut dot = vec![0.0; n_seg];
                for ((&s, &yy), &gg) in seg.iter().zip(y.data()).zip(g.data()) {
                    dot[s] += yy * gg;
                }
                let dx = seg
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&s, &yy), &gg)| yy * (gg - dot[s]))
                    .collect();
                acc(*x, Tensor::column(dx));
            }
            Op::SegmentSum(x, seg) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Tensor::zeros(rows, cols);
                for (r, &s) in seg.iter().enumerate() {
                    dx.row_mut(r).copy_from_slice(g.row(s));
                }
                acc(*x, dx);
            }
            Op::MeanRows(x, rows) => {
                let (n_rows, cols) = self.shape(*x);
                let selected: Vec<usize> = match rows {
                    Some(r) => r.to_vec(),
                    None => (0..n_rows).collect(),
                };
                let n = selected.len() as f64;
                let mut dx = Tensor::zeros(n_rows, cols);
                for &r in &selected {
                    for (o, &v) in dx.row_mut(r).iter_mut().zip(g.row(0)) {
                        *o += v / n;
                    }
                }
                acc(*x, dx);
            }
            Op::Sum(x) => {
                let (rows, cols) = self.shape(*x);
                acc(*x, Tensor::full(rows, cols, g.item()));
            }
            Op::Select(x, r, c) => {
                let (rows, cols) = self.shape(*x);
                let mut dx = Tensor::zeros(rows, cols);
                dx.set(*r, *c, g.item());
                acc(*x, dx);
            }
            Op::Dropout(x, mask) => acc(*x, elementwise(&|i| mask[i])),
            Op::BceWithLogits(z, targets) => {
                let tz = self.value(*z);
                let mut dz = Tensor::zeros(tz.rows(), tz.cols());
                for r in 0..tz.rows() {
                    let gv = g.data()[r];
                    for ((o, &zz), &yy) in dz.row_mut(r).iter_mut().zip(tz.row(r)).zip(targets.row(r)) {
                        *o = gv * (sigmoid(zz) - yy);
                    }
                }
                acc(*z, dz);
            }
            Op::Custom(inputs, op) => {
                let values: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let deltas = op.backward(&values, y, g);
                for (&v, d) in inputs.iter().zip(deltas) {
                    acc(v, d);
                }
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// One gradient per parameter of `store`, zeros where a parameter did not
    /// influence the output. Parameters recorded several times are summed.
    pub fn for_params(&self, tape: &Tape, store: &ParamStore) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        for &(id, v) in &tape.params {
            if let Some(g) = self.get(v) {
                out[id.index()].add_assign(g);
            }
        }
        out
    }
}
