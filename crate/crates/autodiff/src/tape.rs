//! Recorded-operation tape for reverse-mode differentiation.
//!
//! Every primitive appends one record holding its input/output node ids plus
//! whatever context the backward rule needs (masks, dilation, edge lists).
//! `backward` seeds the scalar root with 1 and replays the records in reverse,
//! accumulating gradients additively so fan-out is handled for free.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{shape_str, Tensor};

/// Handle to a node on the tape. Cheap to copy; only valid for the tape that
/// produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) u32);

impl Var {
    pub(crate) fn idx(self) -> usize {
        self.0 as usize
    }
}

/// Neighborhood structure shared by the edge-wise attention primitives.
///
/// Edges are grouped by destination node: edges `offsets[i]..offsets[i + 1]`
/// all aggregate into node `i`, and `src[e]` names the neighbor they read
/// from. Every segment must be non-empty (graphs carry self-loops).
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeIndex {
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub offsets: Vec<usize>,
}

impl EdgeIndex {
    pub fn from_neighbor_lists(neighbors: &[Vec<usize>]) -> Self {
        let mut src = Vec::new();
        let mut dst = Vec::new();
        let mut offsets = Vec::with_capacity(neighbors.len() + 1);
        offsets.push(0);
        for (i, nbrs) in neighbors.iter().enumerate() {
            for &j in nbrs {
                dst.push(i);
                src.push(j);
            }
            offsets.push(src.len());
        }
        EdgeIndex { src, dst, offsets }
    }

    pub fn num_nodes(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn segment(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

enum Op {
    Matmul { a: Var, b: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    AddBias { a: Var, bias: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    MulConst { a: Var, c: Tensor, out: Var },
    Scale { a: Var, k: f64, out: Var },
    LeakyRelu { a: Var, slope: f64, out: Var },
    Sigmoid { a: Var, out: Var },
    Tanh { a: Var, out: Var },
    Exp { a: Var, out: Var },
    Ln { a: Var, out: Var },
    Softmax { a: Var, out: Var },
    LogSoftmax { a: Var, out: Var },
    MeanAxis { a: Var, axis: usize, out: Var },
    MeanAll { a: Var, out: Var },
    SumAll { a: Var, out: Var },
    PrefixMeanRows { a: Var, out: Var },
    CausalConv1d { x: Var, kernel: Var, dilation: usize, out: Var },
    Concat { parts: Vec<Var>, axis: usize, out: Var },
    RowSelect { a: Var, row: usize, out: Var },
    GatherRows { a: Var, rows: Vec<usize>, out: Var },
    StackRows { parts: Vec<Var>, out: Var },
    StackCols { parts: Vec<Var>, out: Var },
    WeightedSumRows { items: Vec<Var>, weights: Var, out: Var },
    EdgePairSum { s: Var, r: Var, edges: Arc<EdgeIndex>, out: Var },
    SegmentSoftmax { scores: Var, edges: Arc<EdgeIndex>, out: Var },
    SegmentWeightedSum { weights: Var, values: Var, edges: Arc<EdgeIndex>, out: Var },
}

pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Vec<f64>>>,
    live_bytes: usize,
    peak_bytes: usize,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            values: Vec::new(),
            ops: Vec::new(),
            grads: Vec::new(),
            live_bytes: 0,
            peak_bytes: 0,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.values.len()
    }

    pub fn num_ops(&self) -> usize {
        self.ops.len()
    }

    /// High-water mark of value plus gradient storage, in bytes.
    pub fn peak_bytes(&self) -> usize {
        self.peak_bytes
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.idx()]
    }

    /// Gradient of the last `backward` root with respect to `v`, if the node
    /// was reached at all.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.idx()).and_then(|g| g.as_deref())
    }

    /// Like `grad`, but unreached nodes yield zeros of the right length.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match self.grad(v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.values[v.idx()].len()],
        }
    }

    /// Register an input node. Rejects non-finite data.
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        if !t.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push_value(t))
    }

    fn push_value(&mut self, t: Tensor) -> Var {
        self.live_bytes += t.len() * std::mem::size_of::<f64>();
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);
        self.values.push(t);
        Var((self.values.len() - 1) as u32)
    }

    fn push_op(&mut self, value: Tensor, op: impl FnOnce(Var) -> Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let out = self.push_value(value);
        self.ops.push(op(out));
        Ok(out)
    }

    fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: shape_str(lhs.shape()),
            rhs: shape_str(rhs.shape()),
        }
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// `[m, k] x [k, n] -> [m, n]`, or `[m, k] x [k] -> [m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.idx()], &self.values[b.idx()]);
        if ta.rank() != 2 {
            return Err(Self::shape_err("matmul", ta, tb));
        }
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let (kb, n, vec_rhs) = match tb.rank() {
            1 => (tb.shape()[0], 1, true),
            2 => (tb.shape()[0], tb.shape()[1], false),
            _ => return Err(Self::shape_err("matmul", ta, tb)),
        };
        if k != kb {
            return Err(Self::shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        let shape = if vec_rhs { vec![m] } else { vec![m, n] };
        self.push_op(Tensor::new(shape, out)?, |o| Op::Matmul { a, b, out: o }, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.idx()], &self.values[b.idx()]);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("add", ta, tb));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        self.push_op(
            Tensor::new(ta.shape().to_vec(), data)?,
            |o| Op::Add { a, b, out: o },
            "add",
        )
    }

    /// Broadcast-add a `[n]` bias to every row of a `[m, n]` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.idx()], &self.values[bias.idx()]);
        if ta.rank() != 2 || tb.rank() != 1 || ta.shape()[1] != tb.shape()[0] {
            return Err(Self::shape_err("add_bias", ta, tb));
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let mut data = ta.data().to_vec();
        let bd = tb.data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bd[j];
            }
        }
        self.push_op(
            Tensor::new(vec![m, n], data)?,
            |o| Op::AddBias { a, bias, out: o },
            "add_bias",
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.idx()], &self.values[b.idx()]);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("sub", ta, tb));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        self.push_op(
            Tensor::new(ta.shape().to_vec(), data)?,
            |o| Op::Sub { a, b, out: o },
            "sub",
        )
    }

    /// Elementwise product of two same-shape nodes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.values[a.idx()], &self.values[b.idx()]);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("mul", ta, tb));
        }
        let data: Vec<f64> = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        self.push_op(
            Tensor::new(ta.shape().to_vec(), data)?,
            |o| Op::Mul { a, b, out: o },
            "mul",
        )
    }

    /// Elementwise product with a constant tensor that carries no gradient
    /// (dropout masks, latency decay factors).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let ta = &self.values[a.idx()];
        if ta.shape() != c.shape() {
            return Err(Self::shape_err("mul_const", ta, &c));
        }
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "mul_const" });
        }
        let data: Vec<f64> = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        self.push_op(
            Tensor::new(ta.shape().to_vec(), data)?,
            |o| Op::MulConst { a, c, out: o },
            "mul_const",
        )
    }

    /// Inverted dropout with a caller-supplied mask whose entries are either
    /// 0 or the keep-side rescale factor. With an all-ones mask (p = 0) this
    /// is the identity.
    pub fn dropout(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        let keep = mask.data().iter().copied().find(|&v| v != 0.0).unwrap_or(1.0);
        if keep < 1.0 || !mask.data().iter().all(|&v| v == 0.0 || v == keep) {
            return Err(Error::Invalid {
                op: "dropout",
                msg: "mask entries must be 0 or a single rescale factor >= 1".into(),
            });
        }
        self.mul_const(a, mask)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let ta = &self.values[a.idx()];
        let data: Vec<f64> = ta.data().iter().map(|x| x * k).collect();
        self.push_op(
            Tensor::new(ta.shape().to_vec(), data)?,
            |o| Op::Scale { a, k, out: o },
            "scale",
        )
    }

    // ── pointwise nonlinearities ────────────────────────────────────────

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let ta = &self.values[a.idx()];
        let data: Vec<f64> = ta
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        self.push_op(
            Tensor::new(ta.shape().to_vec(), data)?,
            |o| Op::LeakyRelu { a, slope, out: o },
            "leaky_relu",
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.idx()];
        let data: Vec<f64> = ta.data().iter().map(|&x| sigmoid_scalar(x)).collect();
        self.push_op(
            Tensor::new(ta.shape().to_vec(), data)?,
            |o| Op::Sigmoid { a, out: o },
            "sigmoid",
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.idx()];
        let data: Vec<f64> = ta.data().iter().map(|x| x.tanh()).collect();
        self.push_op(
            Tensor::new(ta.shape().to_vec(), data)?,
            |o| Op::Tanh { a, out: o },
            "tanh",
        )
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.idx()];
        let data: Vec<f64> = ta.data().iter().map(|x| x.exp()).collect();
        self.push_op(
            Tensor::new(ta.shape().to_vec(), data)?,
            |o| Op::Exp { a, out: o },
            "exp",
        )
    }

    /// Natural log; non-positive inputs surface as the non-finite hard error.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.idx()];
        let data: Vec<f64> = ta.data().iter().map(|x| x.ln()).collect();
        self.push_op(
            Tensor::new(ta.shape().to_vec(), data)?,
            |o| Op::Ln { a, out: o },
            "ln",
        )
    }

    // ── softmax family ──────────────────────────────────────────────────

    /// Max-subtracted softmax over the last axis (each row of a matrix, or a
    /// whole vector).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.idx()];
        let (rows, cols) = ta.rows_cols();
        if cols == 0 {
            return Err(Error::Invalid {
                op: "softmax",
                msg: "empty rows".into(),
            });
        }
        let mut data = ta.data().to_vec();
        for i in 0..rows {
            softmax_in_place(&mut data[i * cols..(i + 1) * cols]);
        }
        self.push_op(
            Tensor::new(ta.shape().to_vec(), data)?,
            |o| Op::Softmax { a, out: o },
            "softmax",
        )
    }

    /// Log of softmax over the last axis, computed in the stable
    /// `x - max - ln(sum exp(x - max))` form.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.idx()];
        let (rows, cols) = ta.rows_cols();
        if cols == 0 {
            return Err(Error::Invalid {
                op: "log_softmax",
                msg: "empty rows".into(),
            });
        }
        let mut data = ta.data().to_vec();
        for i in 0..rows {
            let row = &mut data[i * cols..(i + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter() {
                sum += (v - max).exp();
            }
            let lse = max + sum.ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push_op(
            Tensor::new(ta.shape().to_vec(), data)?,
            |o| Op::LogSoftmax { a, out: o },
            "log_softmax",
        )
    }

    // ── reductions ──────────────────────────────────────────────────────

    /// Mean over one axis of a `[m, n]` matrix: axis 0 -> `[n]`, axis 1 -> `[m]`.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let ta = &self.values[a.idx()];
        if ta.rank() != 2 || axis > 1 {
            return Err(Error::Invalid {
                op: "mean_axis",
                msg: format!("wants a matrix and axis 0|1, got {} axis {}", shape_str(ta.shape()), axis),
            });
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let data = if axis == 0 {
            let mut out = vec![0.0; n];
            for i in 0..m {
                for j in 0..n {
                    out[j] += ta.data()[i * n + j];
                }
            }
            out.iter_mut().for_each(|v| *v /= m as f64);
            out
        } else {
            let mut out = vec![0.0; m];
            for i in 0..m {
                out[i] = ta.row(i).iter().sum::<f64>() / n as f64;
            }
            out
        };
        let dim = if axis == 0 { n } else { m };
        self.push_op(
            Tensor::new(vec![dim], data)?,
            |o| Op::MeanAxis { a, axis, out: o },
            "mean_axis",
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.idx()];
        let n = ta.len().max(1);
        let v = ta.data().iter().sum::<f64>() / n as f64;
        self.push_op(Tensor::scalar(v), |o| Op::MeanAll { a, out: o }, "mean_all")
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.idx()];
        let v = ta.data().iter().sum::<f64>();
        self.push_op(Tensor::scalar(v), |o| Op::SumAll { a, out: o }, "sum_all")
    }

    /// Causal running mean over the rows of `[t, f]`: row t of the output is
    /// the mean of input rows `0..=t`.
    pub fn prefix_mean(&mut self, a: Var) -> Result<Var> {
        let ta = &self.values[a.idx()];
        if ta.rank() != 2 {
            return Err(Error::Invalid {
                op: "prefix_mean",
                msg: format!("wants a matrix, got {}", shape_str(ta.shape())),
            });
        }
        let (t_len, f) = (ta.shape()[0], ta.shape()[1]);
        let mut acc = vec![0.0; f];
        let mut data = vec![0.0; t_len * f];
        for t in 0..t_len {
            for j in 0..f {
                acc[j] += ta.data()[t * f + j];
                data[t * f + j] = acc[j] / (t + 1) as f64;
            }
        }
        self.push_op(
            Tensor::new(vec![t_len, f], data)?,
            |o| Op::PrefixMeanRows { a, out: o },
            "prefix_mean",
        )
    }

    // ── convolution ─────────────────────────────────────────────────────

    /// Dilated causal 1-D convolution along the rows of `x: [t, f]` with a
    /// `[l, f, c]` kernel. The input is implicitly zero-padded on the left by
    /// `(l - 1) * dilation`, so output row t reads rows
    /// `t, t - dilation, ..., t - (l - 1) * dilation` only.
    pub fn causal_conv1d(&mut self, x: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let (tx, tk) = (&self.values[x.idx()], &self.values[kernel.idx()]);
        if tx.rank() != 2 || tk.rank() != 3 || tx.shape()[1] != tk.shape()[1] {
            return Err(Self::shape_err("causal_conv1d", tx, tk));
        }
        if dilation == 0 {
            return Err(Error::Invalid {
                op: "causal_conv1d",
                msg: "dilation must be >= 1".into(),
            });
        }
        let (t_len, f) = (tx.shape()[0], tx.shape()[1]);
        let (l, _, c) = (tk.shape()[0], tk.shape()[1], tk.shape()[2]);
        let mut out = vec![0.0; t_len * c];
        let (xd, kd) = (tx.data(), tk.data());
        for t in 0..t_len {
            for tap in 0..l {
                // tap l-1 is the current timestep, tap 0 the oldest.
                let back = (l - 1 - tap) * dilation;
                if back > t {
                    continue;
                }
                let xrow = &xd[(t - back) * f..(t - back + 1) * f];
                for (j, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let krow = &kd[(tap * f + j) * c..(tap * f + j + 1) * c];
                    let orow = &mut out[t * c..(t + 1) * c];
                    for ch in 0..c {
                        orow[ch] += xv * krow[ch];
                    }
                }
            }
        }
        self.push_op(
            Tensor::new(vec![t_len, c], out)?,
            |o| Op::CausalConv1d { x, kernel, dilation, out: o },
            "causal_conv1d",
        )
    }

    // ── shape plumbing ──────────────────────────────────────────────────

    /// Concatenate along an existing axis: vectors along axis 0, matrices
    /// along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid {
                op: "concat",
                msg: "no parts".into(),
            });
        }
        let rank = self.values[parts[0].idx()].rank();
        for &p in parts {
            let tp = &self.values[p.idx()];
            if tp.rank() != rank || (rank == 2 && axis > 1) || (rank == 1 && axis != 0) {
                return Err(Error::Invalid {
                    op: "concat",
                    msg: format!("rank/axis mismatch at part {}", shape_str(tp.shape())),
                });
            }
        }
        let (value, shape) = match (rank, axis) {
            (1, 0) => {
                let mut data = Vec::new();
                for &p in parts {
                    data.extend_from_slice(self.values[p.idx()].data());
                }
                let n = data.len();
                (data, vec![n])
            }
            (2, 0) => {
                let cols = self.values[parts[0].idx()].shape()[1];
                let mut rows = 0;
                let mut data = Vec::new();
                for &p in parts {
                    let tp = &self.values[p.idx()];
                    if tp.shape()[1] != cols {
                        return Err(Self::shape_err("concat", &self.values[parts[0].idx()], tp));
                    }
                    rows += tp.shape()[0];
                    data.extend_from_slice(tp.data());
                }
                (data, vec![rows, cols])
            }
            (2, 1) => {
                let rows = self.values[parts[0].idx()].shape()[0];
                let mut cols = 0;
                for &p in parts {
                    let tp = &self.values[p.idx()];
                    if tp.shape()[0] != rows {
                        return Err(Self::shape_err("concat", &self.values[parts[0].idx()], tp));
                    }
                    cols += tp.shape()[1];
                }
                let mut data = vec![0.0; rows * cols];
                let mut col0 = 0;
                for &p in parts {
                    let tp = &self.values[p.idx()];
                    let w = tp.shape()[1];
                    for i in 0..rows {
                        data[i * cols + col0..i * cols + col0 + w].copy_from_slice(tp.row(i));
                    }
                    col0 += w;
                }
                (data, vec![rows, cols])
            }
            _ => {
                return Err(Error::Invalid {
                    op: "concat",
                    msg: format!("unsupported rank {} axis {}", rank, axis),
                })
            }
        };
        let parts = parts.to_vec();
        self.push_op(
            Tensor::new(shape, value)?,
            |o| Op::Concat { parts, axis, out: o },
            "concat",
        )
    }

    /// Copy row `i` of a matrix out as a vector.
    pub fn row(&mut self, a: Var, row: usize) -> Result<Var> {
        let ta = &self.values[a.idx()];
        if ta.rank() != 2 || row >= ta.shape()[0] {
            return Err(Error::Invalid {
                op: "row",
                msg: format!("row {} of {}", row, shape_str(ta.shape())),
            });
        }
        let data = ta.row(row).to_vec();
        self.push_op(
            Tensor::vector(data),
            |o| Op::RowSelect { a, row, out: o },
            "row",
        )
    }

    /// Gather matrix rows by index (repeats allowed): `out[i, :] = a[rows[i], :]`.
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let ta = &self.values[a.idx()];
        if ta.rank() != 2 || rows.iter().any(|&r| r >= ta.shape()[0]) {
            return Err(Error::Invalid {
                op: "gather_rows",
                msg: format!("rows {:?}.. of {}", rows.first(), shape_str(ta.shape())),
            });
        }
        let n = ta.shape()[1];
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            data.extend_from_slice(ta.row(r));
        }
        let rows = rows.to_vec();
        self.push_op(
            Tensor::new(vec![rows.len(), n], data)?,
            |o| Op::GatherRows { a, rows, out: o },
            "gather_rows",
        )
    }

    /// Stack equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid {
                op: "stack_rows",
                msg: "no parts".into(),
            });
        }
        let n = self.values[parts[0].idx()].len();
        let mut data = Vec::with_capacity(parts.len() * n);
        for &p in parts {
            let tp = &self.values[p.idx()];
            if tp.rank() != 1 || tp.len() != n {
                return Err(Self::shape_err("stack_rows", &self.values[parts[0].idx()], tp));
            }
            data.extend_from_slice(tp.data());
        }
        let parts = parts.to_vec();
        self.push_op(
            Tensor::new(vec![parts.len(), n], data)?,
            |o| Op::StackRows { parts, out: o },
            "stack_rows",
        )
    }

    /// Stack equal-length vectors into a matrix, one per column:
    /// `out[i, l] = parts[l][i]`.
    pub fn stack_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Invalid {
                op: "stack_cols",
                msg: "no parts".into(),
            });
        }
        let n = self.values[parts[0].idx()].len();
        let cols = parts.len();
        let mut data = vec![0.0; n * cols];
        for (l, &p) in parts.iter().enumerate() {
            let tp = &self.values[p.idx()];
            if tp.rank() != 1 || tp.len() != n {
                return Err(Self::shape_err("stack_cols", &self.values[parts[0].idx()], tp));
            }
            for (i, &v) in tp.data().iter().enumerate() {
                data[i * cols + l] = v;
            }
        }
        let parts = parts.to_vec();
        self.push_op(
            Tensor::new(vec![n, cols], data)?,
            |o| Op::StackCols { parts, out: o },
            "stack_cols",
        )
    }

    /// Per-row linear combination of a list of `[n, h]` items with
    /// coefficients `weights: [n, len(items)]`:
    /// `out[r, :] = sum_l weights[r, l] * items[l][r, :]`.
    pub fn weighted_sum_rows(&mut self, items: &[Var], weights: Var) -> Result<Var> {
        if items.is_empty() {
            return Err(Error::Invalid {
                op: "weighted_sum_rows",
                msg: "no items".into(),
            });
        }
        let tw = &self.values[weights.idx()];
        let first = &self.values[items[0].idx()];
        if first.rank() != 2 || tw.rank() != 2 {
            return Err(Self::shape_err("weighted_sum_rows", first, tw));
        }
        let (n, h) = (first.shape()[0], first.shape()[1]);
        if tw.shape() != [n, items.len()] {
            return Err(Self::shape_err("weighted_sum_rows", first, tw));
        }
        let mut out = vec![0.0; n * h];
        for (l, &item) in items.iter().enumerate() {
            let ti = &self.values[item.idx()];
            if ti.shape() != [n, h] {
                return Err(Self::shape_err("weighted_sum_rows", first, ti));
            }
            let wd = self.values[weights.idx()].data();
            let id = self.values[item.idx()].data();
            for r in 0..n {
                let w = wd[r * items.len() + l];
                if w == 0.0 {
                    continue;
                }
                let irow = &id[r * h..(r + 1) * h];
                let orow = &mut out[r * h..(r + 1) * h];
                for j in 0..h {
                    orow[j] += w * irow[j];
                }
            }
        }
        let items = items.to_vec();
        self.push_op(
            Tensor::new(vec![n, h], out)?,
            |o| Op::WeightedSumRows { items, weights, out: o },
            "weighted_sum_rows",
        )
    }

    // ── edge-wise attention primitives ──────────────────────────────────

    /// One score per edge: `out[e] = s[dst[e]] + r[src[e]]`.
    pub fn edge_pair_sum(&mut self, s: Var, r: Var, edges: &Arc<EdgeIndex>) -> Result<Var> {
        let (ts, tr) = (&self.values[s.idx()], &self.values[r.idx()]);
        let n = edges.num_nodes();
        if ts.rank() != 1 || tr.rank() != 1 || ts.len() != n || tr.len() != n {
            return Err(Self::shape_err("edge_pair_sum", ts, tr));
        }
        let mut out = Vec::with_capacity(edges.num_edges());
        for e in 0..edges.num_edges() {
            out.push(ts.data()[edges.dst[e]] + tr.data()[edges.src[e]]);
        }
        let edges = Arc::clone(edges);
        self.push_op(
            Tensor::vector(out),
            |o| Op::EdgePairSum { s, r, edges, out: o },
            "edge_pair_sum",
        )
    }

    /// Softmax within each destination segment of the edge list. Empty
    /// segments are rejected: a node must at least see itself.
    pub fn segment_softmax(&mut self, scores: Var, edges: &Arc<EdgeIndex>) -> Result<Var> {
        let ts = &self.values[scores.idx()];
        if ts.rank() != 1 || ts.len() != edges.num_edges() {
            return Err(Error::Invalid {
                op: "segment_softmax",
                msg: format!(
                    "wants [{}] scores, got {}",
                    edges.num_edges(),
                    shape_str(ts.shape())
                ),
            });
        }
        let mut data = ts.data().to_vec();
        for i in 0..edges.num_nodes() {
            let seg = edges.segment(i);
            if seg.is_empty() {
                return Err(Error::Invalid {
                    op: "segment_softmax",
                    msg: format!("node {} has an empty neighborhood", i),
                });
            }
            softmax_in_place(&mut data[seg]);
        }
        let edges = Arc::clone(edges);
        self.push_op(
            Tensor::vector(data),
            |o| Op::SegmentSoftmax { scores, edges, out: o },
            "segment_softmax",
        )
    }

    /// Attention aggregation over edges:
    /// `out[i, :] = sum_{e in seg(i)} weights[e] * values[src[e], :]`.
    pub fn segment_weighted_sum(
        &mut self,
        weights: Var,
        values: Var,
        edges: &Arc<EdgeIndex>,
    ) -> Result<Var> {
        let (tw, tv) = (&self.values[weights.idx()], &self.values[values.idx()]);
        if tw.rank() != 1 || tw.len() != edges.num_edges() || tv.rank() != 2 || tv.shape()[0] != edges.num_nodes() {
            return Err(Self::shape_err("segment_weighted_sum", tw, tv));
        }
        let (n, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for e in edges.segment(i) {
                let w = tw.data()[e];
                if w == 0.0 {
                    continue;
                }
                let vrow = tv.row(edges.src[e]);
                let orow = &mut out[i * d..(i + 1) * d];
                for j in 0..d {
                    orow[j] += w * vrow[j];
                }
            }
        }
        let edges = Arc::clone(edges);
        self.push_op(
            Tensor::new(vec![n, d], out)?,
            |o| Op::SegmentWeightedSum { weights, values, edges, out: o },
            "segment_weighted_sum",
        )
    }

    // ── reverse pass ────────────────────────────────────────────────────

    /// Reverse replay from a scalar root. Gradients from earlier calls are
    /// discarded; fan-out accumulates additively.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rt = &self.values[root.idx()];
        if rt.len() != 1 {
            return Err(Error::NonScalarRoot(
                rt.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", "),
            ));
        }
        self.grads.clear();
        self.grads.resize_with(self.values.len(), || None);
        self.grads[root.idx()] = Some(vec![1.0]);
        self.live_bytes += std::mem::size_of::<f64>();
        self.peak_bytes = self.peak_bytes.max(self.live_bytes);

        for idx in (0..self.ops.len()).rev() {
            self.backward_op(idx)?;
        }
        Ok(())
    }

    fn take_out_grad(&mut self, out: Var) -> Option<Vec<f64>> {
        self.grads[out.idx()].take()
    }

    /// Gradient accumulator for `v`, zero-initialized on first touch. The
    /// returned borrow is tied to `grads` only, so callers may keep reading
    /// `values` while holding it.
    fn acc<'g>(
        grads: &'g mut [Option<Vec<f64>>],
        values: &[Tensor],
        live: &mut usize,
        v: Var,
    ) -> &'g mut [f64] {
        let slot = &mut grads[v.idx()];
        if slot.is_none() {
            let len = values[v.idx()].len();
            *live += len * std::mem::size_of::<f64>();
            *slot = Some(vec![0.0; len]);
        }
        slot.as_mut().unwrap()
    }

    /// Hash of the sign pattern at every kinked-activation input, used by the
    /// finite-difference harness to spot probes that straddle a LeakyReLU
    /// kink. Returns `(hash, exactly_on_kink)`.
    pub fn kink_signature(&self) -> (u64, bool) {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut on_kink = false;
        for op in &self.ops {
            if let Op::LeakyRelu { a, .. } = op {
                for &x in self.values[a.idx()].data() {
                    let sym: u64 = if x > 0.0 {
                        1
                    } else if x < 0.0 {
                        2
                    } else {
                        on_kink = true;
                        3
                    };
                    hash ^= sym;
                    hash = hash.wrapping_mul(0x100000001b3);
                }
            }
        }
        (hash, on_kink)
    }
}

pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Tape {
    fn backward_op(&mut self, idx: usize) -> Result<()> {
        // Records are replayed newest-first; an op whose output never
        // received a gradient is off the path to the root and is skipped.
        let op = &self.ops[idx];
        let out = match op {
            Op::Matmul { out, .. }
            | Op::Add { out, .. }
            | Op::AddBias { out, .. }
            | Op::Sub { out, .. }
            | Op::Mul { out, .. }
            | Op::MulConst { out, .. }
            | Op::Scale { out, .. }
            | Op::LeakyRelu { out, .. }
            | Op::Sigmoid { out, .. }
            | Op::Tanh { out, .. }
            | Op::Exp { out, .. }
            | Op::Ln { out, .. }
            | Op::Softmax { out, .. }
            | Op::LogSoftmax { out, .. }
            | Op::MeanAxis { out, .. }
            | Op::MeanAll { out, .. }
            | Op::SumAll { out, .. }
            | Op::PrefixMeanRows { out, .. }
            | Op::CausalConv1d { out, .. }
            | Op::Concat { out, .. }
            | Op::RowSelect { out, .. }
            | Op::GatherRows { out, .. }
            | Op::StackRows { out, .. }
            | Op::StackCols { out, .. }
            | Op::WeightedSumRows { out, .. }
            | Op::EdgePairSum { out, .. }
            | Op::SegmentSoftmax { out, .. }
            | Op::SegmentWeightedSum { out, .. } => *out,
        };
        let dout = match self.take_out_grad(out) {
            Some(g) => g,
            None => return Ok(()),
        };

        // Work on a raw pointer-free split: ops store ids, values/grads are
        // separate vecs, so the borrows below never alias.
        let Tape {
            values,
            ops,
            grads,
            live_bytes,
            ..
        } = self;
        let op = &ops[idx];

        match op {
            Op::Matmul { a, b, .. } => {
                let (a, b) = (*a, *b);
                let (m, k) = (values[a.idx()].shape()[0], values[a.idx()].shape()[1]);
                let n = if values[b.idx()].rank() == 1 {
                    1
                } else {
                    values[b.idx()].shape()[1]
                };
                {
                    let bd = values[b.idx()].data();
                    let da = Self::acc(grads, values, live_bytes, a);
                    for i in 0..m {
                        let drow = &dout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            let mut s = 0.0;
                            for j in 0..n {
                                s += drow[j] * brow[j];
                            }
                            da[i * k + p] += s;
                        }
                    }
                }
                {
                    let ad = values[a.idx()].data();
                    let db = Self::acc(grads, values, live_bytes, b);
                    for i in 0..m {
                        let drow = &dout[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let brow = &mut db[p * n..(p + 1) * n];
                            for j in 0..n {
                                brow[j] += av * drow[j];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b, .. } => {
                let (a, b) = (*a, *b);
                axpy(Self::acc(grads, values, live_bytes, a), &dout, 1.0);
                axpy(Self::acc(grads, values, live_bytes, b), &dout, 1.0);
            }
            Op::AddBias { a, bias, .. } => {
                let (a, bias) = (*a, *bias);
                let n = values[bias.idx()].len();
                axpy(Self::acc(grads, values, live_bytes, a), &dout, 1.0);
                let db = Self::acc(grads, values, live_bytes, bias);
                for (i, &d) in dout.iter().enumerate() {
                    db[i % n] += d;
                }
            }
            Op::Sub { a, b, .. } => {
                let (a, b) = (*a, *b);
                axpy(Self::acc(grads, values, live_bytes, a), &dout, 1.0);
                axpy(Self::acc(grads, values, live_bytes, b), &dout, -1.0);
            }
            Op::Mul { a, b, .. } => {
                let (a, b) = (*a, *b);
                {
                    let bd = values[b.idx()].data();
                    let da = Self::acc(grads, values, live_bytes, a);
                    for i in 0..dout.len() {
                        da[i] += dout[i] * bd[i];
                    }
                }
                {
                    let ad = values[a.idx()].data();
                    let db = Self::acc(grads, values, live_bytes, b);
                    for i in 0..dout.len() {
                        db[i] += dout[i] * ad[i];
                    }
                }
            }
            Op::MulConst { a, c, .. } => {
                let a = *a;
                let cd = c.data();
                let da = Self::acc(grads, values, live_bytes, a);
                for i in 0..dout.len() {
                    da[i] += dout[i] * cd[i];
                }
            }
            Op::Scale { a, k, .. } => {
                let (a, k) = (*a, *k);
                axpy(Self::acc(grads, values, live_bytes, a), &dout, k);
            }
            Op::LeakyRelu { a, slope, .. } => {
                let (a, slope) = (*a, *slope);
                let xd = values[a.idx()].data();
                let da = Self::acc(grads, values, live_bytes, a);
                for i in 0..dout.len() {
                    da[i] += dout[i] * if xd[i] > 0.0 { 1.0 } else { slope };
                }
            }
            Op::Sigmoid { a, out } => {
                let (a, out) = (*a, *out);
                let od = values[out.idx()].data();
                let da = Self::acc(grads, values, live_bytes, a);
                for i in 0..dout.len() {
                    da[i] += dout[i] * od[i] * (1.0 - od[i]);
                }
            }
            Op::Tanh { a, out } => {
                let (a, out) = (*a, *out);
                let od = values[out.idx()].data();
                let da = Self::acc(grads, values, live_bytes, a);
                for i in 0..dout.len() {
                    da[i] += dout[i] * (1.0 - od[i] * od[i]);
                }
            }
            Op::Exp { a, out } => {
                let (a, out) = (*a, *out);
                let od = values[out.idx()].data();
                let da = Self::acc(grads, values, live_bytes, a);
                for i in 0..dout.len() {
                    da[i] += dout[i] * od[i];
                }
            }
            Op::Ln { a, .. } => {
                let a = *a;
                let xd = values[a.idx()].data();
                let da = Self::acc(grads, values, live_bytes, a);
                for i in 0..dout.len() {
                    da[i] += dout[i] / xd[i];
                }
            }
            Op::Softmax { a, out } => {
                let (a, out) = (*a, *out);
                let od = values[out.idx()].data();
                let (rows, cols) = values[out.idx()].rows_cols();
                let da = Self::acc(grads, values, live_bytes, a);
                for i in 0..rows {
                    let p = &od[i * cols..(i + 1) * cols];
                    let d = &dout[i * cols..(i + 1) * cols];
                    let dot: f64 = p.iter().zip(d).map(|(x, y)| x * y).sum();
                    let row = &mut da[i * cols..(i + 1) * cols];
                    for j in 0..cols {
                        row[j] += p[j] * (d[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { a, out } => {
                let (a, out) = (*a, *out);
                let od = values[out.idx()].data();
                let (rows, cols) = values[out.idx()].rows_cols();
                let da = Self::acc(grads, values, live_bytes, a);
                for i in 0..rows {
                    let lp = &od[i * cols..(i + 1) * cols];
                    let d = &dout[i * cols..(i + 1) * cols];
                    let sum: f64 = d.iter().sum();
                    let row = &mut da[i * cols..(i + 1) * cols];
                    for j in 0..cols {
                        row[j] += d[j] - lp[j].exp() * sum;
                    }
                }
            }
            Op::MeanAxis { a, axis, .. } => {
                let (a, axis) = (*a, *axis);
                let (m, n) = (values[a.idx()].shape()[0], values[a.idx()].shape()[1]);
                let da = Self::acc(grads, values, live_bytes, a);
                if axis == 0 {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += dout[j] / m as f64;
                        }
                    }
                } else {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += dout[i] / n as f64;
                        }
                    }
                }
            }
            Op::MeanAll { a, .. } => {
                let a = *a;
                let len = values[a.idx()].len().max(1);
                let g = dout[0] / len as f64;
                let da = Self::acc(grads, values, live_bytes, a);
                da.iter_mut().for_each(|v| *v += g);
            }
            Op::SumAll { a, .. } => {
                let a = *a;
                let g = dout[0];
                let da = Self::acc(grads, values, live_bytes, a);
                da.iter_mut().for_each(|v| *v += g);
            }
            Op::PrefixMeanRows { a, .. } => {
                let a = *a;
                let (t_len, f) = (values[a.idx()].shape()[0], values[a.idx()].shape()[1]);
                let da = Self::acc(grads, values, live_bytes, a);
                let mut acc = vec![0.0; f];
                for t in (0..t_len).rev() {
                    for j in 0..f {
                        acc[j] += dout[t * f + j] / (t + 1) as f64;
                        da[t * f + j] += acc[j];
                    }
                }
            }
            Op::CausalConv1d { x, kernel, dilation, .. } => {
                let (x, kernel, phi) = (*x, *kernel, *dilation);
                let (t_len, f) = (values[x.idx()].shape()[0], values[x.idx()].shape()[1]);
                let (l, c) = (values[kernel.idx()].shape()[0], values[kernel.idx()].shape()[2]);
                {
                    let kd = values[kernel.idx()].data();
                    let dx = Self::acc(grads, values, live_bytes, x);
                    for t in 0..t_len {
                        let drow = &dout[t * c..(t + 1) * c];
                        for tap in 0..l {
                            let back = (l - 1 - tap) * phi;
                            if back > t {
                                continue;
                            }
                            let xrow = &mut dx[(t - back) * f..(t - back + 1) * f];
                            for j in 0..f {
                                let krow = &kd[(tap * f + j) * c..(tap * f + j + 1) * c];
                                let mut s = 0.0;
                                for ch in 0..c {
                                    s += krow[ch] * drow[ch];
                                }
                                xrow[j] += s;
                            }
                        }
                    }
                }
                {
                    let xd = values[x.idx()].data();
                    let dk = Self::acc(grads, values, live_bytes, kernel);
                    for t in 0..t_len {
                        let drow = &dout[t * c..(t + 1) * c];
                        for tap in 0..l {
                            let back = (l - 1 - tap) * phi;
                            if back > t {
                                continue;
                            }
                            let xrow = &xd[(t - back) * f..(t - back + 1) * f];
                            for (j, &xv) in xrow.iter().enumerate() {
                                if xv == 0.0 {
                                    continue;
                                }
                                let krow = &mut dk[(tap * f + j) * c..(tap * f + j + 1) * c];
                                for ch in 0..c {
                                    krow[ch] += xv * drow[ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { parts, axis, .. } => {
                let parts = parts.clone();
                let axis = *axis;
                let rank = values[parts[0].idx()].rank();
                match (rank, axis) {
                    (1, 0) | (2, 0) => {
                        let mut off = 0;
                        for p in parts {
                            let len = values[p.idx()].len();
                            let dp = Self::acc(grads, values, live_bytes, p);
                            axpy(dp, &dout[off..off + len], 1.0);
                            off += len;
                        }
                    }
                    (2, 1) => {
                        let rows = values[parts[0].idx()].shape()[0];
                        let total: usize = parts.iter().map(|p| values[p.idx()].shape()[1]).sum();
                        let mut col0 = 0;
                        for p in parts {
                            let w = values[p.idx()].shape()[1];
                            let dp = Self::acc(grads, values, live_bytes, p);
                            for i in 0..rows {
                                let src = &dout[i * total + col0..i * total + col0 + w];
                                axpy(&mut dp[i * w..(i + 1) * w], src, 1.0);
                            }
                            col0 += w;
                        }
                    }
                    _ => unreachable!("validated at record time"),
                }
            }
            Op::RowSelect { a, row, .. } => {
                let (a, row) = (*a, *row);
                let n = values[a.idx()].shape()[1];
                let da = Self::acc(grads, values, live_bytes, a);
                axpy(&mut da[row * n..(row + 1) * n], &dout, 1.0);
            }
            Op::GatherRows { a, rows, .. } => {
                let (a, rows) = (*a, rows.clone());
                let n = values[a.idx()].shape()[1];
                let da = Self::acc(grads, values, live_bytes, a);
                for (i, &r) in rows.iter().enumerate() {
                    axpy(&mut da[r * n..(r + 1) * n], &dout[i * n..(i + 1) * n], 1.0);
                }
            }
            Op::StackRows { parts, .. } => {
                let parts = parts.clone();
                let n = values[parts[0].idx()].len();
                for (l, p) in parts.into_iter().enumerate() {
                    let dp = Self::acc(grads, values, live_bytes, p);
                    axpy(dp, &dout[l * n..(l + 1) * n], 1.0);
                }
            }
            Op::StackCols { parts, .. } => {
                let parts = parts.clone();
                let cols = parts.len();
                for (l, p) in parts.into_iter().enumerate() {
                    let dp = Self::acc(grads, values, live_bytes, p);
                    for (i, d) in dp.iter_mut().enumerate() {
                        *d += dout[i * cols + l];
                    }
                }
            }
            Op::WeightedSumRows { items, weights, .. } => {
                let items = items.clone();
                let weights = *weights;
                let (n, h) = (
                    values[items[0].idx()].shape()[0],
                    values[items[0].idx()].shape()[1],
                );
                let ll = items.len();
                for (l, &item) in items.iter().enumerate() {
                    let wd = values[weights.idx()].data();
                    let di = Self::acc(grads, values, live_bytes, item);
                    for r in 0..n {
                        let w = wd[r * ll + l];
                        if w == 0.0 {
                            continue;
                        }
                        axpy(&mut di[r * h..(r + 1) * h], &dout[r * h..(r + 1) * h], w);
                    }
                }
                for (l, &item) in items.iter().enumerate() {
                    let id = values[item.idx()].data();
                    let dw = Self::acc(grads, values, live_bytes, weights);
                    for r in 0..n {
                        let mut s = 0.0;
                        for j in 0..h {
                            s += id[r * h + j] * dout[r * h + j];
                        }
                        dw[r * ll + l] += s;
                    }
                }
            }
            Op::EdgePairSum { s, r, edges, .. } => {
                let (s, r) = (*s, *r);
                let edges = Arc::clone(edges);
                {
                    let ds = Self::acc(grads, values, live_bytes, s);
                    for e in 0..edges.num_edges() {
                        ds[edges.dst[e]] += dout[e];
                    }
                }
                {
                    let dr = Self::acc(grads, values, live_bytes, r);
                    for e in 0..edges.num_edges() {
                        dr[edges.src[e]] += dout[e];
                    }
                }
            }
            Op::SegmentSoftmax { scores, edges, out } => {
                let (scores, out) = (*scores, *out);
                let edges = Arc::clone(edges);
                let od = values[out.idx()].data();
                let da = Self::acc(grads, values, live_bytes, scores);
                for i in 0..edges.num_nodes() {
                    let seg = edges.segment(i);
                    let p = &od[seg.clone()];
                    let d = &dout[seg.clone()];
                    let dot: f64 = p.iter().zip(d).map(|(x, y)| x * y).sum();
                    for (k, e) in seg.enumerate() {
                        da[e] += p[k] * (d[k] - dot);
                    }
                }
            }
            Op::SegmentWeightedSum { weights, values: vals, edges, .. } => {
                let (weights, vals) = (*weights, *vals);
                let edges = Arc::clone(edges);
                let d = values[vals.idx()].shape()[1];
                {
                    let vd = values[vals.idx()].data();
                    let dw = Self::acc(grads, values, live_bytes, weights);
                    for i in 0..edges.num_nodes() {
                        let drow = &dout[i * d..(i + 1) * d];
                        for e in edges.segment(i) {
                            let vrow = &vd[edges.src[e] * d..(edges.src[e] + 1) * d];
                            let mut s = 0.0;
                            for j in 0..d {
                                s += vrow[j] * drow[j];
                            }
                            dw[e] += s;
                        }
                    }
                }
                {
                    let wd = values[weights.idx()].data();
                    let dv = Self::acc(grads, values, live_bytes, vals);
                    for i in 0..edges.num_nodes() {
                        let drow = &dout[i * d..(i + 1) * d];
                        for e in edges.segment(i) {
                            let w = wd[e];
                            if w == 0.0 {
                                continue;
                            }
                            axpy(&mut dv[edges.src[e] * d..(edges.src[e] + 1) * d], drow, w);
                        }
                    }
                }
            }
        }
        self.grads[out.idx()] = Some(dout);
        Ok(())
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for i in 0..dst.len() {
        dst[i] += k * src[i];
    }
}
