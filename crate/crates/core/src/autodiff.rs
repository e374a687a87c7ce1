//! Reverse-mode automatic differentiation over [`Mat`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that
//! was created with [`Tape::param`] (or derives from one).
//!
//! Shape mismatches inside the tape are programming errors and panic;
//! callers validate user-facing shapes before building the graph.

use crate::special::{std_normal_cdf, std_normal_pdf};
use crate::tensor::{dot, Mat};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Lower bound applied inside [`Tape::log`].
pub const LOG_CLAMP: f64 = 1e-12;
const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sigmoid(Var),
    Gelu(Var),
    Log(Var),
    Abs(Var),
    Exp(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    MeanRows(Var),
    MeanCols(Var),
    SumAll(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    DepthwiseConv {
        x: Var,
        kernel: Var,
        bias: Var,
        side: usize,
        k: usize,
    },
    MaxColSum(Var, usize),
}

struct Node {
    value: Mat,
    op: Op,
    needs_grad: bool,
}

/// Deliberate backward-rule corruption, used to confirm that gradient
/// checking catches a wrong derivative.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// GELU derivative scaled by 1.1.
    Gelu,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

/// Gradients indexed by [`Var`]; `None` where no gradient flowed.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set_fault(&mut self, fault: Option<BackwardFault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Mat, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        let n = self.needs(&[a, b]);
        self.push(v, Op::MatMul(a, b), n)
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        let n = self.needs(&[a, b]);
        self.push(v, Op::MatMulT(a, b), n)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        let n = self.needs(&[a]);
        self.push(v, Op::Transpose(a), n)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let n = self.needs(&[a, b]);
        self.push(v, Op::Add(a, b), n)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let n = self.needs(&[a, b]);
        self.push(v, Op::Sub(a, b), n)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let n = self.needs(&[a, b]);
        self.push(v, Op::Mul(a, b), n)
    }

    /// Adds a 1×c row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row: bias shape");
        let r = rv.row(0);
        let v = Mat::from_fn(av.rows(), av.cols(), |i, j| av[(i, j)] + r[j]);
        let n = self.needs(&[a, row]);
        self.push(v, Op::AddRow(a, row), n)
    }

    /// Scales row `i` of `a` by `col[i]` (col is r×1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col: gate shape");
        let v = Mat::from_fn(av.rows(), av.cols(), |i, j| av[(i, j)] * cv[(i, 0)]);
        let n = self.needs(&[a, col]);
        self.push(v, Op::MulCol(a, col), n)
    }

    /// Divides every element of `a` by the 1×1 node `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Var {
        let sv = self.value(s).item();
        let v = self.value(a).map(|x| x / sv);
        let n = self.needs(&[a, s]);
        self.push(v, Op::DivScalar(a, s), n)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let v = self.value(a).scaled(factor);
        let n = self.needs(&[a]);
        self.push(v, Op::Scale(a, factor), n)
    }

    /// `a + c` elementwise for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        let n = self.needs(&[a]);
        self.push(v, Op::Offset(a), n)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        let n = self.needs(&[a]);
        self.push(v, Op::Sigmoid(a), n)
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * std_normal_cdf(x));
        let n = self.needs(&[a]);
        self.push(v, Op::Gelu(a), n)
    }

    /// `ln(max(a, 1e-12))`
    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(LOG_CLAMP).ln());
        let n = self.needs(&[a]);
        self.push(v, Op::Log(a), n)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let n = self.needs(&[a]);
        self.push(v, Op::Abs(a), n)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        let n = self.needs(&[a]);
        self.push(v, Op::Exp(a), n)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        let n = self.needs(&[a]);
        self.push(v, Op::SoftmaxRows(a), n)
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (both 1×c).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (r, c) = xv.shape();
        let g = self.value(gamma);
        let b = self.value(beta);
        assert_eq!(g.shape(), (1, c), "layer_norm: gamma shape");
        assert_eq!(b.shape(), (1, c), "layer_norm: beta shape");
        let mut xhat = Mat::zeros(r, c);
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let gr = g.row(0);
        let br = b.row(0);
        let out = Mat::from_fn(r, c, |i, j| xhat[(i, j)] * gr[j] + br[j]);
        let n = self.needs(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            n,
        )
    }

    /// Mean over rows (token axis) → 1×c.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_rows();
        let n = self.needs(&[a]);
        self.push(v, Op::MeanRows(a), n)
    }

    /// Mean over columns → r×1.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let c = av.cols() as f64;
        let v = Mat::from_fn(av.rows(), 1, |i, _| av.row(i).iter().sum::<f64>() / c);
        let n = self.needs(&[a]);
        self.push(v, Op::MeanCols(a), n)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        let n = self.needs(&[a]);
        self.push(v, Op::SumAll(a), n)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let len = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / len)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Mat::vstack(&mats);
        let n = self.needs(parts);
        self.push(v, Op::ConcatRows(parts.to_vec()), n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Mat::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols: row mismatch");
            for i in 0..rows {
                v.row_mut(i)[off..off + pv.cols()].copy_from_slice(pv.row(i));
            }
            off += pv.cols();
        }
        let n = self.needs(parts);
        self.push(v, Op::ConcatCols(parts.to_vec()), n)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        let n = self.needs(&[a]);
        self.push(v, Op::SliceRows(a, start), n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.cols(), "slice_cols: out of range");
        let v = Mat::from_fn(av.rows(), len, |i, j| av[(i, start + j)]);
        let n = self.needs(&[a]);
        self.push(v, Op::SliceCols(a, start), n)
    }

    /// Row `k` of the output is row `indices[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, indices: Vec<usize>) -> Var {
        let av = self.value(a);
        let mut v = Mat::zeros(indices.len(), av.cols());
        for (k, &i) in indices.iter().enumerate() {
            v.row_mut(k).copy_from_slice(av.row(i));
        }
        let n = self.needs(&[a]);
        self.push(v, Op::GatherRows(a, indices), n)
    }

    /// Depthwise "same" 2-D convolution over a `side×side` grid stored
    /// row-major as `side²` tokens with one channel per column.
    /// `kernel` is c×k² (row-major k×k per channel), `bias` is 1×c.
    pub fn depthwise_conv(&mut self, x: Var, kernel: Var, bias: Var, side: usize, k: usize) -> Var {
        let xv = self.value(x);
        let kv = self.value(kernel);
        let bv = self.value(bias);
        let c = xv.cols();
        assert_eq!(xv.rows(), side * side, "depthwise_conv: grid size");
        assert_eq!(kv.shape(), (c, k * k), "depthwise_conv: kernel shape");
        assert_eq!(bv.shape(), (1, c), "depthwise_conv: bias shape");
        let half = (k / 2) as isize;
        let mut out = Mat::zeros(side * side, c);
        for r in 0..side {
            for col in 0..side {
                let p = r * side + col;
                let orow = out.row_mut(p);
                orow.copy_from_slice(bv.row(0));
                for a in 0..k {
                    let rr = r as isize + a as isize - half;
                    if rr < 0 || rr >= side as isize {
                        continue;
                    }
                    for b in 0..k {
                        let cc = col as isize + b as isize - half;
                        if cc < 0 || cc >= side as isize {
                            continue;
                        }
                        let q = rr as usize * side + cc as usize;
                        let xrow = xv.row(q);
                        for ch in 0..c {
                            orow[ch] += kv[(ch, a * k + b)] * xrow[ch];
                        }
                    }
                }
            }
        }
        let n = self.needs(&[x, kernel, bias]);
        self.push(
            out,
            Op::DepthwiseConv {
                x,
                kernel,
                bias,
                side,
                k,
            },
            n,
        )
    }

    /// Largest column sum → 1×1.
    pub fn max_col_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let mut best = (0usize, f64::NEG_INFINITY);
        for j in 0..av.cols() {
            let s: f64 = (0..av.rows()).map(|i| av[(i, j)]).sum();
            if s > best.1 {
                best = (j, s);
            }
        }
        let n = self.needs(&[a]);
        self.push(Mat::scalar(best.1), Op::MaxColSum(a, best.0), n)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if needs(a) {
                    self.accumulate(grads, a, g.matmul_t(val(b)));
                }
                if needs(b) {
                    self.accumulate(grads, b, val(a).t_matmul(g));
                }
            }
            &Op::MatMulT(a, b) => {
                if needs(a) {
                    self.accumulate(grads, a, g.matmul(val(b)));
                }
                if needs(b) {
                    self.accumulate(grads, b, g.t_matmul(val(a)));
                }
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.scaled(-1.0));
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    self.accumulate(grads, a, g.zip_map(val(b), |x, y| x * y));
                }
                if needs(b) {
                    self.accumulate(grads, b, g.zip_map(val(a), |x, y| x * y));
                }
            }
            &Op::AddRow(a, row) => {
                self.accumulate(grads, a, g.clone());
                if needs(row) {
                    let s = g.mean_rows().scaled(g.rows() as f64);
                    self.accumulate(grads, row, s);
                }
            }
            &Op::MulCol(a, col) => {
                let cv = val(col);
                if needs(a) {
                    let ga = Mat::from_fn(g.rows(), g.cols(), |i, j| g[(i, j)] * cv[(i, 0)]);
                    self.accumulate(grads, a, ga);
                }
                if needs(col) {
                    let av = val(a);
                    let gc = Mat::from_fn(g.rows(), 1, |i, _| dot(g.row(i), av.row(i)));
                    self.accumulate(grads, col, gc);
                }
            }
            &Op::DivScalar(a, s) => {
                let sv = val(s).item();
                if needs(a) {
                    self.accumulate(grads, a, g.scaled(1.0 / sv));
                }
                if needs(s) {
                    let num = dot(g.as_slice(), val(a).as_slice());
                    self.accumulate(grads, s, Mat::scalar(-num / (sv * sv)));
                }
            }
            &Op::Scale(a, f) => self.accumulate(grads, a, g.scaled(f)),
            &Op::Offset(a) => self.accumulate(grads, a, g.clone()),
            &Op::Sigmoid(a) => {
                let d = g.zip_map(&node.value, |gi, y| gi * y * (1.0 - y));
                self.accumulate(grads, a, d);
            }
            &Op::Gelu(a) => {
                let k = if self.fault == Some(BackwardFault::Gelu) { 1.1 } else { 1.0 };
                let d = g.zip_map(val(a), |gi, x| k * gi * (std_normal_cdf(x) + x * std_normal_pdf(x)));
                self.accumulate(grads, a, d);
            }
            &Op::Log(a) => {
                let d = g.zip_map(val(a), |gi, x| if x > LOG_CLAMP { gi / x } else { 0.0 });
                self.accumulate(grads, a, d);
            }
            &Op::Abs(a) => {
                let d = g.zip_map(val(a), |gi, x| {
                    if x > 0.0 {
                        gi
                    } else if x < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, a, d);
            }
            &Op::Exp(a) => {
                let d = g.zip_map(&node.value, |gi, y| gi * y);
                self.accumulate(grads, a, d);
            }
            &Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = Mat::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let s = dot(g.row(i), y.row(i));
                    for ((o, &gi), &yi) in d.row_mut(i).iter_mut().zip(g.row(i)).zip(y.row(i)) {
                        *o = yi * (gi - s);
                    }
                }
                self.accumulate(grads, a, d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (r, c) = xhat.shape();
                if needs(*gamma) {
                    let mut dg = Mat::zeros(1, c);
                    for i in 0..r {
                        for j in 0..c {
                            dg[(0, j)] += g[(i, j)] * xhat[(i, j)];
                        }
                    }
                    self.accumulate(grads, *gamma, dg);
                }
                if needs(*beta) {
                    let db = g.mean_rows().scaled(r as f64);
                    self.accumulate(grads, *beta, db);
                }
                if needs(*x) {
                    let gam = val(*gamma).row(0);
                    let mut dx = Mat::zeros(r, c);
                    for i in 0..r {
                        let dxhat: Vec<f64> = (0..c).map(|j| g[(i, j)] * gam[j]).collect();
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dot(&dxhat, xhat.row(i)) / c as f64;
                        for j in 0..c {
                            dx[(i, j)] = inv_std[i] * (dxhat[j] - m1 - xhat[(i, j)] * m2);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            &Op::MeanRows(a) => {
                let (r, c) = val(a).shape();
                let gr = g.row(0);
                let d = Mat::from_fn(r, c, |_, j| gr[j] / r as f64);
                self.accumulate(grads, a, d);
            }
            &Op::MeanCols(a) => {
                let (r, c) = val(a).shape();
                let d = Mat::from_fn(r, c, |i, _| g[(i, 0)] / c as f64);
                self.accumulate(grads, a, d);
            }
            &Op::SumAll(a) => {
                let (r, c) = val(a).shape();
                self.accumulate(grads, a, Mat::filled(r, c, g.item()));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    if needs(p) {
                        self.accumulate(grads, p, g.slice_rows(off, rows));
                    }
                    off += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = val(p).cols();
                    if needs(p) {
                        let d = Mat::from_fn(g.rows(), cols, |i, j| g[(i, off + j)]);
                        self.accumulate(grads, p, d);
                    }
                    off += cols;
                }
            }
            &Op::SliceRows(a, start) => {
                let (r, c) = val(a).shape();
                let mut d = Mat::zeros(r, c);
                for i in 0..g.rows() {
                    d.row_mut(start + i).copy_from_slice(g.row(i));
                }
                self.accumulate(grads, a, d);
            }
            &Op::SliceCols(a, start) => {
                let (r, c) = val(a).shape();
                let mut d = Mat::zeros(r, c);
                for i in 0..r {
                    d.row_mut(i)[start..start + g.cols()].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, a, d);
            }
            Op::GatherRows(a, indices) => {
                let (r, c) = val(*a).shape();
                let mut d = Mat::zeros(r, c);
                for (k, &i) in indices.iter().enumerate() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            &Op::DepthwiseConv {
                x,
                kernel,
                bias,
                side,
                k,
            } => {
                let xv = val(x);
                let kv = val(kernel);
                let c = xv.cols();
                let half = (k / 2) as isize;
                let mut dx = Mat::zeros(xv.rows(), c);
                let mut dk = Mat::zeros(c, k * k);
                for r in 0..side {
                    for col in 0..side {
                        let p = r * side + col;
                        let grow = g.row(p);
                        for a in 0..k {
                            let rr = r as isize + a as isize - half;
                            if rr < 0 || rr >= side as isize {
                                continue;
                            }
                            for b in 0..k {
                                let cc = col as isize + b as isize - half;
                                if cc < 0 || cc >= side as isize {
                                    continue;
                                }
                                let q = rr as usize * side + cc as usize;
                                for ch in 0..c {
                                    dk[(ch, a * k + b)] += grow[ch] * xv[(q, ch)];
                                    dx[(q, ch)] += grow[ch] * kv[(ch, a * k + b)];
                                }
                            }
                        }
                    }
                }
                if needs(bias) {
                    self.accumulate(grads, bias, g.mean_rows().scaled(g.rows() as f64));
                }
                self.accumulate(grads, kernel, dk);
                self.accumulate(grads, x, dx);
            }
            &Op::MaxColSum(a, j) => {
                let (r, c) = val(a).shape();
                let mut d = Mat::zeros(r, c);
                for i in 0..r {
                    d[(i, j)] = g.item();
                }
                self.accumulate(grads, a, d);
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}
