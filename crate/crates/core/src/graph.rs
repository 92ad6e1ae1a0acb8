//! A small reverse-mode automatic differentiation tape over dense 2-D matrices.
//!
//! Every value is an `Array2<f64>`. Row-major "snippet per row" layouts are used
//! throughout the model code: a sequence of `T` snippets with `C` channels is a
//! `T x C` matrix. Nodes are appended in evaluation order, so reverse index
//! order is a valid topological order for the backward pass.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

use crate::params::ParamStore;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `a (n x m) + b (1 x m)`
    AddRow(Var, Var),
    /// `a (n x m) * b (1 x m)`
    MulRow(Var, Var),
    /// `a (n x m) * b (n x 1)`
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNormRows(Var, f64),
    L2NormalizeRows(Var, f64),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    Im2Col(Var, usize),
    SoftMinWindow(Var, usize, f64),
    Sum(Var),
    SumRows(Var),
    SumCols(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Evaluation tape. Build a forward computation with the op methods, then call
/// [`Graph::backward`] on a `1 x 1` scalar node.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

fn accumulate(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(g) => *g += &delta,
        None => *slot = Some(delta),
    }
}

fn shift_rows(x: &Mat, offset: isize) -> Mat {
    // out[i] = x[i + offset], zero outside range
    let (n, m) = x.dim();
    let mut out = Mat::zeros((n, m));
    for i in 0..n {
        let j = i as isize + offset;
        if j >= 0 && (j as usize) < n {
            out.row_mut(i).assign(&x.row(j as usize));
        }
    }
    out
}

/// Column-wise soft minimum over a centered window of rows, with zero padding.
pub(crate) fn soft_min_window_value(x: &Mat, kernel: usize, beta: f64) -> Mat {
    let (n, m) = x.dim();
    let r = (kernel / 2) as isize;
    let mut out = Mat::zeros((n, m));
    for j in 0..m {
        for i in 0..n {
            let window: Vec<f64> = (-r..=r)
                .map(|o| {
                    let k = i as isize + o;
                    if k >= 0 && (k as usize) < n {
                        x[[k as usize, j]]
                    } else {
                        0.0
                    }
                })
                .collect();
            let lo = window.iter().cloned().fold(f64::INFINITY, f64::min);
            let s: f64 = window.iter().map(|v| (-(v - lo) / beta).exp()).sum();
            out[[i, j]] = lo - beta * s.ln();
        }
    }
    out
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Inserts an input or constant.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, x: f64) -> Var {
        self.leaf(Mat::from_elem((1, 1), x))
    }

    /// Inserts (once per graph) the named parameter from `store`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Var {
        if let Some(&v) = self.params.get(name) {
            return v;
        }
        let value = store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter `{name}`"))
            .clone();
        let v = self.leaf(value);
        self.params.insert(name.to_string(), v);
        v
    }

    /// Parameters touched by this graph, by name.
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) / self.value(b);
        self.push(v, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a 1 x m operand");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row expects a 1 x m operand");
        let v = self.value(a) * self.value(row);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col expects an n x 1 operand");
        let v = self.value(a) * self.value(col);
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) + k;
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Clamps values into `[lo, hi]`; the gradient is zero where clamping was active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let lse = logsumexp_rows(x);
        let v = x - &lse;
        self.push(v, Op::LogSoftmaxRows(a))
    }

    /// `n x m -> n x 1`
    pub fn logsumexp_rows(&mut self, a: Var) -> Var {
        let v = logsumexp_rows(self.value(a));
        self.push(v, Op::LogSumExpRows(a))
    }

    /// Per-row standardization without affine parameters.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
        }
        self.push(out, Op::LayerNormRows(a, eps))
    }

    /// `x / sqrt(|x|^2 + eps)` per row.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for mut row in out.rows_mut() {
            let n = (row.dot(&row) + eps).sqrt();
            row.mapv_inplace(|v| v / n);
        }
        self.push(out, Op::L2NormalizeRows(a, eps))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros((idx.len(), x.ncols()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&x.row(i));
        }
        self.push(out, Op::GatherRows(a, idx.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Stacks `kernel` row-shifted copies side by side (zero padded), so that a
    /// 1-D convolution over rows becomes a single matrix product.
    pub fn im2col(&mut self, a: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "kernel width must be odd");
        let x = self.value(a);
        let r = (kernel / 2) as isize;
        let parts: Vec<Mat> = (-r..=r).map(|o| shift_rows(x, o)).collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("im2col");
        self.push(v, Op::Im2Col(a, kernel))
    }

    /// Differentiable erosion along rows: `-beta * log(sum(exp(-x / beta)))` over a
    /// centered window of `kernel` rows with zero padding.
    pub fn soft_min_window(&mut self, a: Var, kernel: usize, beta: f64) -> Var {
        assert!(kernel % 2 == 1, "kernel width must be odd");
        let v = soft_min_window_value(self.value(a), kernel, beta);
        self.push(v, Op::SoftMinWindow(a, kernel, beta))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `n x m -> 1 x m`
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(v, Op::SumRows(a))
    }

    /// `n x m -> n x 1`
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward expects a scalar loss");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // interior gradients are released once propagated
            let Some(gy) = grads[idx].take() else { continue };
            let y = &node.value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::MatMul(a, b) => {
                    let da = gy.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&gy);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::MatMulBt(a, b) => {
                    let da = gy.dot(self.value(*b));
                    let db = gy.t().dot(self.value(*a));
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], gy.clone());
                    accumulate(&mut grads[b.0], gy.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a.0], gy.clone());
                    accumulate(&mut grads[b.0], -&gy);
                }
                Op::Mul(a, b) => {
                    let da = &gy * self.value(*b);
                    let db = &gy * self.value(*a);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Div(a, b) => {
                    let bv = self.value(*b);
                    let da = &gy / bv;
                    let db = -(&gy * y) / bv;
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::AddRow(a, row) => {
                    let dr = gy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[a.0], gy.clone());
                    accumulate(&mut grads[row.0], dr);
                }
                Op::MulRow(a, row) => {
                    let da = &gy * self.value(*row);
                    let dr = (&gy * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[row.0], dr);
                }
                Op::MulCol(a, col) => {
                    let da = &gy * self.value(*col);
                    let dc = (&gy * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[col.0], dc);
                }
                Op::Scale(a, k) => accumulate(&mut grads[a.0], &gy * *k),
                Op::AddScalar(a) => accumulate(&mut grads[a.0], gy),
                Op::Relu(a) => {
                    let mut d = gy;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|g, &x| {
                        if x <= 0.0 {
                            *g = 0.0
                        }
                    });
                    accumulate(&mut grads[a.0], d);
                }
                Op::Sigmoid(a) => {
                    let d = &gy * &y.mapv(|s| s * (1.0 - s));
                    accumulate(&mut grads[a.0], d);
                }
                Op::Exp(a) => accumulate(&mut grads[a.0], &gy * y),
                Op::Ln(a) => accumulate(&mut grads[a.0], &gy / self.value(*a)),
                Op::Square(a) => accumulate(&mut grads[a.0], &gy * &(self.value(*a) * 2.0)),
                Op::Clamp(a, lo, hi) => {
                    let mut d = gy;
                    Zip::from(&mut d).and(self.value(*a)).for_each(|g, &x| {
                        if x < *lo || x > *hi {
                            *g = 0.0
                        }
                    });
                    accumulate(&mut grads[a.0], d);
                }
                Op::SoftmaxRows(a) => {
                    let mut d = Mat::zeros(y.dim());
                    for ((mut dr, yr), gr) in d.rows_mut().into_iter().zip(y.rows()).zip(gy.rows()) {
                        let dot = yr.dot(&gr);
                        Zip::from(&mut dr).and(&yr).and(&gr).for_each(|o, &p, &g| *o = p * (g - dot));
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::LogSoftmaxRows(a) => {
                    let sm = y.mapv(f64::exp);
                    let gsum = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    let d = &gy - &(&sm * &gsum);
                    accumulate(&mut grads[a.0], d);
                }
                Op::LogSumExpRows(a) => {
                    let x = self.value(*a);
                    let d = (x - y).mapv(f64::exp) * &gy;
                    accumulate(&mut grads[a.0], d);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = self.value(*a);
                    let mut d = Mat::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let xr = x.row(i);
                        let n = xr.len() as f64;
                        let mean = xr.sum() / n;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let yr = y.row(i);
                        let gr = gy.row(i);
                        let gmean = gr.sum() / n;
                        let gy_mean = gr.dot(&yr) / n;
                        for j in 0..xr.len() {
                            d[[i, j]] = inv * (gr[j] - gmean - yr[j] * gy_mean);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::L2NormalizeRows(a, eps) => {
                    let x = self.value(*a);
                    let mut d = Mat::zeros(x.dim());
                    for i in 0..x.nrows() {
                        let xr = x.row(i);
                        let gr = gy.row(i);
                        let n = (xr.dot(&xr) + eps).sqrt();
                        let xg = xr.dot(&gr);
                        for j in 0..xr.len() {
                            d[[i, j]] = gr[j] / n - xr[j] * xg / (n * n * n);
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], gy.t().to_owned()),
                Op::GatherRows(a, idx) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    for (r, &i) in idx.iter().enumerate() {
                        let mut row = d.row_mut(i);
                        row += &gy.row(r);
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::SliceCols(a, start, end) => {
                    let mut d = Mat::zeros(self.shape(*a));
                    d.slice_mut(s![.., *start..*end]).assign(&gy);
                    accumulate(&mut grads[a.0], d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.shape(*p).1;
                        let d = gy.slice(s![.., off..off + w]).to_owned();
                        accumulate(&mut grads[p.0], d);
                        off += w;
                    }
                }
                Op::Im2Col(a, kernel) => {
                    let (n, m) = self.shape(*a);
                    let r = (*kernel / 2) as isize;
                    let mut d = Mat::zeros((n, m));
                    for (blk, o) in (-r..=r).enumerate() {
                        let part = gy.slice(s![.., blk * m..(blk + 1) * m]).to_owned();
                        // forward: out[i] = x[i + o]  =>  dx[i + o] += g[i]
                        d += &shift_rows(&part, -o);
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::SoftMinWindow(a, kernel, beta) => {
                    let x = self.value(*a);
                    let (n, m) = x.dim();
                    let r = (*kernel / 2) as isize;
                    let mut d = Mat::zeros((n, m));
                    for j in 0..m {
                        for i in 0..n {
                            let yi = y[[i, j]];
                            for o in -r..=r {
                                let k = i as isize + o;
                                if k >= 0 && (k as usize) < n {
                                    let k = k as usize;
                                    let w = (-(x[[k, j]] - yi) / beta).exp();
                                    d[[k, j]] += gy[[i, j]] * w;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], d);
                }
                Op::Sum(a) => {
                    let g = gy[[0, 0]];
                    accumulate(&mut grads[a.0], Mat::from_elem(self.shape(*a), g));
                }
                Op::SumRows(a) => {
                    let (n, _) = self.shape(*a);
                    let d = gy.broadcast((n, gy.ncols())).unwrap().to_owned();
                    accumulate(&mut grads[a.0], d);
                }
                Op::SumCols(a) => {
                    let (_, m) = self.shape(*a);
                    let d = gy.broadcast((gy.nrows(), m)).unwrap().to_owned();
                    accumulate(&mut grads[a.0], d);
                }
            }
        }
        Grads { grads }
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

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - mx).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

pub fn logsumexp_rows(x: &Mat) -> Mat {
    let mut out = Mat::zeros((x.nrows(), 1));
    for (i, row) in x.rows().into_iter().enumerate() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
        out[[i, 0]] = mx + s.ln();
    }
    out
}

/// Analytic versus central-difference gradient of the scalar `f(x)` at `x0`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub analytic: Mat,
    pub numeric: Mat,
}

impl GradientCheck {
    /// `|a - n| / max(|a|, |n|)` over the whole gradient (Frobenius norms);
    /// zero when both vanish.
    pub fn relative_error(&self) -> f64 {
        let diff = (&self.analytic - &self.numeric).mapv(|v| v * v).sum().sqrt();
        let scale = self
            .analytic
            .mapv(|v| v * v)
            .sum()
            .sqrt()
            .max(self.numeric.mapv(|v| v * v).sum().sqrt());
        if scale == 0.0 {
            0.0
        } else {
            diff / scale
        }
    }
}

/// Differentiates `f` (which builds a scalar from a leaf holding `x0`) both
/// through the tape and by central differences with step `h`.
pub fn check_gradient(x0: &Mat, h: f64, f: impl Fn(&mut Graph, Var) -> Var) -> GradientCheck {
    let eval = |x: &Mat| {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let out = f(&mut g, v);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let v = g.leaf(x0.clone());
    let out = f(&mut g, v);
    let analytic = g.backward(out).get_or_zeros(v, x0.dim());
    let mut numeric = Mat::zeros(x0.dim());
    let mut x = x0.clone();
    for idx in 0..x0.len() {
        let (i, j) = (idx / x0.ncols(), idx % x0.ncols());
        let orig = x[[i, j]];
        x[[i, j]] = orig + h;
        let up = eval(&x);
        x[[i, j]] = orig - h;
        let down = eval(&x);
        x[[i, j]] = orig;
        numeric[[i, j]] = (up - down) / (2.0 * h);
    }
    GradientCheck { analytic, numeric }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize), seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn assert_grad(x: &Mat, f: impl Fn(&mut Graph, Var) -> Var) {
        let c = check_gradient(x, 1e-5, f);
        assert!(c.relative_error() < 1e-6, "rel err {} analytic {:?} numeric {:?}", c.relative_error(), c.analytic, c.numeric);
    }

    /// Projects any output onto fixed random weights so every entry matters.
    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let w = g.leaf(random(g.shape(y), seed));
        let p = g.mul(y, w);
        g.sum(p)
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let x = random((3, 4), 1);
        let other = random((3, 4), 2).mapv(|v| v + 2.0);
        type Op = fn(&mut Graph, Var) -> Var;
        let ops: Vec<(&str, Op)> = vec![
            ("sigmoid", |g, x| g.sigmoid(x)),
            ("exp", |g, x| g.exp(x)),
            ("square", |g, x| g.square(x)),
            ("scale", |g, x| g.scale(x, -1.7)),
            ("add_scalar", |g, x| g.add_scalar(x, 0.3)),
            ("relu", |g, x| {
                let y = g.add_scalar(x, 0.05);
                g.relu(y)
            }),
            ("ln", |g, x| {
                let y = g.exp(x);
                g.ln(y)
            }),
            ("softmax_rows", |g, x| g.softmax_rows(x)),
            ("log_softmax_rows", |g, x| g.log_softmax_rows(x)),
            ("logsumexp_rows", |g, x| g.logsumexp_rows(x)),
            ("layer_norm_rows", |g, x| g.layer_norm_rows(x, 1e-5)),
            ("l2_normalize_rows", |g, x| g.l2_normalize_rows(x, 1e-12)),
            ("transpose", |g, x| g.transpose(x)),
            ("gather_rows", |g, x| g.gather_rows(x, &[2, 0, 2])),
            ("slice_cols", |g, x| g.slice_cols(x, 1, 3)),
            ("concat_cols", |g, x| g.concat_cols(&[x, x])),
            ("im2col", |g, x| g.im2col(x, 3)),
            ("soft_min_window", |g, x| g.soft_min_window(x, 3, 5.0)),
            ("sum_rows", |g, x| g.sum_rows(x)),
            ("sum_cols", |g, x| g.sum_cols(x)),
            ("mean", |g, x| g.mean(x)),
        ];
        for (i, (name, op)) in ops.into_iter().enumerate() {
            let c = check_gradient(&x, 1e-5, |g, v| {
                let y = op(g, v);
                weighted_sum(g, y, 100 + i as u64)
            });
            assert!(c.relative_error() < 1e-6, "{name}: {}", c.relative_error());
        }
        assert_grad(&x, |g, v| {
            let o = g.leaf(other.clone());
            let y = g.div(v, o);
            weighted_sum(g, y, 7)
        });
        assert_grad(&other, |g, v| {
            let a = g.leaf(x.clone());
            let y = g.div(a, v);
            weighted_sum(g, y, 8)
        });
    }

    #[test]
    fn binary_and_broadcast_ops_match_finite_differences() {
        let a = random((3, 4), 3);
        let b = random((4, 2), 4);
        let c = random((5, 4), 5);
        let row = random((1, 4), 6);
        let col = random((3, 1), 7);
        assert_grad(&a, |g, v| {
            let w = g.leaf(b.clone());
            let y = g.matmul(v, w);
            weighted_sum(g, y, 9)
        });
        assert_grad(&b, |g, v| {
            let x = g.leaf(a.clone());
            let y = g.matmul(x, v);
            weighted_sum(g, y, 10)
        });
        assert_grad(&c, |g, v| {
            let x = g.leaf(a.clone());
            let y = g.matmul_bt(x, v);
            weighted_sum(g, y, 11)
        });
        assert_grad(&a, |g, v| {
            let y = g.mul(v, v);
            let z = g.sub(y, v);
            let w = g.add(z, v);
            weighted_sum(g, w, 12)
        });
        assert_grad(&row, |g, v| {
            let x = g.leaf(a.clone());
            let y = g.add_row(x, v);
            let z = g.mul_row(y, v);
            weighted_sum(g, z, 13)
        });
        assert_grad(&col, |g, v| {
            let x = g.leaf(a.clone());
            let y = g.mul_col(x, v);
            weighted_sum(g, y, 14)
        });
    }

    #[test]
    fn reused_nodes_accumulate_gradients() {
        let x = Mat::from_elem((1, 1), 3.0);
        let c = check_gradient(&x, 1e-5, |g, v| {
            let y = g.mul(v, v);
            let z = g.mul(y, v);
            g.sum(z)
        });
        assert!((c.analytic[[0, 0]] - 27.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let x = Mat::from_shape_vec((1, 3), vec![-2.0, 0.5, 2.0]).unwrap();
        let c = check_gradient(&x, 1e-6, |g, v| {
            let y = g.clamp(v, -1.0, 1.0);
            g.sum(y)
        });
        assert_eq!(c.analytic.row(0).to_vec(), vec![0.0, 1.0, 0.0]);
    }
}
