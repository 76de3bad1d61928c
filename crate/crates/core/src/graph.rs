//! Minimal reverse-mode automatic differentiation over row-major batches.
//!
//! Every value is a 2-D `f64` array whose rows are batch items. Image
//! activations are flattened per row in `[channel][row][col]` order and the
//! spatial ops carry their [`Geom`] explicitly.
//!
//! A [`Graph`] is built fresh for every forward pass; only nodes reachable
//! from a trainable leaf are differentiated.

use nalgebra::DMatrix;
use ndarray::{s, Array2, ArrayView2, Axis};

use crate::augment::{self, AugmentPlan};

pub type Tensor = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Channel/height/width of a flattened image row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Geom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Geom {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Geom { c, h, w }
    }

    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn area(&self) -> usize {
        self.h * self.w
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    SoftmaxRows(Var),
    LogClamp(Var, f64),
    RowSum(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize, usize),
    Conv3x3 {
        x: Var,
        w: Var,
        b: Var,
        geom: Geom,
        cols: Tensor,
    },
    Upsample2x(Var, Geom),
    AvgPool2x(Var, Geom),
    SumPool(Var, Geom),
    Augment(Var, Geom, Vec<AugmentPlan>),
    /// `W / sigma` with the leading singular pair `(u, v)` of `W`.
    SpectralNorm {
        w: Var,
        sigma: f64,
        u: Tensor,
        v: Tensor,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    grad: bool,
}

/// Tape of operations; see the module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every differentiable node.
pub struct Grads(Vec<Option<Tensor>>);

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of the given shape when `v` did not
    /// influence the root.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let grad = self.needs(&[a, b]);
        self.push(value, Op::MatMul(a, b), grad)
    }

    /// `a (n x m) + b (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let grad = self.needs(&[a, b]);
        self.push(value, Op::AddRow(a, b), grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let grad = self.needs(&[a, b]);
        self.push(value, Op::Add(a, b), grad)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let grad = self.needs(&[a, b]);
        self.push(value, Op::Sub(a, b), grad)
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let grad = self.needs(&[a, b]);
        self.push(value, Op::Mul(a, b), grad)
    }

    /// `a (n x m) * b (n x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let grad = self.needs(&[a, b]);
        self.push(value, Op::MulCol(a, b), grad)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let grad = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), grad)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let grad = self.needs(&[a]);
        self.push(value, Op::AddScalar(a), grad)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `max(0, x)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|v| v.max(0.0));
        let grad = self.needs(&[a]);
        self.push(value, Op::Relu(a), grad)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).mapv(|v| if v > 0.0 { v } else { slope * v });
        let grad = self.needs(&[a]);
        self.push(value, Op::LeakyRelu(a, slope), grad)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let grad = self.needs(&[a]);
        self.push(value, Op::Tanh(a), grad)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
        }
        let grad = self.needs(&[a]);
        self.push(value, Op::SoftmaxRows(a), grad)
    }

    /// `ln(max(x, eps))`; zero gradient where the clamp is active.
    pub fn log_clamp(&mut self, a: Var, eps: f64) -> Var {
        let value = self.value(a).mapv(|v| v.max(eps).ln());
        let grad = self.needs(&[a]);
        self.push(value, Op::LogClamp(a, eps), grad)
    }

    /// Sum of each row, `n x 1`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        let grad = self.needs(&[a]);
        self.push(value, Op::RowSum(a), grad)
    }

    /// Row-wise dot product of two equally shaped tensors, `n x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let prod = self.mul(a, b);
        self.row_sum(prod)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::from_elem((1, 1), sequential_sum(self.value(a)));
        let grad = self.needs(&[a]);
        self.push(value, Op::Sum(a), grad)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let value = Tensor::from_elem((1, 1), sequential_sum(self.value(a)) / n);
        let grad = self.needs(&[a]);
        self.push(value, Op::Mean(a), grad)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must match");
        let grad = self.needs(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), grad)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<f64>> = parts.iter().map(|v| self.value(*v).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must match");
        let grad = self.needs(parts);
        self.push(value, Op::ConcatRows(parts.to_vec()), grad)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice(s![start..end, ..]).to_owned();
        let grad = self.needs(&[a]);
        self.push(value, Op::SliceRows(a, start, end), grad)
    }

    /// 3x3 convolution, stride 1, zero padding 1.
    ///
    /// `w` is `c_out x (c_in * 9)` with columns ordered `[c_in][ky][kx]`,
    /// `b` is `1 x c_out`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Var, geom: Geom) -> Var {
        let cout = self.value(w).nrows();
        assert_eq!(self.value(w).ncols(), geom.c * 9, "conv weight shape");
        assert_eq!(self.value(x).ncols(), geom.len(), "conv input shape");
        let cols = im2col(self.value(x), geom);
        let out_mat = cols.dot(&self.value(w).t());
        let n = self.value(x).nrows();
        let area = geom.area();
        let bias = self.value(b);
        let mut value = Tensor::zeros((n, cout * area));
        for s in 0..n {
            let mut row = value.row_mut(s);
            for p in 0..area {
                let src = out_mat.row(s * area + p);
                for co in 0..cout {
                    row[co * area + p] = src[co] + bias[[0, co]];
                }
            }
        }
        let grad = self.needs(&[x, w, b]);
        let cols = if grad { cols } else { Tensor::zeros((0, 0)) };
        self.push(
            value,
            Op::Conv3x3 {
                x,
                w,
                b,
                geom,
                cols,
            },
            grad,
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var, geom: Geom) -> Var {
        let src = self.value(x);
        let n = src.nrows();
        let (h2, w2) = (geom.h * 2, geom.w * 2);
        let mut value = Tensor::zeros((n, geom.c * h2 * w2));
        for s in 0..n {
            for c in 0..geom.c {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        value[[s, c * h2 * w2 + y * w2 + xx]] =
                            src[[s, c * geom.area() + (y / 2) * geom.w + xx / 2]];
                    }
                }
            }
        }
        let grad = self.needs(&[x]);
        self.push(value, Op::Upsample2x(x, geom), grad)
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2x(&mut self, x: Var, geom: Geom) -> Var {
        let src = self.value(x);
        let n = src.nrows();
        let (h2, w2) = (geom.h / 2, geom.w / 2);
        let mut value = Tensor::zeros((n, geom.c * h2 * w2));
        for s in 0..n {
            for c in 0..geom.c {
                for y in 0..h2 {
                    for xx in 0..w2 {
                        let base = c * geom.area();
                        let acc = src[[s, base + 2 * y * geom.w + 2 * xx]]
                            + src[[s, base + 2 * y * geom.w + 2 * xx + 1]]
                            + src[[s, base + (2 * y + 1) * geom.w + 2 * xx]]
                            + src[[s, base + (2 * y + 1) * geom.w + 2 * xx + 1]];
                        value[[s, c * h2 * w2 + y * w2 + xx]] = 0.25 * acc;
                    }
                }
            }
        }
        let grad = self.needs(&[x]);
        self.push(value, Op::AvgPool2x(x, geom), grad)
    }

    /// Global sum over spatial positions, `n x c`.
    pub fn sum_pool(&mut self, x: Var, geom: Geom) -> Var {
        let src = self.value(x);
        let n = src.nrows();
        let area = geom.area();
        let mut value = Tensor::zeros((n, geom.c));
        for s in 0..n {
            for c in 0..geom.c {
                value[[s, c]] = src.slice(s![s, c * area..(c + 1) * area]).sum();
            }
        }
        let grad = self.needs(&[x]);
        self.push(value, Op::SumPool(x, geom), grad)
    }

    /// Per-row augmentation; `plans[i]` is applied to row `i`.
    pub fn augment(&mut self, x: Var, geom: Geom, plans: Vec<AugmentPlan>) -> Var {
        assert_eq!(plans.len(), self.value(x).nrows(), "one plan per row");
        let value = augment::apply_forward(self.value(x), geom, &plans);
        let grad = self.needs(&[x]);
        self.push(value, Op::Augment(x, geom, plans), grad)
    }

    /// `W / sigma_max(W)`. The singular pair comes from a full SVD, so the
    /// op is stateless and its gradient exact wherever the top singular
    /// value is simple. An all-zero `W` passes through unchanged.
    pub fn spectral_norm(&mut self, w: Var) -> Var {
        let wt = self.value(w);
        let m = DMatrix::from_fn(wt.nrows(), wt.ncols(), |i, j| wt[[i, j]]);
        let svd = m.svd(true, true);
        let (mut top, mut sigma) = (0, 0.0);
        for (i, &sv) in svd.singular_values.iter().enumerate() {
            if sv > sigma {
                (top, sigma) = (i, sv);
            }
        }
        if sigma <= f64::MIN_POSITIVE {
            let value = wt.clone();
            let grad = self.needs(&[w]);
            return self.push(value, Op::Scale(w, 1.0), grad);
        }
        let uu = svd.u.as_ref().expect("left vectors requested").column(top);
        let vt = svd.v_t.as_ref().expect("right vectors requested").row(top);
        let u = Tensor::from_shape_fn((wt.nrows(), 1), |(i, _)| uu[i]);
        let v = Tensor::from_shape_fn((1, wt.ncols()), |(_, j)| vt[j]);
        let value = wt / sigma;
        let grad = self.needs(&[w]);
        self.push(value, Op::SpectralNorm { w, sigma, u, v }, grad)
    }

    /// Reverse sweep from a `1 x 1` root.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones((1, 1)));
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            if !node.grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads(grads)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.acc(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::AddRow(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.acc(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, g * self.value(*a));
                }
            }
            Op::MulCol(a, b) => {
                if self.requires_grad(*a) {
                    self.acc(grads, *a, g * self.value(*b));
                }
                if self.requires_grad(*b) {
                    let gb = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.acc(grads, *b, gb);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g * *c),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x <= 0.0 {
                        *d *= slope
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::Tanh(a) => {
                let mut d = g.clone();
                d.zip_mut_with(&node.value, |d, &y| *d *= 1.0 - y * y);
                self.acc(grads, *a, d);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let gy = g * y;
                let dot = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                let d = gy - &(y * &dot);
                self.acc(grads, *a, d);
            }
            Op::LogClamp(a, eps) => {
                let mut d = g.clone();
                d.zip_mut_with(self.value(*a), |d, &x| {
                    if x > *eps {
                        *d /= x
                    } else {
                        *d = 0.0
                    }
                });
                self.acc(grads, *a, d);
            }
            Op::RowSum(a) => {
                let shape = self.shape(*a);
                let d = Tensor::from_shape_fn(shape, |(i, _)| g[[i, 0]]);
                self.acc(grads, *a, d);
            }
            Op::Sum(a) => {
                let d = Tensor::from_elem(self.shape(*a), g[[0, 0]]);
                self.acc(grads, *a, d);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let d = Tensor::from_elem(self.shape(*a), g[[0, 0]] / n);
                self.acc(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p).1;
                    if self.requires_grad(*p) {
                        self.acc(grads, *p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let h = self.shape(*p).0;
                    if self.requires_grad(*p) {
                        self.acc(grads, *p, g.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::SliceRows(a, start, end) => {
                if self.requires_grad(*a) {
                    let mut d = Tensor::zeros(self.shape(*a));
                    d.slice_mut(s![*start..*end, ..]).assign(g);
                    self.acc(grads, *a, d);
                }
            }
            Op::Conv3x3 {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let n = self.shape(*x).0;
                let area = geom.area();
                let cout = self.shape(*w).0;
                let mut dmat = Tensor::zeros((n * area, cout));
                for s in 0..n {
                    let grow = g.row(s);
                    for p in 0..area {
                        let mut drow = dmat.row_mut(s * area + p);
                        for co in 0..cout {
                            drow[co] = grow[co * area + p];
                        }
                    }
                }
                if self.requires_grad(*b) {
                    self.acc(grads, *b, dmat.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
                if self.requires_grad(*w) {
                    self.acc(grads, *w, dmat.t().dot(cols));
                }
                if self.requires_grad(*x) {
                    let dcols = dmat.dot(self.value(*w));
                    self.acc(grads, *x, col2im(&dcols, n, *geom));
                }
            }
            Op::Upsample2x(x, geom) => {
                let n = self.shape(*x).0;
                let (h2, w2) = (geom.h * 2, geom.w * 2);
                let mut d = Tensor::zeros((n, geom.len()));
                for s in 0..n {
                    for c in 0..geom.c {
                        for y in 0..h2 {
                            for xx in 0..w2 {
                                d[[s, c * geom.area() + (y / 2) * geom.w + xx / 2]] +=
                                    g[[s, c * h2 * w2 + y * w2 + xx]];
                            }
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::AvgPool2x(x, geom) => {
                let n = self.shape(*x).0;
                let (h2, w2) = (geom.h / 2, geom.w / 2);
                let mut d = Tensor::zeros((n, geom.len()));
                for s in 0..n {
                    for c in 0..geom.c {
                        for y in 0..geom.h {
                            for xx in 0..geom.w {
                                d[[s, c * geom.area() + y * geom.w + xx]] =
                                    0.25 * g[[s, c * h2 * w2 + (y / 2) * w2 + xx / 2]];
                            }
                        }
                    }
                }
                self.acc(grads, *x, d);
            }
            Op::SumPool(x, geom) => {
                let area = geom.area();
                let d = Tensor::from_shape_fn(self.shape(*x), |(s, j)| g[[s, j / area]]);
                self.acc(grads, *x, d);
            }
            Op::Augment(x, geom, plans) => {
                self.acc(grads, *x, augment::apply_backward(g, *geom, plans));
            }
            Op::SpectralNorm { w, sigma, u, v } => {
                // d(W/s) = dW/s - W (u^T dW v)/s^2
                let inner = sequential_sum(&(g * self.value(*w)));
                let d = g / *sigma - &(u.dot(v) * (inner / (sigma * sigma)));
                self.acc(grads, *w, d);
            }
        }
    }
}

/// Summation in row-major order, so reductions are reproducible.
fn sequential_sum(t: &Tensor) -> f64 {
    let mut acc = 0.0;
    for v in t.iter() {
        acc += v;
    }
    acc
}

fn im2col(x: &Tensor, geom: Geom) -> Tensor {
    let n = x.nrows();
    let (h, w, c) = (geom.h as isize, geom.w as isize, geom.c);
    let area = geom.area();
    let width = c * 9;
    let mut cols = vec![0.0; n * area * width];
    let x = x.as_standard_layout();
    let xs = x.as_slice().expect("standard layout");
    for s in 0..n {
        let src = &xs[s * geom.len()..(s + 1) * geom.len()];
        for y in 0..h {
            for xx in 0..w {
                let row = (s * area + (y * w + xx) as usize) * width;
                for ci in 0..c {
                    let plane = &src[ci * area..(ci + 1) * area];
                    for ky in 0..3isize {
                        let yy = y + ky - 1;
                        if yy < 0 || yy >= h {
                            continue;
                        }
                        for kx in 0..3isize {
                            let xs2 = xx + kx - 1;
                            if xs2 < 0 || xs2 >= w {
                                continue;
                            }
                            cols[row + ci * 9 + (ky * 3 + kx) as usize] =
                                plane[(yy * w + xs2) as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_shape_vec((n * area, width), cols).expect("im2col shape")
}

fn col2im(dcols: &Tensor, n: usize, geom: Geom) -> Tensor {
    let (h, w, c) = (geom.h as isize, geom.w as isize, geom.c);
    let area = geom.area();
    let width = c * 9;
    let dcols = dcols.as_standard_layout();
    let dc = dcols.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * geom.len()];
    for s in 0..n {
        let dst = &mut out[s * geom.len()..(s + 1) * geom.len()];
        for y in 0..h {
            for xx in 0..w {
                let row = (s * area + (y * w + xx) as usize) * width;
                for ci in 0..c {
                    for ky in 0..3isize {
                        let yy = y + ky - 1;
                        if yy < 0 || yy >= h {
                            continue;
                        }
                        for kx in 0..3isize {
                            let xs2 = xx + kx - 1;
                            if xs2 < 0 || xs2 >= w {
                                continue;
                            }
                            dst[ci * area + (yy * w + xs2) as usize] +=
                                dc[row + ci * 9 + (ky * 3 + kx) as usize];
                        }
                    }
                }
            }
        }
    }
    Tensor::from_shape_vec((n, geom.len()), out).expect("col2im shape")
}
