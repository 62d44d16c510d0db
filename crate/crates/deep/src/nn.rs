//! Reverse-mode automatic differentiation over dense 2-d tensors, feed-forward
//! networks and the Adam optimizer.
//!
//! A [`Tape`] records every operation applied to its [`Var`] handles. After a
//! single call to [`Tape::backward`] the gradient of the scalar loss with respect
//! to every recorded node is available through [`Tape::grad`]. Binary
//! elementwise ops broadcast operands whose row or column count is 1.

use latentlab_core::prob::{sigmoid, softplus};
use latentlab_core::{Mat, RandomSource};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// Row-major 2-d array of `f64`. Unlike [`Mat`] it may hold infinities, which
/// the autoregressive model uses to encode deterministic conditionals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn scalar(v: f64) -> Self {
        Self::filled(1, 1, v)
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(format!("{} values for a {rows}x{cols} tensor", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self { rows: 1, cols: v.len(), data: v.to_vec() }
    }

    pub fn from_mat(m: &Mat) -> Self {
        Self { rows: m.rows(), cols: m.cols(), data: m.as_slice().to_vec() }
    }

    /// Fails on non-finite entries.
    pub fn to_mat(&self) -> Result<Mat> {
        Ok(Mat::from_vec(self.rows, self.cols, self.data.clone())?)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// The single entry of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "item() on a {}x{} tensor", self.rows, self.cols);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Tensor { rows: idx.len(), cols: self.cols, data }
    }

    pub fn select_cols(&self, idx: &[usize]) -> Tensor {
        Tensor::from_fn(self.rows, idx.len(), |i, k| self[(i, idx[k])])
    }

    pub fn concat_cols(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows, "concat: row counts differ");
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Tensor { rows: self.rows, cols, data }
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul: {}x{} times {}x{}", self.rows, self.cols, other.rows, other.cols);
        let mut out = Tensor::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let o = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                for (o, &b) in o.iter_mut().zip(&other.data[k * other.cols..(k + 1) * other.cols]) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self^T * other`.
    fn t_matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows);
        let mut out = Tensor::zeros(self.cols, other.cols);
        for r in 0..self.rows {
            let b = other.row(r);
            for (k, &a) in self.row(r).iter().enumerate() {
                for (o, &bv) in out.data[k * other.cols..(k + 1) * other.cols].iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    /// `self * other^T`.
    fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols);
        Tensor::from_fn(self.rows, other.rows, |i, j| self.row(i).iter().zip(other.row(j)).map(|(a, b)| a * b).sum())
    }
}

impl std::ops::Index<(usize, usize)> for Tensor {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Tensor {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    LogSoftmax(Var, usize),
    SelectCols(Var, Vec<usize>),
    Concat(Var, Var),
    Gather(Var, Vec<usize>),
}

/// Records operations for one forward pass and one backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Tensor>>,
    done: bool,
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize, what: &str| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("cannot broadcast {what}: {a:?} with {b:?}")
        }
    };
    (dim(a.0, b.0, "rows"), dim(a.1, b.1, "columns"))
}

/// Sums a full-shape gradient down to a possibly broadcast operand shape.
fn reduce_to(g: &Tensor, shape: (usize, usize)) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for i in 0..g.rows {
        for j in 0..g.cols {
            out[(i % shape.0, j % shape.1)] += g[(i, j)];
        }
    }
    out
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (r, c) = broadcast_shape(a.shape(), b.shape());
    Tensor::from_fn(r, c, |i, j| f(a[(i % a.rows, j % a.cols)], b[(i % b.rows, j % b.cols)]))
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Row-wise log-softmax over consecutive groups of `group` columns.
fn log_softmax_value(a: &Tensor, group: usize) -> Tensor {
    assert!(group > 0 && a.cols % group == 0, "log_softmax: {} columns in groups of {group}", a.cols);
    let mut out = a.clone();
    for chunk in out.data.chunks_mut(group) {
        let m = chunk.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + chunk.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for v in chunk.iter_mut() {
            *v -= lse;
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Clears all nodes and gradients so the tape can be reused.
    pub fn reset(&mut self) {
        self.values.clear();
        self.ops.clear();
        self.grads.clear();
        self.done = false;
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    /// Inputs, parameters and constants are all leaves.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Gradient of the loss passed to [`Tape::backward`]; `None` before backward
    /// or for nodes the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient, or zeros of the right shape.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| {
            let (r, c) = self.values[v.0].shape();
            Tensor::zeros(r, c)
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip_broadcast(self.value(a), self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Elementwise product with a constant 0/1 mask.
    pub fn mask(&mut self, a: Var, mask: &Tensor) -> Var {
        let m = self.leaf(mask.clone());
        self.mul(a, m)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn shift(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::Shift(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(relu);
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let v = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(v, Op::Clamp(a, lo, hi))
    }

    /// Sum of all entries, as a 1x1 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Per-row sums, as an `n x 1` tensor.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::from_fn(t.rows, 1, |i, _| t.row(i).iter().sum());
        self.push(v, Op::RowSum(a))
    }

    /// Log-softmax within each row over consecutive blocks of `group` columns.
    pub fn log_softmax(&mut self, a: Var, group: usize) -> Var {
        let v = log_softmax_value(self.value(a), group);
        self.push(v, Op::LogSoftmax(a, group))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Var {
        let v = self.value(a).select_cols(idx);
        self.push(v, Op::SelectCols(a, idx.to_vec()))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).concat_cols(self.value(b));
        self.push(v, Op::Concat(a, b))
    }

    /// Picks `k = idx.len() / rows` columns per row: `out[i][j] = a[i][idx[i*k + j]]`.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        assert!(t.rows > 0 && idx.len() % t.rows == 0, "gather: {} indices for {} rows", idx.len(), t.rows);
        let k = idx.len() / t.rows;
        let v = Tensor::from_fn(t.rows, k, |i, j| t[(i, idx[i * k + j])]);
        self.push(v, Op::Gather(a, idx.to_vec()))
    }

    /// Per-row diagonal Gaussian log-density `log N(x; mu, exp(logvar))`, as an
    /// `n x 1` tensor. `mu` and `logvar` broadcast against `x`.
    pub fn gaussian_logpdf(&mut self, x: Var, mu: Var, logvar: Var) -> Var {
        let d = self.value(x).cols;
        let diff = self.sub(x, mu);
        let sq = self.square(diff);
        let neg = self.scale(logvar, -1.0);
        let prec = self.exp(neg);
        let quad = self.mul(sq, prec);
        let full = self.add(quad, logvar);
        let s = self.row_sum(full);
        let s = self.scale(s, -0.5);
        self.shift(s, -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Populates gradients of the 1x1 node `loss` with respect to every node.
    /// A second call without [`Tape::reset`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.done {
            return Err(Error::Tape("backward called twice without reset".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            let (r, c) = self.value(loss).shape();
            return Err(Error::Tape(format!("loss must be a scalar, got {r}x{c}")));
        }
        self.done = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for n in (0..=loss.0).rev() {
            let Some(g) = grads[n].take() else { continue };
            self.propagate(n, &g, &mut grads);
            grads[n] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, n: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let acc = |grads: &mut [Option<Tensor>], v: Var, d: Tensor| match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data.iter_mut().zip(&d.data) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(d),
        };
        let val = |v: Var| &self.values[v.0];
        let out = &self.values[n];
        let elementwise = |a: Var, f: &dyn Fn(f64, f64) -> f64| {
            let x = val(a);
            Tensor {
                rows: x.rows,
                cols: x.cols,
                data: x.data.iter().zip(&out.data).zip(&g.data).map(|((&x, &y), &g)| g * f(x, y)).collect(),
            }
        };
        match &self.ops[n] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(grads, *a, g.matmul_t(val(*b)));
                acc(grads, *b, val(*a).t_matmul(g));
            }
            Op::Add(a, b) => {
                acc(grads, *a, reduce_to(g, val(*a).shape()));
                acc(grads, *b, reduce_to(g, val(*b).shape()));
            }
            Op::Sub(a, b) => {
                acc(grads, *a, reduce_to(g, val(*a).shape()));
                acc(grads, *b, reduce_to(&g.map(|x| -x), val(*b).shape()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let ga = Tensor::from_fn(g.rows, g.cols, |i, j| g[(i, j)] * tb[(i % tb.rows, j % tb.cols)]);
                let gb = Tensor::from_fn(g.rows, g.cols, |i, j| g[(i, j)] * ta[(i % ta.rows, j % ta.cols)]);
                acc(grads, *a, reduce_to(&ga, ta.shape()));
                acc(grads, *b, reduce_to(&gb, tb.shape()));
            }
            Op::Scale(a, s) => acc(grads, *a, g.map(|x| x * s)),
            Op::Shift(a) => acc(grads, *a, g.clone()),
            Op::Tanh(a) => acc(grads, *a, elementwise(*a, &|_, y| 1.0 - y * y)),
            Op::Relu(a) => acc(grads, *a, elementwise(*a, &|x, _| if x > 0.0 { 1.0 } else { 0.0 })),
            Op::Sigmoid(a) => acc(grads, *a, elementwise(*a, &|_, y| y * (1.0 - y))),
            Op::Softplus(a) => acc(grads, *a, elementwise(*a, &|x, _| sigmoid(x))),
            Op::Exp(a) => acc(grads, *a, elementwise(*a, &|_, y| y)),
            Op::Log(a) => acc(grads, *a, elementwise(*a, &|x, _| 1.0 / x)),
            Op::Square(a) => acc(grads, *a, elementwise(*a, &|x, _| 2.0 * x)),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                acc(grads, *a, elementwise(*a, &|x, _| if x >= lo && x <= hi { 1.0 } else { 0.0 }));
            }
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Tensor::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::RowSum(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Tensor::from_fn(r, c, |i, _| g[(i, 0)]));
            }
            Op::LogSoftmax(a, group) => {
                let mut d = g.clone();
                for (dc, yc) in d.data.chunks_mut(*group).zip(out.data.chunks(*group)) {
                    let s: f64 = dc.iter().sum();
                    for (dv, &y) in dc.iter_mut().zip(yc) {
                        *dv -= y.exp() * s;
                    }
                }
                acc(grads, *a, d);
            }
            Op::SelectCols(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    for (k, &j) in idx.iter().enumerate() {
                        d[(i, j)] += g[(i, k)];
                    }
                }
                acc(grads, *a, d);
            }
            Op::Concat(a, b) => {
                let ca = val(*a).cols;
                let cb = val(*b).cols;
                acc(grads, *a, Tensor::from_fn(g.rows, ca, |i, j| g[(i, j)]));
                acc(grads, *b, Tensor::from_fn(g.rows, cb, |i, j| g[(i, ca + j)]));
            }
            Op::Gather(a, idx) => {
                let (r, c) = val(*a).shape();
                let k = idx.len() / r;
                let mut d = Tensor::zeros(r, c);
                for i in 0..r {
                    for j in 0..k {
                        d[(i, idx[i * k + j])] += g[(i, j)];
                    }
                }
                acc(grads, *a, d);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => relu(x),
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
        }
    }

    fn on_tape(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Tanh => tape.tanh(v),
            Activation::Relu => tape.relu(v),
            Activation::Identity => v,
            Activation::Sigmoid => tape.sigmoid(v),
            Activation::Softplus => tape.softplus(v),
        }
    }
}

/// Affine layer `act(x W + b)` with `W` of shape `in x out` and an optional
/// constant 0/1 mask multiplied into `W`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: Tensor,
    pub b: Tensor,
    pub act: Activation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<Tensor>,
}

impl Dense {
    fn effective_weights(&self) -> Tensor {
        match &self.mask {
            Some(m) => Tensor {
                rows: self.w.rows,
                cols: self.w.cols,
                data: self.w.data.iter().zip(&m.data).map(|(w, m)| w * m).collect(),
            },
            None => self.w.clone(),
        }
    }
}

/// Types owning trainable tensors, listed in a fixed order.
pub trait Parameters {
    fn params(&self) -> Vec<&Tensor>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn n_params(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Records every parameter as a tape leaf, in [`Parameters::params`] order.
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }
}

/// Feed-forward network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Glorot-uniform weights `U(+-sqrt(6 / (fan_in + fan_out)))` and zero biases.
    /// `hidden` is applied after every layer but the last, which uses `output`.
    pub fn new(dims: &[usize], hidden: Activation, output: Activation, rng: &mut RandomSource) -> Result<Self> {
        let mut m = Self::zeros(dims, hidden, output)?;
        for l in &mut m.layers {
            let bound = (6.0 / (l.w.rows + l.w.cols) as f64).sqrt();
            for w in &mut l.w.data {
                *w = bound * (2.0 * rng.uniform() - 1.0);
            }
        }
        Ok(m)
    }

    pub fn zeros(dims: &[usize], hidden: Activation, output: Activation) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidParameter("an MLP needs at least input and output dims".into()));
        }
        if dims[1..].contains(&0) {
            return Err(Error::InvalidParameter(format!("zero-width layer in {dims:?}")));
        }
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| Dense {
                w: Tensor::zeros(dims[i], dims[i + 1]),
                b: Tensor::zeros(1, dims[i + 1]),
                act: if i + 1 == n { output } else { hidden },
                mask: None,
            })
            .collect();
        Ok(Self { layers })
    }

    /// Attaches one mask per layer; each must match its weight shape.
    pub fn with_masks(mut self, masks: Vec<Tensor>) -> Result<Self> {
        if masks.len() != self.layers.len() {
            return Err(shape_err(format!("{} masks for {} layers", masks.len(), self.layers.len())));
        }
        for (i, (l, m)) in self.layers.iter_mut().zip(masks).enumerate() {
            if m.shape() != l.w.shape() {
                return Err(shape_err(format!("mask {i} is {:?}, weights are {:?}", m.shape(), l.w.shape())));
            }
            l.mask = Some(m);
        }
        Ok(self)
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].w.cols
    }

    /// Zeroes the last layer, so the network outputs `act(0)` everywhere.
    pub fn zero_output_layer(&mut self) {
        let l = self.layers.last_mut().expect("non-empty");
        l.w.data.fill(0.0);
        l.b.data.fill(0.0);
    }

    /// Value-only forward pass on an `n x input_dim` batch.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x.cols)?;
        let mut h = x.clone();
        for l in &self.layers {
            let w = l.effective_weights();
            let mut z = h.matmul(&w);
            for i in 0..z.rows {
                for j in 0..z.cols {
                    z[(i, j)] = l.act.apply(z[(i, j)] + l.b.data[j]);
                }
            }
            h = z;
        }
        Ok(h)
    }

    /// Forward pass on a tape using parameter handles from [`Parameters::bind`].
    pub fn forward_on(&self, tape: &mut Tape, params: &[Var], x: Var) -> Var {
        assert_eq!(params.len(), 2 * self.layers.len(), "parameter handles do not match the network");
        let mut h = x;
        for (l, p) in self.layers.iter().zip(params.chunks(2)) {
            let w = match &l.mask {
                Some(m) => tape.mask(p[0], m),
                None => p[0],
            };
            let z = tape.matmul(h, w);
            let z = tape.add(z, p[1]);
            h = l.act.on_tape(tape, z);
        }
        h
    }

    pub fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.input_dim() {
            return Err(shape_err(format!("input has {cols} columns, network expects {}", self.input_dim())));
        }
        Ok(())
    }
}

impl Parameters for Mlp {
    fn params(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad optimizer settings {self:?}")))
        }
    }
}

/// Adam with bias-corrected first and second moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        let zeros = || params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Descends along `grads`; negate them to ascend.
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) {
        assert_eq!(params.len(), self.m.len(), "optimizer built for a different parameter list");
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            assert_eq!(p.len(), g.len(), "gradient shape");
            for (((p, &g), m), v) in p.data.iter_mut().zip(&g.data).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
    }
}

/// Epoch count, minibatch size and optimizer settings shared by the neural models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 100, batch: 64, adam: AdamConfig::default() }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidParameter("batch size must be positive".into()));
        }
        self.adam.validate()
    }
}

/// Shuffled minibatch index lists covering `0..n` once.
pub fn minibatches(n: usize, batch: usize, rng: &mut RandomSource) -> Vec<Vec<usize>> {
    let perm = rng.permutation(n);
    perm.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

/// One optimizer step on `model` from gradients read off `tape`.
pub(crate) fn apply_grads<P: Parameters + ?Sized>(model: &mut P, opt: &mut Adam, tape: &Tape, vars: &[Var]) {
    let grads: Vec<Tensor> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();
    opt.step(model.params_mut(), &grads);
}
