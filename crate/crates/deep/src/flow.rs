//! Normalizing flows: planar and affine-coupling layers with exact log-densities
//! by change of variables.
//!
//! The generator direction `z_0 -> x` is "forward". Log-determinants reported by
//! [`FlowModel::forward_with_logdet`] are those of the forward maps, so
//! `log p(x) = log N(z_0) - sum(forward log-dets)`; [`FlowModel::log_likelihood`]
//! computes the same quantity from the inverse pass.

use latentlab_core::prob::softplus;
use latentlab_core::{par, Mat, RandomSource};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{minibatches, Activation, Adam, Mlp, Parameters, Tape, Tensor, TrainConfig, Var};

/// Bound on coupling log-scales: `s = S_MAX * tanh(raw / S_MAX)`.
pub const S_MAX: f64 = 5.0;

/// Root-finding tolerance and iteration budget for planar inversion.
pub const PLANAR_TOL: f64 = 1e-12;
pub const PLANAR_MAX_ITERS: usize = 100;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn std_normal_logpdf(z: &[f64]) -> f64 {
    -0.5 * (z.len() as f64 * LN_2PI + dot(z, z))
}

/// `f(z) = z + u_hat * tanh(w^T z + b)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlanarLayer {
    pub u: Vec<f64>,
    pub w: Vec<f64>,
    pub b: f64,
}

impl PlanarLayer {
    pub fn new(u: Vec<f64>, w: Vec<f64>, b: f64) -> Result<Self> {
        if u.len() != w.len() || u.is_empty() {
            return Err(shape_err(format!("planar u has {} entries, w has {}", u.len(), w.len())));
        }
        if !u.iter().chain(&w).all(|v| v.is_finite()) || !b.is_finite() {
            return Err(Error::InvalidParameter("planar parameters must be finite".into()));
        }
        Ok(Self { u, w, b })
    }

    pub fn random(d: usize, scale: f64, rng: &mut RandomSource) -> Self {
        Self { u: rng.normal_vec(d).iter().map(|v| v * scale).collect(), w: rng.normal_vec(d), b: rng.normal() }
    }

    pub fn dim(&self) -> usize {
        self.u.len()
    }

    /// `u` itself when `w^T u > -1` already holds, otherwise
    /// `u + (m(w^T u) - w^T u) w / |w|^2` with `m(a) = -1 + softplus(a)`, which
    /// guarantees `w^T u_hat > -1` and hence invertibility.
    pub fn u_hat(&self) -> Vec<f64> {
        let wu = dot(&self.w, &self.u);
        let ww = dot(&self.w, &self.w);
        if wu > -1.0 || ww == 0.0 {
            return self.u.clone();
        }
        let c = (-1.0 + softplus(wu) - wu) / ww;
        self.u.iter().zip(&self.w).map(|(u, w)| u + c * w).collect()
    }

    /// `(f(z), log |det df/dz|)` via the matrix determinant lemma.
    pub fn forward(&self, z: &[f64]) -> (Vec<f64>, f64) {
        let u = self.u_hat();
        let h = (dot(&self.w, z) + self.b).tanh();
        let x = z.iter().zip(&u).map(|(z, u)| z + u * h).collect();
        // psi = h'(a) w, det = 1 + u^T psi
        let det = 1.0 + (1.0 - h * h) * dot(&u, &self.w);
        (x, det.abs().ln())
    }

    /// Solves `f(z) = x` through the scalar `a = w^T z`, which satisfies
    /// `a + (w^T u_hat) tanh(a + b) = w^T x` and has a unique root because the
    /// left side is strictly increasing.
    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        let u = self.u_hat();
        let c = dot(&self.w, &u);
        let y = dot(&self.w, x);
        let g = |a: f64| a + c * (a + self.b).tanh() - y;
        let (mut lo, mut hi) = (y - c.abs(), y + c.abs());
        let mut a = y - c * (y + self.b).tanh();
        a = a.clamp(lo, hi);
        let tol = PLANAR_TOL * (1.0 + y.abs());
        let mut converged = false;
        for _ in 0..PLANAR_MAX_ITERS {
            let ga = g(a);
            if ga.abs() <= tol || hi - lo <= tol {
                converged = true;
                break;
            }
            if ga > 0.0 {
                hi = a;
            } else {
                lo = a;
            }
            let t = (a + self.b).tanh();
            let step = a - ga / (1.0 + c * (1.0 - t * t));
            a = if step > lo && step < hi { step } else { 0.5 * (lo + hi) };
        }
        if !converged {
            return Err(Error::NoConvergence(format!(
                "planar inversion did not reach {PLANAR_TOL:e} in {PLANAR_MAX_ITERS} iterations"
            )));
        }
        let h = (a + self.b).tanh();
        Ok(x.iter().zip(&u).map(|(x, u)| x - u * h).collect())
    }
}

/// Affine coupling: the `cond` coordinates pass through and condition the
/// transform of the rest, `x_b = z_b * exp(s(z_a)) + t(z_a)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingLayer {
    pub cond: Vec<usize>,
    pub transformed: Vec<usize>,
    pub s_net: Mlp,
    pub t_net: Mlp,
}

impl CouplingLayer {
    /// Nets with tanh hidden units and zeroed output layers, so the layer starts
    /// as the identity. `cond` may be empty (a learned elementwise affine map).
    pub fn new(d: usize, cond: Vec<usize>, hidden: &[usize], rng: &mut RandomSource) -> Result<Self> {
        let mut seen = vec![false; d];
        for &i in &cond {
            if i >= d || seen[i] {
                return Err(Error::InvalidParameter(format!("conditioning index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        let transformed: Vec<usize> = (0..d).filter(|&i| !seen[i]).collect();
        if transformed.is_empty() {
            return Err(Error::InvalidParameter("coupling layer transforms no coordinates".into()));
        }
        let dims: Vec<usize> = [&[cond.len()][..], hidden, &[transformed.len()]].concat();
        let mut s_net = Mlp::new(&dims, Activation::Tanh, Activation::Identity, rng)?;
        let mut t_net = Mlp::new(&dims, Activation::Tanh, Activation::Identity, rng)?;
        s_net.zero_output_layer();
        t_net.zero_output_layer();
        Self::from_parts(d, cond, s_net, t_net)
    }

    pub fn from_parts(d: usize, cond: Vec<usize>, s_net: Mlp, t_net: Mlp) -> Result<Self> {
        let mut seen = vec![false; d];
        for &i in &cond {
            if i >= d || seen[i] {
                return Err(Error::InvalidParameter(format!("conditioning index {i} repeated or out of range")));
            }
            seen[i] = true;
        }
        let transformed: Vec<usize> = (0..d).filter(|&i| !seen[i]).collect();
        for net in [&s_net, &t_net] {
            if net.input_dim() != cond.len() || net.output_dim() != transformed.len() {
                return Err(shape_err(format!(
                    "coupling net maps {} -> {}, expected {} -> {}",
                    net.input_dim(),
                    net.output_dim(),
                    cond.len(),
                    transformed.len()
                )));
            }
        }
        Ok(Self { cond, transformed, s_net, t_net })
    }

    pub fn dim(&self) -> usize {
        self.cond.len() + self.transformed.len()
    }

    /// Bounded log-scales and shifts for a batch of conditioning rows.
    fn scale_shift(&self, za: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = self.s_net.forward(za)?.map(|r| S_MAX * (r / S_MAX).tanh());
        let t = self.t_net.forward(za)?;
        Ok((s, t))
    }

    pub fn forward_batch(&self, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let za = z.select_cols(&self.cond);
        let (s, t) = self.scale_shift(&za)?;
        let mut x = z.clone();
        let mut logdet = vec![0.0; z.rows()];
        for i in 0..z.rows() {
            for (k, &j) in self.transformed.iter().enumerate() {
                x[(i, j)] = z[(i, j)] * s[(i, k)].exp() + t[(i, k)];
                logdet[i] += s[(i, k)];
            }
        }
        Ok((x, logdet))
    }

    /// Returns `z` and the log-determinant of the inverse map.
    pub fn inverse_batch(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let xa = x.select_cols(&self.cond);
        let (s, t) = self.scale_shift(&xa)?;
        let mut z = x.clone();
        let mut logdet = vec![0.0; x.rows()];
        for i in 0..x.rows() {
            for (k, &j) in self.transformed.iter().enumerate() {
                z[(i, j)] = (x[(i, j)] - t[(i, k)]) * (-s[(i, k)]).exp();
                logdet[i] -= s[(i, k)];
            }
        }
        Ok((z, logdet))
    }

    /// Inverse pass on a tape; returns `(z, per-row inverse log-det)`.
    fn inverse_on(&self, tape: &mut Tape, vars: &[Var], x: Var) -> (Var, Var) {
        let ns = self.s_net.params().len();
        let xa = tape.select_cols(x, &self.cond);
        let xb = tape.select_cols(x, &self.transformed);
        let raw = self.s_net.forward_on(tape, &vars[..ns], xa);
        let r = tape.scale(raw, 1.0 / S_MAX);
        let r = tape.tanh(r);
        let s = tape.scale(r, S_MAX);
        let t = self.t_net.forward_on(tape, &vars[ns..], xa);
        let diff = tape.sub(xb, t);
        let neg = tape.scale(s, -1.0);
        let inv = tape.exp(neg);
        let zb = tape.mul(diff, inv);
        let joined = tape.concat_cols(xa, zb);
        let mut pos = vec![0; self.dim()];
        for (k, &i) in self.cond.iter().chain(&self.transformed).enumerate() {
            pos[i] = k;
        }
        let z = tape.select_cols(joined, &pos);
        let ld = tape.row_sum(neg);
        (z, ld)
    }
}

impl Parameters for CouplingLayer {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.s_net.params();
        p.extend(self.t_net.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.s_net.params_mut();
        p.extend(self.t_net.params_mut());
        p
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FlowLayer {
    Planar(PlanarLayer),
    Coupling(CouplingLayer),
    /// Fixed reordering `x[i] = z[perm[i]]`.
    Permute { perm: Vec<usize> },
}

impl FlowLayer {
    fn dim(&self) -> usize {
        match self {
            FlowLayer::Planar(p) => p.dim(),
            FlowLayer::Coupling(c) => c.dim(),
            FlowLayer::Permute { perm } => perm.len(),
        }
    }

    /// `(f(z), log |det df/dz|)` for a batch.
    fn forward_batch(&self, z: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        match self {
            FlowLayer::Planar(p) => {
                let mut x = z.clone();
                let mut ld = Vec::with_capacity(z.rows());
                for i in 0..z.rows() {
                    let (xi, l) = p.forward(z.row(i));
                    for (j, v) in xi.into_iter().enumerate() {
                        x[(i, j)] = v;
                    }
                    ld.push(l);
                }
                Ok((x, ld))
            }
            FlowLayer::Coupling(c) => c.forward_batch(z),
            FlowLayer::Permute { perm } => Ok((z.select_cols(perm), vec![0.0; z.rows()])),
        }
    }

    /// `(f^{-1}(x), log |det df^{-1}/dx|)` for a batch.
    fn inverse_batch(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        match self {
            FlowLayer::Planar(p) => {
                let mut z = x.clone();
                let mut ld = Vec::with_capacity(x.rows());
                for i in 0..x.rows() {
                    let zi = p.inverse(x.row(i))?;
                    ld.push(-p.forward(&zi).1);
                    for (j, v) in zi.into_iter().enumerate() {
                        z[(i, j)] = v;
                    }
                }
                Ok((z, ld))
            }
            FlowLayer::Coupling(c) => c.inverse_batch(x),
            FlowLayer::Permute { perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                Ok((x.select_cols(&inv), vec![0.0; x.rows()]))
            }
        }
    }
}

/// `x = f_K o ... o f_1(z_0)` with `z_0 ~ N(0, I_d)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowModel {
    pub dim: usize,
    pub layers: Vec<FlowLayer>,
}

impl FlowModel {
    pub fn new(dim: usize, layers: Vec<FlowLayer>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("flow dimension must be positive".into()));
        }
        for (k, l) in layers.iter().enumerate() {
            if l.dim() != dim {
                return Err(shape_err(format!("layer {k} has dimension {}, flow has {dim}", l.dim())));
            }
            if let FlowLayer::Permute { perm } = l {
                let mut seen = vec![false; dim];
                for &p in perm {
                    if p >= dim || std::mem::replace(&mut seen[p], true) {
                        return Err(Error::InvalidParameter(format!("layer {k} is not a permutation")));
                    }
                }
            }
        }
        Ok(Self { dim, layers })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        Self::new(dim, Vec::new())
    }

    /// `n` coupling layers, each conditioning on the first `dim / 2` working
    /// coordinates, with a reversal between consecutive layers. In data
    /// coordinates the conditioning half therefore alternates layer to layer.
    pub fn coupling_stack(dim: usize, n: usize, hidden: &[usize], rng: &mut RandomSource) -> Result<Self> {
        let mut layers = Vec::new();
        for k in 0..n {
            if k > 0 {
                layers.push(FlowLayer::Permute { perm: (0..dim).rev().collect() });
            }
            let cond = (0..dim / 2).collect();
            layers.push(FlowLayer::Coupling(CouplingLayer::new(dim, cond, hidden, rng)?));
        }
        Self::new(dim, layers)
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim {
            return Err(shape_err(format!("input has {n} dims, flow has {}", self.dim)));
        }
        Ok(())
    }

    /// Whether every layer has trainable parameters or none at all.
    pub fn is_trainable(&self) -> bool {
        !self.layers.iter().any(|l| matches!(l, FlowLayer::Planar(_)))
    }

    /// `(x, sum_k log |det df_k/dz_{k-1}|)`.
    pub fn forward_with_logdet(&self, z0: &[f64]) -> Result<(Vec<f64>, f64)> {
        let lds = self.layer_logdets(z0)?;
        Ok((lds.0, lds.1.iter().sum()))
    }

    /// Output and each layer's forward log-determinant.
    pub fn layer_logdets(&self, z0: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dim(z0.len())?;
        let mut z = Tensor::row_vector(z0);
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (x, ld) = l.forward_batch(&z)?;
            out.push(ld[0]);
            z = x;
        }
        Ok((z.as_slice().to_vec(), out))
    }

    /// `z_0` together with the total inverse log-determinant.
    pub fn inverse_with_logdet(&self, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        self.check_dim(x.len())?;
        let (z, ld) = self.inverse_batch(&Tensor::row_vector(x))?;
        Ok((z.as_slice().to_vec(), ld[0]))
    }

    fn inverse_batch(&self, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut z = x.clone();
        let mut total = vec![0.0; x.rows()];
        for l in self.layers.iter().rev() {
            let (prev, ld) = l.inverse_batch(&z)?;
            for (t, v) in total.iter_mut().zip(ld) {
                *t += v;
            }
            z = prev;
        }
        Ok((z, total))
    }

    pub fn inverse(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.inverse_with_logdet(x)?.0)
    }

    /// `log p_Z(f^{-1}(x)) + log |det d f^{-1} / dx|`.
    pub fn log_likelihood(&self, x: &[f64]) -> Result<f64> {
        let (z, ld) = self.inverse_with_logdet(x)?;
        Ok(std_normal_logpdf(&z) + ld)
    }

    /// Forward bookkeeping: `(x, log N(z_0) - sum forward log-dets)`.
    pub fn log_likelihood_forward(&self, z0: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (x, ld) = self.forward_with_logdet(z0)?;
        Ok((x, std_normal_logpdf(z0) - ld))
    }

    /// Per-row log-likelihoods, evaluated in parallel.
    pub fn pointwise_loglik(&self, data: &Mat) -> Result<Vec<f64>> {
        self.check_dim(data.cols())?;
        par::try_map_range(data.rows(), |i| self.log_likelihood(data.row(i)))
    }

    /// The posterior over `z_0` is a point mass at the inverse; this returns it
    /// for every row.
    pub fn encode(&self, data: &Mat) -> Result<Mat> {
        self.check_dim(data.cols())?;
        let (z, _) = self.inverse_batch(&Tensor::from_mat(data))?;
        z.to_mat()
    }

    pub fn sample(&self, n: usize, rng: &mut RandomSource) -> Result<Mat> {
        let mut z = Tensor::from_fn(n, self.dim, |_, _| rng.normal());
        for l in &self.layers {
            z = l.forward_batch(&z)?.0;
        }
        z.to_mat()
    }

    fn require_trainable(&self) -> Result<()> {
        if !self.is_trainable() {
            return Err(Error::InvalidParameter(
                "planar layers are evaluation-only; gradient fitting needs coupling and permutation layers".into(),
            ));
        }
        Ok(())
    }

    /// Mean log-likelihood of the rows of `x` on a tape.
    fn mean_loglik_on(&self, tape: &mut Tape, vars: &[Var], x: &Tensor) -> Var {
        let mut z = tape.leaf(x.clone());
        let mut total: Option<Var> = None;
        let mut offset = vars.len();
        for l in self.layers.iter().rev() {
            match l {
                FlowLayer::Coupling(c) => {
                    let np = c.params().len();
                    offset -= np;
                    let (prev, ld) = c.inverse_on(tape, &vars[offset..offset + np], z);
                    total = Some(match total {
                        Some(t) => tape.add(t, ld),
                        None => ld,
                    });
                    z = prev;
                }
                FlowLayer::Permute { perm } => {
                    let mut inv = vec![0; perm.len()];
                    for (i, &p) in perm.iter().enumerate() {
                        inv[p] = i;
                    }
                    z = tape.select_cols(z, &inv);
                }
                FlowLayer::Planar(_) => unreachable!("checked by require_trainable"),
            }
        }
        let zero = tape.leaf(Tensor::scalar(0.0));
        let base = tape.gaussian_logpdf(z, zero, zero);
        let per = match total {
            Some(t) => tape.add(base, t),
            None => base,
        };
        tape.mean(per)
    }

    /// Mean log-likelihood of `data` and its gradient in
    /// [`Parameters::params`] order.
    pub fn loglik_gradient(&self, data: &Mat) -> Result<(f64, Vec<Tensor>)> {
        self.require_trainable()?;
        self.check_dim(data.cols())?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let ll = self.mean_loglik_on(&mut tape, &vars, &Tensor::from_mat(data));
        tape.backward(ll)?;
        Ok((tape.value(ll).item(), vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()))
    }

    /// Maximum likelihood by minibatch Adam. Returns the mean log-likelihood of
    /// each epoch.
    pub fn fit(&mut self, data: &Mat, cfg: &TrainConfig, rng: &mut RandomSource) -> Result<Vec<f64>> {
        cfg.validate()?;
        self.require_trainable()?;
        self.check_dim(data.cols())?;
        if data.rows() == 0 {
            return Err(Error::InvalidData("no training rows".into()));
        }
        let x_all = Tensor::from_mat(data);
        let mut opt = Adam::new(cfg.adam, &self.params());
        let mut tape = Tape::new();
        let mut trace = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut total = 0.0;
            for idx in minibatches(data.rows(), cfg.batch, rng) {
                tape.reset();
                let vars = self.bind(&mut tape);
                let ll = self.mean_loglik_on(&mut tape, &vars, &x_all.select_rows(&idx));
                let value = tape.value(ll).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, what: "log-likelihood".into() });
                }
                total += value * idx.len() as f64;
                let loss = tape.scale(ll, -1.0);
                tape.backward(loss)?;
                crate::nn::apply_grads(self, &mut opt, &tape, &vars);
            }
            trace.push(total / data.rows() as f64);
        }
        Ok(trace)
    }
}

impl Parameters for FlowModel {
    fn params(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                FlowLayer::Coupling(c) => c.params(),
                _ => Vec::new(),
            })
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| match l {
                FlowLayer::Coupling(c) => c.params_mut(),
                _ => Vec::new(),
            })
            .collect()
    }
}
