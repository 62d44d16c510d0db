//! Denoising diffusion with a fixed Gaussian noising chain, epsilon-prediction
//! training and ancestral sampling.
//!
//! Steps are 1-based: `t` runs over `1..=T`, and `alpha_bar(0) = 1` so the
//! first reverse step is deterministic.

use latentlab_core::{Mat, RandomSource};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{minibatches, Activation, Adam, Mlp, Parameters, Tape, Tensor, TrainConfig};

/// Columns added to the network input by [`time_embedding`].
pub const EMBED_DIM: usize = 5;

pub const DEFAULT_STEPS: usize = 50;
/// Upper bound on the betas of [`NoiseSchedule::default_for`].
pub const MAX_DEFAULT_BETA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRepr", into = "ScheduleRepr")]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ScheduleRepr {
    betas: Vec<f64>,
}

impl TryFrom<ScheduleRepr> for NoiseSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRepr) -> Result<Self> {
        Self::from_betas(r.betas)
    }
}

impl From<NoiseSchedule> for ScheduleRepr {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleRepr { betas: s.betas }
    }
}

impl NoiseSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        if let Some(t) = betas.iter().position(|b| !(*b > 0.0 && *b < 1.0)) {
            return Err(Error::InvalidParameter(format!("beta at step {} is {} (needs 0 < beta < 1)", t + 1, betas[t])));
        }
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut a = 1.0;
        for b in &betas {
            a *= 1.0 - b;
            alpha_bars.push(a);
        }
        Ok(Self { betas, alpha_bars })
    }

    /// Betas spaced linearly from `start` to `end` over `steps` steps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidParameter("schedule needs at least one step".into()));
        }
        let betas = (0..steps)
            .map(|i| if steps == 1 { start } else { start + (end - start) * i as f64 / (steps - 1) as f64 })
            .collect();
        Self::from_betas(betas)
    }

    /// The common 1e-4..0.02 linear schedule, rescaled by `1000 / steps` so a
    /// short chain still ends near pure noise. Betas are capped at 1/2: the
    /// reverse mean divides by `sqrt(1 - beta_t)`, and a beta near one turns
    /// small noise-prediction errors into huge sample values.
    pub fn default_for(steps: usize) -> Result<Self> {
        let k = 1000.0 / steps.max(1) as f64;
        Self::linear(steps, (1e-4 * k).min(MAX_DEFAULT_BETA), (0.02 * k).min(MAX_DEFAULT_BETA))
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidParameter(format!("step {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bars[t - 1]
        }
    }

    /// `beta_tilde_t = (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        let denom = 1.0 - self.alpha_bar(t);
        if denom == 0.0 {
            return 0.0;
        }
        (1.0 - self.alpha_bar(t - 1)) / denom * self.beta(t)
    }

    /// Weights `(c0, ct)` with `mu_tilde = c0 x_0 + ct x_t`.
    fn posterior_coefs(&self, t: usize) -> (f64, f64) {
        let (ab, ab_prev, b) = (self.alpha_bar(t), self.alpha_bar(t - 1), self.beta(t));
        let denom = 1.0 - ab;
        if denom == 0.0 {
            // noiseless chain: x_t = x_0
            return (1.0, 0.0);
        }
        (ab_prev.sqrt() * b / denom, (1.0 - b).sqrt() * (1.0 - ab_prev) / denom)
    }
}

/// `[t/T, sin 2 pi t/T, cos 2 pi t/T, sin 4 pi t/T, cos 4 pi t/T]`.
pub fn time_embedding(t: usize, steps: usize) -> [f64; EMBED_DIM] {
    let s = t as f64 / steps as f64;
    let w = 2.0 * std::f64::consts::PI * s;
    [s, w.sin(), w.cos(), (2.0 * w).sin(), (2.0 * w).cos()]
}

/// `x_t = sqrt(alpha_bar_t) x_0 + sqrt(1 - alpha_bar_t) eps`; returns `(x_t, eps)`.
pub fn q_sample(s: &NoiseSchedule, x0: &[f64], t: usize, rng: &mut RandomSource) -> Result<(Vec<f64>, Vec<f64>)> {
    s.check_step(t)?;
    let eps = rng.normal_vec(x0.len());
    let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
    Ok((x0.iter().zip(&eps).map(|(x, e)| a * x + b * e).collect(), eps))
}

/// One step of the forward chain, `q(x_t | x_{t-1})`.
pub fn q_step(s: &NoiseSchedule, x_prev: &[f64], t: usize, rng: &mut RandomSource) -> Result<Vec<f64>> {
    s.check_step(t)?;
    let b = s.beta(t);
    Ok(x_prev.iter().map(|x| (1.0 - b).sqrt() * x + b.sqrt() * rng.normal()).collect())
}

/// Mean and variance of `q(x_{t-1} | x_t, x_0)`.
pub fn posterior_params(s: &NoiseSchedule, x_t: &[f64], x0: &[f64], t: usize) -> Result<(Vec<f64>, f64)> {
    s.check_step(t)?;
    if x_t.len() != x0.len() {
        return Err(shape_err("x_t and x_0 differ in length"));
    }
    let (c0, ct) = s.posterior_coefs(t);
    Ok((x0.iter().zip(x_t).map(|(a, b)| c0 * a + ct * b).collect(), s.posterior_variance(t)))
}

/// Reverse-step mean obtained by substituting
/// `x0_hat = (x_t - sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_bar_t)` into the
/// posterior mean.
pub fn predicted_mean(s: &NoiseSchedule, x_t: &[f64], eps_hat: &[f64], t: usize) -> Vec<f64> {
    let (a, b) = (s.alpha_bar(t).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
    let (c0, ct) = s.posterior_coefs(t);
    x_t.iter().zip(eps_hat).map(|(x, e)| c0 * (x - b * e) / a + ct * x).collect()
}

/// Anything that predicts the injected noise from `(x_t, t)`, row by row.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Mat, t: &[usize]) -> Result<Mat>;
}

/// One KL term per step, `KL(q(x_{t-1} | x_t, x_0) || p(x_{t-1} | x_t))` with both
/// variances equal to `beta_tilde_t`, i.e. `|mu_tilde - mu_theta|^2 / (2 beta_tilde_t)`.
/// At `t = 1` the posterior is a point mass, and the term uses `beta_1` in place
/// of the zero `beta_tilde_1`.
pub fn elbo_terms(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    x0: &[f64],
    rng: &mut RandomSource,
) -> Result<Vec<f64>> {
    let steps = s.steps();
    let mut xt_rows = Vec::with_capacity(steps);
    for t in 1..=steps {
        xt_rows.push(q_sample(s, x0, t, rng)?.0);
    }
    let xt = Mat::from_rows(&xt_rows)?;
    let ts: Vec<usize> = (1..=steps).collect();
    let eps = pred.predict_noise(&xt, &ts)?;
    let mut terms = Vec::with_capacity(steps);
    for t in 1..=steps {
        let (mu, var) = posterior_params(s, xt.row(t - 1), x0, t)?;
        let m = predicted_mean(s, xt.row(t - 1), eps.row(t - 1), t);
        let var = if t == 1 { s.beta(1) } else { var };
        let sq: f64 = mu.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum();
        terms.push(if sq == 0.0 { 0.0 } else { sq / (2.0 * var) });
    }
    Ok(terms)
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`; the last step adds no noise.
pub fn sample_with(
    pred: &dyn NoisePredictor,
    s: &NoiseSchedule,
    dim: usize,
    n: usize,
    rng: &mut RandomSource,
) -> Result<Mat> {
    let mut x = Mat::from_fn(n, dim, |_, _| rng.normal());
    for t in (1..=s.steps()).rev() {
        let eps = pred.predict_noise(&x, &vec![t; n])?;
        let sd = if t > 1 { s.posterior_variance(t).sqrt() } else { 0.0 };
        let mut next = Mat::zeros(n, dim);
        for i in 0..n {
            let m = predicted_mean(s, x.row(i), eps.row(i), t);
            for (j, v) in m.into_iter().enumerate() {
                next[(i, j)] = if t > 1 { v + sd * rng.normal() } else { v };
            }
        }
        x = next;
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub schedule: NoiseSchedule,
    /// Maps `[x_t, time_embedding(t)]` to the predicted noise.
    pub eps_net: Mlp,
    pub dim: usize,
}

impl DiffusionModel {
    pub fn new(dim: usize, schedule: NoiseSchedule, hidden: &[usize], rng: &mut RandomSource) -> Result<Self> {
        let dims: Vec<usize> = [&[dim + EMBED_DIM][..], hidden, &[dim]].concat();
        Self::from_parts(dim, schedule, Mlp::new(&dims, Activation::Tanh, Activation::Identity, rng)?)
    }

    pub fn from_parts(dim: usize, schedule: NoiseSchedule, eps_net: Mlp) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("data dimension must be positive".into()));
        }
        if eps_net.input_dim() != dim + EMBED_DIM || eps_net.output_dim() != dim {
            return Err(shape_err(format!(
                "noise network maps {} -> {}, expected {} -> {dim}",
                eps_net.input_dim(),
                eps_net.output_dim(),
                dim + EMBED_DIM
            )));
        }
        Ok(Self { schedule, eps_net, dim })
    }

    fn net_input(&self, x_t: &Tensor, t: &[usize]) -> Tensor {
        let steps = self.schedule.steps();
        let emb = Tensor::from_fn(t.len(), EMBED_DIM, |i, k| time_embedding(t[i], steps)[k]);
        x_t.concat_cols(&emb)
    }

    fn check(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.dim {
            return Err(shape_err(format!("data has {} columns, model expects {}", x.cols(), self.dim)));
        }
        if x.rows() == 0 {
            return Err(Error::InvalidData("empty batch".into()));
        }
        Ok(())
    }

    /// Noised inputs for explicit steps and noise.
    fn noised(&self, x0: &Mat, t: &[usize], eps: &Mat) -> Tensor {
        Tensor::from_fn(x0.rows(), self.dim, |i, j| {
            let ab = self.schedule.alpha_bar(t[i]);
            ab.sqrt() * x0[(i, j)] + (1.0 - ab).sqrt() * eps[(i, j)]
        })
    }

    fn loss_tape(&self, x0: &Mat, t: &[usize], eps: &Mat) -> Result<(Tape, Vec<crate::nn::Var>, crate::nn::Var)> {
        self.check(x0)?;
        if t.len() != x0.rows() || eps.shape() != x0.shape() {
            return Err(shape_err("steps and noise must match the batch"));
        }
        for &s in t {
            self.schedule.check_step(s)?;
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let input = tape.leaf(self.net_input(&self.noised(x0, t, eps), t));
        let out = self.eps_net.forward_on(&mut tape, &vars, input);
        let target = tape.leaf(Tensor::from_mat(eps));
        let diff = tape.sub(out, target);
        let sq = tape.square(diff);
        let per = tape.row_sum(sq);
        let loss = tape.mean(per);
        Ok((tape, vars, loss))
    }

    /// `mean_i |eps_i - eps_theta(x_t, t_i)|^2` for given steps and noise.
    pub fn loss_simple_with(&self, x0: &Mat, t: &[usize], eps: &Mat) -> Result<f64> {
        let (tape, _, loss) = self.loss_tape(x0, t, eps)?;
        Ok(tape.value(loss).item())
    }

    pub fn loss_gradient(&self, x0: &Mat, t: &[usize], eps: &Mat) -> Result<Vec<Tensor>> {
        let (mut tape, vars, loss) = self.loss_tape(x0, t, eps)?;
        tape.backward(loss)?;
        Ok(vars.iter().map(|&v| tape.grad_or_zeros(v)).collect())
    }

    /// Simplified loss with one uniformly drawn step and one noise draw per row.
    pub fn loss_simple(&self, x0: &Mat, rng: &mut RandomSource) -> Result<f64> {
        self.check(x0)?;
        let (t, eps) = self.draw(x0.rows(), rng);
        self.loss_simple_with(x0, &t, &eps)
    }

    fn draw(&self, n: usize, rng: &mut RandomSource) -> (Vec<usize>, Mat) {
        let t: Vec<usize> = (0..n).map(|_| 1 + rng.below(self.schedule.steps())).collect();
        let eps = Mat::from_fn(n, self.dim, |_, _| rng.normal());
        (t, eps)
    }

    /// Minibatch Adam descent on the simplified loss. Returns each epoch's mean loss.
    pub fn train(&mut self, data: &Mat, cfg: &TrainConfig, rng: &mut RandomSource) -> Result<Vec<f64>> {
        cfg.validate()?;
        self.check(data)?;
        let mut opt = Adam::new(cfg.adam, &self.params());
        let mut trace = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut total = 0.0;
            for idx in minibatches(data.rows(), cfg.batch, rng) {
                let x0 = Mat::from_fn(idx.len(), self.dim, |i, j| data[(idx[i], j)]);
                let (t, eps) = self.draw(idx.len(), rng);
                let (mut tape, vars, loss) = self.loss_tape(&x0, &t, &eps)?;
                let value = tape.value(loss).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, what: "loss".into() });
                }
                total += value * idx.len() as f64;
                tape.backward(loss)?;
                crate::nn::apply_grads(self, &mut opt, &tape, &vars);
            }
            trace.push(total / data.rows() as f64);
        }
        Ok(trace)
    }

    pub fn sample(&self, n: usize, rng: &mut RandomSource) -> Result<Mat> {
        sample_with(self, &self.schedule, self.dim, n, rng)
    }

    pub fn elbo_terms(&self, x0: &[f64], rng: &mut RandomSource) -> Result<Vec<f64>> {
        elbo_terms(self, &self.schedule, x0, rng)
    }

    /// Single-draw estimate of the variational lower bound on `log p(x_0)`:
    /// minus the prior matching term `KL(q(x_T | x_0) || N(0, I))`, the step
    /// terms of [`elbo_terms`], and the normalizer of the Gaussian decoder
    /// `p(x_0 | x_1) = N(mu_theta, beta_1 I)`.
    pub fn elbo(&self, x0: &[f64], rng: &mut RandomSource) -> Result<f64> {
        if x0.len() != self.dim {
            return Err(shape_err(format!("point has {} coordinates, model is {}-d", x0.len(), self.dim)));
        }
        let s = &self.schedule;
        let ab = s.alpha_bar(s.steps());
        let prior: f64 = x0.iter().map(|x| 0.5 * (ab * x * x - ab - (1.0 - ab).ln())).sum();
        let steps: f64 = self.elbo_terms(x0, rng)?.iter().sum();
        let norm = 0.5 * self.dim as f64 * (2.0 * std::f64::consts::PI * s.beta(1)).ln();
        Ok(-prior - steps - norm)
    }
}

impl NoisePredictor for DiffusionModel {
    fn predict_noise(&self, x_t: &Mat, t: &[usize]) -> Result<Mat> {
        if x_t.cols() != self.dim || t.len() != x_t.rows() {
            return Err(shape_err("noise prediction input shape"));
        }
        self.eps_net.forward(&self.net_input(&Tensor::from_mat(x_t), t))?.to_mat()
    }
}

impl Parameters for DiffusionModel {
    fn params(&self) -> Vec<&Tensor> {
        self.eps_net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.eps_net.params_mut()
    }
}
