//! Finite mixtures with discrete latent class: Gaussian mixtures (GMM) and
//! latent class analysis (LCA, mixtures of independent categoricals).
//!
//! Both share the responsibility machinery: `gamma[i][k] = p(z_i = k | x_i)`
//! computed by Bayes' rule in the log domain.

use serde::{Deserialize, Serialize};

use crate::datasets::CategoricalData;
use crate::em::{run_em, EmConfig, EmProblem, FitReport};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{column_means, scatter, sub_vec, Cholesky, Mat};
use crate::par;
use crate::prob::{log_sum_exp_unchecked, logpdf_with_factor, Gaussian, Simplex};
use crate::rng::RandomSource;

/// Components whose effective count falls below this are re-seeded.
pub const EMPTY_COMPONENT: f64 = 1e-8;
/// LCA item probabilities are floored at this value and renormalized.
pub const LCA_PROB_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmParams {
    pub weights: Simplex,
    pub means: Vec<Vec<f64>>,
    pub covs: Vec<Mat>,
}

impl GmmParams {
    pub fn new(weights: Simplex, means: Vec<Vec<f64>>, covs: Vec<Mat>) -> Result<Self> {
        let k = weights.len();
        if means.len() != k || covs.len() != k {
            return Err(shape_err(format!(
                "{k} weights, {} means, {} covariances",
                means.len(),
                covs.len()
            )));
        }
        let d = means.first().map_or(0, Vec::len);
        for (m, c) in means.iter().zip(&covs) {
            Gaussian::new(m.clone(), c.clone())?;
            if m.len() != d {
                return Err(shape_err("component means differ in dimension"));
            }
        }
        Ok(Self { weights, means, covs })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn component(&self, k: usize) -> Gaussian {
        Gaussian { mean: self.means[k].clone(), cov: self.covs[k].clone() }
    }

    /// Relabels components: new component `i` is old component `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let w: Vec<f64> = perm.iter().map(|&k| self.weights.probs()[k]).collect();
        Self {
            weights: Simplex::from_weights(&w).expect("permuted weights"),
            means: perm.iter().map(|&k| self.means[k].clone()).collect(),
            covs: perm.iter().map(|&k| self.covs[k].clone()).collect(),
        }
    }
}

/// Posterior class memberships, one simplex row per observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Responsibilities {
    /// `N x K`.
    pub gamma: Mat,
    /// `log p(x_i)` under the parameters the responsibilities were computed from.
    pub row_loglik: Vec<f64>,
}

impl Responsibilities {
    /// Responsibilities supplied without likelihoods (e.g. hard assignments).
    pub fn from_gamma(gamma: Mat) -> Result<Self> {
        for (i, r) in gamma.row_iter().enumerate() {
            Simplex::new(r.to_vec()).map_err(|e| Error::InvalidData(format!("row {i}: {e}")))?;
        }
        let n = gamma.rows();
        Ok(Self { gamma, row_loglik: vec![f64::NAN; n] })
    }

    pub fn n(&self) -> usize {
        self.gamma.rows()
    }

    pub fn k(&self) -> usize {
        self.gamma.cols()
    }

    pub fn total_loglik(&self) -> f64 {
        self.row_loglik.iter().sum()
    }

    pub fn counts(&self) -> Vec<f64> {
        (0..self.k()).map(|k| (0..self.n()).map(|i| self.gamma[(i, k)]).sum()).collect()
    }

    pub fn row(&self, i: usize) -> Simplex {
        Simplex::new(self.gamma.row(i).to_vec()).expect("responsibility rows are simplexes")
    }
}

/// Turns per-row log joint values `log pi_k + log p(x_i | k)` into responsibilities.
fn responsibilities_from_log_joint(rows: Vec<Vec<f64>>, k: usize) -> Result<Responsibilities> {
    let n = rows.len();
    let mut gamma = Mat::zeros(n, k);
    let mut row_loglik = Vec::with_capacity(n);
    for (i, lj) in rows.into_iter().enumerate() {
        let s = Simplex::from_log_weights(&lj)
            .map_err(|_| Error::ZeroProbability(format!("row {i} has zero probability under every component")))?;
        row_loglik.push(log_sum_exp_unchecked(&lj));
        gamma.row_mut(i).copy_from_slice(s.probs());
    }
    Ok(Responsibilities { gamma, row_loglik })
}

struct GmmEval {
    log_w: Vec<f64>,
    means: Vec<Vec<f64>>,
    chols: Vec<Cholesky>,
}

impl GmmEval {
    fn new(p: &GmmParams) -> Result<Self> {
        Ok(Self {
            log_w: p.weights.probs().iter().map(|w| w.ln()).collect(),
            means: p.means.clone(),
            chols: p.covs.iter().map(Mat::cholesky).collect::<Result<_>>()?,
        })
    }

    fn log_joint(&self, x: &[f64]) -> Vec<f64> {
        (0..self.log_w.len())
            .map(|k| self.log_w[k] + logpdf_with_factor(x, &self.means[k], &self.chols[k]))
            .collect()
    }
}

fn check_dim(params_dim: usize, data: &Mat) -> Result<()> {
    if data.cols() != params_dim {
        return Err(shape_err(format!("data has {} columns, model has d = {params_dim}", data.cols())));
    }
    Ok(())
}

/// `sum_i log sum_k pi_k N(x_i | mu_k, Sigma_k)`.
pub fn gmm_loglik(params: &GmmParams, data: &Mat) -> Result<f64> {
    Ok(gmm_pointwise_loglik(params, data)?.iter().sum())
}

pub fn gmm_pointwise_loglik(params: &GmmParams, data: &Mat) -> Result<Vec<f64>> {
    check_dim(params.dim(), data)?;
    let ev = GmmEval::new(params)?;
    Ok(par::map_range(data.rows(), |i| log_sum_exp_unchecked(&ev.log_joint(data.row(i)))))
}

pub fn gmm_e_step(params: &GmmParams, data: &Mat) -> Result<Responsibilities> {
    check_dim(params.dim(), data)?;
    let ev = GmmEval::new(params)?;
    let rows = par::map_range(data.rows(), |i| ev.log_joint(data.row(i)));
    responsibilities_from_log_joint(rows, params.k())
}

/// Posterior class probabilities for one observation; the same computation as a
/// row of [`gmm_e_step`].
pub fn gmm_posterior(params: &GmmParams, x: &[f64]) -> Result<Simplex> {
    let data = Mat::from_vec(1, x.len(), x.to_vec())?;
    Ok(gmm_e_step(params, &data)?.row(0))
}

/// Eigenvalue floor for component covariances: `1e-6` times the average
/// per-coordinate variance of the data, and never below `1e-12`.
pub fn covariance_floor(data: &Mat) -> f64 {
    let mu = column_means(data);
    let s = scatter(data, &mu);
    (1e-6 * s.trace() / data.cols().max(1) as f64).max(1e-12)
}

struct GmmContext {
    floor: f64,
    global_cov: Mat,
}

impl GmmContext {
    fn new(data: &Mat) -> Result<Self> {
        let floor = covariance_floor(data);
        let mu = column_means(data);
        let global_cov = scatter(data, &mu).clamp_eigenvalues(floor)?;
        Ok(Self { floor, global_cov })
    }
}

/// Weighted means and covariances from responsibilities, with the covariance
/// eigenvalue floor applied. Empty components are re-seeded at the
/// worst-explained observation.
pub fn gmm_m_step(data: &Mat, resp: &Responsibilities) -> Result<GmmParams> {
    let ctx = GmmContext::new(data)?;
    gmm_m_step_with(data, resp, &ctx, &mut Vec::new())
}

fn gmm_m_step_with(
    data: &Mat,
    resp: &Responsibilities,
    ctx: &GmmContext,
    rescued: &mut Vec<usize>,
) -> Result<GmmParams> {
    let (n, d) = data.shape();
    if resp.n() != n {
        return Err(shape_err(format!("{} responsibility rows for {n} observations", resp.n())));
    }
    let k = resp.k();
    let counts = resp.counts();
    let stats: Vec<Option<(Vec<f64>, Mat)>> = par::map_range(k, |c| {
        let nk = counts[c];
        if nk < EMPTY_COMPONENT {
            return None;
        }
        let mut mean = vec![0.0; d];
        for i in 0..n {
            crate::linalg::axpy(&mut mean, resp.gamma[(i, c)], data.row(i));
        }
        mean.iter_mut().for_each(|v| *v /= nk);
        let mut cov = Mat::zeros(d, d);
        for i in 0..n {
            let g = resp.gamma[(i, c)];
            if g > 0.0 {
                let diff = sub_vec(data.row(i), &mean);
                cov.add_outer(g, &diff, &diff);
            }
        }
        Some((mean, cov.scale(1.0 / nk)))
    });

    let mut used = Vec::new();
    let mut weights = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for (c, st) in stats.into_iter().enumerate() {
        match st {
            Some((mean, cov)) => {
                weights.push(counts[c] / n as f64);
                means.push(mean);
                covs.push(cov.clamp_eigenvalues(ctx.floor)?);
            }
            None => {
                let i = rescue_row(resp, &used);
                used.push(i);
                rescued.push(c);
                weights.push(1.0 / n as f64);
                means.push(data.row(i).to_vec());
                covs.push(ctx.global_cov.clone());
            }
        }
    }
    Ok(GmmParams { weights: Simplex::from_weights(&weights)?, means, covs })
}

/// Observation with the lowest likelihood under the previous parameters (or,
/// without likelihoods, the most ambiguous one), skipping rows already used.
fn rescue_row(resp: &Responsibilities, used: &[usize]) -> usize {
    let score = |i: usize| -> f64 {
        let ll = resp.row_loglik[i];
        if ll.is_finite() {
            ll
        } else {
            resp.gamma.row(i).iter().copied().fold(0.0, f64::max)
        }
    };
    (0..resp.n())
        .filter(|i| !used.contains(i))
        .min_by(|&a, &b| score(a).total_cmp(&score(b)).then(a.cmp(&b)))
        .unwrap_or(0)
}

/// Greedy farthest-point selection of `k` rows, starting from a seeded random row.
pub fn farthest_point_rows(data: &Mat, k: usize, rng: &mut RandomSource) -> Vec<usize> {
    let n = data.rows();
    let mut chosen = vec![rng.below(n)];
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(data.row(i), data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let mut best = 0;
        for i in 1..n {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        for i in 0..n {
            dist[i] = dist[i].min(sq_dist(data.row(i), data.row(best)));
        }
    }
    chosen
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

struct GmmEm<'a> {
    data: &'a Mat,
    ctx: GmmContext,
}

impl EmProblem for GmmEm<'_> {
    type Params = GmmParams;
    type Stats = Responsibilities;

    fn e_step(&self, p: &GmmParams) -> Result<Responsibilities> {
        gmm_e_step(p, self.data)
    }

    fn objective(&self, p: &GmmParams) -> Result<f64> {
        gmm_loglik(p, self.data)
    }

    fn e_step_with_objective(&self, p: &GmmParams) -> Result<(Responsibilities, f64)> {
        let r = gmm_e_step(p, self.data)?;
        let ll = r.total_loglik();
        Ok((r, ll))
    }

    fn m_step(&self, r: &Responsibilities, _: &GmmParams, rescued: &mut Vec<usize>) -> Result<GmmParams> {
        gmm_m_step_with(self.data, r, &self.ctx, rescued)
    }
}

/// Default initialization: farthest-point means, global covariance, uniform weights.
pub fn gmm_init(data: &Mat, k: usize, seed: u64) -> Result<GmmParams> {
    let (n, _) = data.shape();
    if k == 0 {
        return Err(Error::InvalidParameter("need at least one component".into()));
    }
    if n < k {
        return Err(Error::InvalidData(format!("{n} observations for {k} components")));
    }
    let ctx = GmmContext::new(data)?;
    let mut rng = RandomSource::new(seed);
    let rows = farthest_point_rows(data, k, &mut rng);
    Ok(GmmParams {
        weights: Simplex::uniform(k),
        means: rows.iter().map(|&i| data.row(i).to_vec()).collect(),
        covs: vec![ctx.global_cov; k],
    })
}

pub fn fit_gmm(data: &Mat, k: usize, cfg: &EmConfig) -> Result<(GmmParams, FitReport)> {
    let init = gmm_init(data, k, cfg.seed)?;
    fit_gmm_from(data, init, cfg)
}

pub fn fit_gmm_from(data: &Mat, init: GmmParams, cfg: &EmConfig) -> Result<(GmmParams, FitReport)> {
    check_dim(init.dim(), data)?;
    let problem = GmmEm { data, ctx: GmmContext::new(data)? };
    run_em(&problem, init, cfg)
}

// ---------------------------------------------------------------------------
// Latent class analysis

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LcaParams {
    pub weights: Simplex,
    /// `item_probs[k][j]` is `P(X_j = . | class k)`.
    pub item_probs: Vec<Vec<Simplex>>,
}

impl LcaParams {
    pub fn new(weights: Simplex, item_probs: Vec<Vec<Simplex>>) -> Result<Self> {
        if item_probs.len() != weights.len() {
            return Err(shape_err("one item-probability table per class required"));
        }
        let shape: Vec<usize> = item_probs[0].iter().map(Simplex::len).collect();
        if item_probs.iter().any(|t| t.iter().map(Simplex::len).collect::<Vec<_>>() != shape) {
            return Err(shape_err("classes disagree on item category counts"));
        }
        Ok(Self { weights, item_probs })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn n_categories(&self) -> Vec<usize> {
        self.item_probs[0].iter().map(Simplex::len).collect()
    }

    pub fn permuted(&self, perm: &[usize]) -> Self {
        let w: Vec<f64> = perm.iter().map(|&k| self.weights.probs()[k]).collect();
        Self {
            weights: Simplex::from_weights(&w).expect("permuted weights"),
            item_probs: perm.iter().map(|&k| self.item_probs[k].clone()).collect(),
        }
    }
}

fn check_lca_data(p: &LcaParams, data: &CategoricalData) -> Result<()> {
    data.validate()?;
    if data.n_categories != p.n_categories() {
        return Err(shape_err(format!(
            "data declares categories {:?}, model has {:?}",
            data.n_categories,
            p.n_categories()
        )));
    }
    Ok(())
}

fn lca_log_joint(logs: &[Vec<Vec<f64>>], log_w: &[f64], row: &[usize]) -> Vec<f64> {
    (0..log_w.len())
        .map(|k| log_w[k] + row.iter().enumerate().map(|(j, &c)| logs[k][j][c]).sum::<f64>())
        .collect()
}

fn lca_logs(p: &LcaParams) -> (Vec<f64>, Vec<Vec<Vec<f64>>>) {
    let log_w = p.weights.probs().iter().map(|w| w.ln()).collect();
    let logs = p
        .item_probs
        .iter()
        .map(|items| items.iter().map(|s| s.probs().iter().map(|q| q.ln()).collect()).collect())
        .collect();
    (log_w, logs)
}

pub fn lca_loglik(params: &LcaParams, data: &CategoricalData) -> Result<f64> {
    Ok(lca_pointwise_loglik(params, data)?.iter().sum())
}

pub fn lca_pointwise_loglik(params: &LcaParams, data: &CategoricalData) -> Result<Vec<f64>> {
    check_lca_data(params, data)?;
    let (log_w, logs) = lca_logs(params);
    Ok(par::map_slice(&data.codes, |row| log_sum_exp_unchecked(&lca_log_joint(&logs, &log_w, row))))
}

pub fn lca_e_step(params: &LcaParams, data: &CategoricalData) -> Result<Responsibilities> {
    check_lca_data(params, data)?;
    let (log_w, logs) = lca_logs(params);
    let rows = par::map_slice(&data.codes, |row| lca_log_joint(&logs, &log_w, row));
    responsibilities_from_log_joint(rows, params.k())
}

/// Weighted category frequencies per class, floored at [`LCA_PROB_FLOOR`] and
/// renormalized.
pub fn lca_m_step(data: &CategoricalData, resp: &Responsibilities) -> Result<LcaParams> {
    lca_m_step_with(data, resp, &mut Vec::new())
}

fn lca_m_step_with(data: &CategoricalData, resp: &Responsibilities, rescued: &mut Vec<usize>) -> Result<LcaParams> {
    data.validate()?;
    let n = data.len();
    if resp.n() != n {
        return Err(shape_err(format!("{} responsibility rows for {n} observations", resp.n())));
    }
    let k = resp.k();
    let counts = resp.counts();
    let empirical = empirical_frequencies(data);
    let mut used = Vec::new();
    let mut item_probs = Vec::with_capacity(k);
    let mut weights = Vec::with_capacity(k);
    for c in 0..k {
        if counts[c] < EMPTY_COMPONENT {
            let i = rescue_row(resp, &used);
            used.push(i);
            rescued.push(c);
            weights.push(1.0 / n as f64);
            // half the mass on the re-seeding row's pattern, half on the pooled frequencies
            let table = data.codes[i]
                .iter()
                .zip(&empirical)
                .map(|(&code, freq)| {
                    let mut w: Vec<f64> = freq.iter().map(|f| 0.5 * f).collect();
                    w[code] += 0.5;
                    Simplex::from_weights(&w).map(|s| s.floored(LCA_PROB_FLOOR))
                })
                .collect::<Result<Vec<_>>>()?;
            item_probs.push(table);
            continue;
        }
        weights.push(counts[c] / n as f64);
        let table = data
            .n_categories
            .iter()
            .enumerate()
            .map(|(j, &nc)| {
                let mut w = vec![0.0; nc];
                for (i, row) in data.codes.iter().enumerate() {
                    w[row[j]] += resp.gamma[(i, c)];
                }
                w.iter_mut().for_each(|v| *v = (*v / counts[c]).max(LCA_PROB_FLOOR));
                Simplex::from_weights(&w)
            })
            .collect::<Result<Vec<_>>>()?;
        item_probs.push(table);
    }
    Ok(LcaParams { weights: Simplex::from_weights(&weights)?, item_probs })
}

fn empirical_frequencies(data: &CategoricalData) -> Vec<Vec<f64>> {
    data.n_categories
        .iter()
        .enumerate()
        .map(|(j, &nc)| {
            let mut f = vec![0.0; nc];
            for row in &data.codes {
                f[row[j]] += 1.0;
            }
            let n = data.len().max(1) as f64;
            f.iter_mut().for_each(|v| *v /= n);
            f
        })
        .collect()
}

/// Default initialization: uniform class weights and empirical item frequencies
/// perturbed by seeded multiplicative noise of up to 10%.
pub fn lca_init(data: &CategoricalData, k: usize, seed: u64) -> Result<LcaParams> {
    data.validate()?;
    if k == 0 {
        return Err(Error::InvalidParameter("need at least one class".into()));
    }
    if data.len() < k {
        return Err(Error::InvalidData(format!("{} observations for {k} classes", data.len())));
    }
    let empirical = empirical_frequencies(data);
    let mut rng = RandomSource::new(seed);
    let item_probs = (0..k)
        .map(|_| {
            empirical
                .iter()
                .map(|f| {
                    let w: Vec<f64> = f
                        .iter()
                        .map(|&p| p.max(LCA_PROB_FLOOR) * (1.0 + 0.1 * (2.0 * rng.uniform() - 1.0)))
                        .collect();
                    Simplex::from_weights(&w)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LcaParams { weights: Simplex::uniform(k), item_probs })
}

struct LcaEm<'a> {
    data: &'a CategoricalData,
}

impl EmProblem for LcaEm<'_> {
    type Params = LcaParams;
    type Stats = Responsibilities;

    fn e_step(&self, p: &LcaParams) -> Result<Responsibilities> {
        lca_e_step(p, self.data)
    }

    fn objective(&self, p: &LcaParams) -> Result<f64> {
        lca_loglik(p, self.data)
    }

    fn e_step_with_objective(&self, p: &LcaParams) -> Result<(Responsibilities, f64)> {
        let r = lca_e_step(p, self.data)?;
        let ll = r.total_loglik();
        Ok((r, ll))
    }

    fn m_step(&self, r: &Responsibilities, _: &LcaParams, rescued: &mut Vec<usize>) -> Result<LcaParams> {
        lca_m_step_with(self.data, r, rescued)
    }
}

pub fn fit_lca(data: &CategoricalData, k: usize, cfg: &EmConfig) -> Result<(LcaParams, FitReport)> {
    let init = lca_init(data, k, cfg.seed)?;
    fit_lca_from(data, init, cfg)
}

pub fn fit_lca_from(data: &CategoricalData, init: LcaParams, cfg: &EmConfig) -> Result<(LcaParams, FitReport)> {
    check_lca_data(&init, data)?;
    run_em(&LcaEm { data }, init, cfg)
}
