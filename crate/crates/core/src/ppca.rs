//! Probabilistic PCA: `x = W z + mu + e`, `z ~ N(0, I_M)`, `e ~ N(0, sigma2 I_D)`.
//!
//! The marginal is `N(mu, W W^T + sigma2 I)` and the posterior over `z` is the
//! Gaussian `N(M^{-1} W^T (x - mu), sigma2 M^{-1})` with `M = W^T W + sigma2 I`.
//! Parameters can be estimated in closed form from the eigendecomposition of
//! the sample covariance, or by EM.

use serde::{Deserialize, Serialize};

use crate::em::{run_em, EmConfig, EmProblem, FitReport};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{column_means, scatter, sub_vec, Cholesky, Mat};
use crate::prob::{sample_with_factor, Gaussian, LN_2PI};
use crate::rng::RandomSource;

/// Lower bound on the noise variance during fitting.
pub const SIGMA2_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpcaParams {
    /// Loading matrix, `D x M`.
    pub w: Mat,
    pub mu: Vec<f64>,
    pub sigma2: f64,
}

impl PpcaParams {
    pub fn new(w: Mat, mu: Vec<f64>, sigma2: f64) -> Result<Self> {
        if !(sigma2 > 0.0) || !sigma2.is_finite() {
            return Err(Error::InvalidParameter(format!("noise variance {sigma2} must be positive")));
        }
        Self::pca_limit(w, mu).map(|p| Self { sigma2, ..p })
    }

    /// The zero-noise limit (classical PCA); only valid for posterior and
    /// reconstruction with full-column-rank `W`.
    pub fn pca_limit(w: Mat, mu: Vec<f64>) -> Result<Self> {
        if w.rows() != mu.len() {
            return Err(shape_err(format!("W has {} rows but mu has length {}", w.rows(), mu.len())));
        }
        if w.cols() > w.rows() {
            return Err(Error::InvalidParameter("latent dimension exceeds data dimension".into()));
        }
        Ok(Self { w, mu, sigma2: 0.0 })
    }

    pub fn data_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.w.cols()
    }

    /// `W W^T + sigma2 I`.
    pub fn marginal_cov(&self) -> Mat {
        self.w.matmul_t(&self.w).add_diag(self.sigma2)
    }

    pub fn marginal(&self) -> Gaussian {
        Gaussian { mean: self.mu.clone(), cov: self.marginal_cov() }
    }

    /// `W^T W + sigma2 I`.
    fn m_matrix(&self) -> Mat {
        self.w.t_matmul(&self.w).add_diag(self.sigma2)
    }

    /// Orders columns of `W` by decreasing norm and makes the largest-magnitude
    /// entry of each column positive.
    pub fn canonicalize(&self) -> Self {
        let (d, m) = self.w.shape();
        let norms: Vec<f64> = (0..m).map(|j| crate::linalg::norm(&self.w.col(j))).collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
        let mut w = self.w.select_cols(&order);
        for j in 0..m {
            let col = w.col(j);
            let mut k = 0;
            for i in 1..d {
                if col[i].abs() > col[k].abs() {
                    k = i;
                }
            }
            if col[k] < 0.0 {
                for i in 0..d {
                    w[(i, j)] = -w[(i, j)];
                }
            }
        }
        Self { w, mu: self.mu.clone(), sigma2: self.sigma2 }
    }
}

/// Exact Gaussian posterior over the latent coordinates of one observation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpcaPosterior {
    pub mean: Vec<f64>,
    pub cov: Mat,
}

fn check_data(params: &PpcaParams, x: &[f64]) -> Result<()> {
    if x.len() != params.data_dim() {
        return Err(shape_err(format!("observation of length {}, model has D = {}", x.len(), params.data_dim())));
    }
    Ok(())
}

/// Closed-form maximum-likelihood fit: `mu` is the sample mean, `sigma2` the mean
/// of the `D - M` smallest covariance eigenvalues, and `W = U_M (L_M - sigma2 I)^{1/2}`.
pub fn fit_closed_form(data: &Mat, m: usize) -> Result<PpcaParams> {
    let (n, d) = data.shape();
    if m == 0 {
        return Err(Error::InvalidParameter("latent dimension must be at least 1".into()));
    }
    if m >= d {
        return Err(Error::InvalidParameter(format!(
            "latent dimension {m} must be smaller than data dimension {d}"
        )));
    }
    if n <= m {
        return Err(Error::InvalidData(format!("need more than {m} observations, got {n}")));
    }
    let mu = column_means(data);
    let s = scatter(data, &mu);
    let (vals, vecs) = s.sym_eigen()?;
    let top = vals[0].max(0.0);
    if !(vals[m - 1] > 1e-12 * top) {
        return Err(Error::InvalidData(format!(
            "sample covariance has rank below {m} (eigenvalue {} is {:e})",
            m,
            vals[m - 1]
        )));
    }
    let sigma2 = (vals[m..].iter().sum::<f64>() / (d - m) as f64).max(SIGMA2_FLOOR);
    let mut w = Mat::zeros(d, m);
    for j in 0..m {
        let scale = (vals[j] - sigma2).max(0.0).sqrt();
        for i in 0..d {
            w[(i, j)] = vecs[(i, j)] * scale;
        }
    }
    Ok(PpcaParams { w, mu, sigma2 }.canonicalize())
}

/// Total log-likelihood of the rows of `data` under `N(mu, W W^T + sigma2 I)`.
pub fn marginal_loglik(params: &PpcaParams, data: &Mat) -> Result<f64> {
    if data.cols() != params.data_dim() {
        return Err(shape_err(format!("data has {} columns, model has D = {}", data.cols(), params.data_dim())));
    }
    let s = scatter(data, &params.mu);
    let chol = params.marginal_cov().cholesky()?;
    Ok(loglik_from_scatter(&chol, &s, data.rows()))
}

/// Per-row log-likelihoods.
pub fn pointwise_loglik(params: &PpcaParams, data: &Mat) -> Result<Vec<f64>> {
    let chol = params.marginal_cov().cholesky()?;
    data.row_iter()
        .map(|x| {
            check_data(params, x)?;
            Ok(crate::prob::logpdf_with_factor(x, &params.mu, &chol))
        })
        .collect()
}

/// `-N/2 (D ln 2pi + ln|C| + tr(C^{-1} S))`.
fn loglik_from_scatter(chol: &Cholesky, s: &Mat, n: usize) -> f64 {
    let d = s.rows();
    let tr = chol.solve_mat(s).trace();
    -0.5 * n as f64 * (d as f64 * LN_2PI + chol.log_det() + tr)
}

pub fn posterior(params: &PpcaParams, x: &[f64]) -> Result<PpcaPosterior> {
    check_data(params, x)?;
    let chol = params.m_matrix().cholesky()?;
    let centered = sub_vec(x, &params.mu);
    let mean = chol.solve_vec(&params.w.t_matvec(&centered));
    let cov = chol.inverse().scale(params.sigma2);
    Ok(PpcaPosterior { mean, cov })
}

/// Posterior-mean reconstruction `W M^{-1} W^T (x - mu) + mu`.
pub fn reconstruct(params: &PpcaParams, x: &[f64]) -> Result<Vec<f64>> {
    let post = posterior(params, x)?;
    let mut out = params.w.matvec(&post.mean);
    for (o, m) in out.iter_mut().zip(&params.mu) {
        *o += m;
    }
    Ok(out)
}

/// Where latent draws come from in [`sample`].
#[derive(Clone, Copy, Debug)]
pub enum SampleFrom<'a> {
    Prior,
    /// The posterior given this observation.
    Posterior(&'a [f64]),
}

/// Draws `n` observations: `z` from the prior or a posterior, then `x = W z + mu + e`.
pub fn sample(params: &PpcaParams, n: usize, rng: &mut RandomSource, from: SampleFrom<'_>) -> Result<Mat> {
    let m = params.latent_dim();
    let (z_mean, z_factor) = match from {
        SampleFrom::Prior => (vec![0.0; m], Mat::identity(m)),
        SampleFrom::Posterior(x) => {
            let post = posterior(params, x)?;
            let l = post.cov.psd_factor()?;
            (post.mean, l)
        }
    };
    let noise_sd = params.sigma2.max(0.0).sqrt();
    let d = params.data_dim();
    let mut out = Mat::zeros(n, d);
    for i in 0..n {
        let z = sample_with_factor(&z_mean, &z_factor, rng);
        let wz = params.w.matvec(&z);
        for (j, v) in out.row_mut(i).iter_mut().enumerate() {
            *v = wz[j] + params.mu[j] + noise_sd * rng.normal();
        }
    }
    Ok(out)
}

struct PpcaEm {
    scatter: Mat,
    n: usize,
}

struct PpcaStats {
    m_inv: Mat,
    sw: Mat,
}

impl EmProblem for PpcaEm {
    type Params = PpcaParams;
    type Stats = PpcaStats;

    fn e_step(&self, p: &PpcaParams) -> Result<PpcaStats> {
        let m_inv = p.m_matrix().cholesky()?.inverse();
        let sw = self.scatter.matmul(&p.w);
        Ok(PpcaStats { m_inv, sw })
    }

    fn objective(&self, p: &PpcaParams) -> Result<f64> {
        let chol = p.marginal_cov().cholesky()?;
        Ok(loglik_from_scatter(&chol, &self.scatter, self.n))
    }

    fn m_step(&self, st: &PpcaStats, p: &PpcaParams, _: &mut Vec<usize>) -> Result<PpcaParams> {
        let d = p.data_dim();
        // W' = S W (sigma2 I + M^{-1} W^T S W)^{-1}
        let inner = st.m_inv.matmul(&p.w.t_matmul(&st.sw)).add_diag(p.sigma2);
        let w_new = inner.transpose().solve(&st.sw.transpose())?.transpose();
        // sigma2' = tr(S - S W M^{-1} W'^T) / D
        let correction = st.sw.matmul(&st.m_inv).matmul_t(&w_new).trace();
        let sigma2 = ((self.scatter.trace() - correction) / d as f64).max(SIGMA2_FLOOR);
        Ok(PpcaParams { w: w_new, mu: p.mu.clone(), sigma2 })
    }
}

/// EM estimate from a random start: `W` entries from `N(0, 0.1)` and `sigma2`
/// at half the average per-coordinate variance.
pub fn fit_em(data: &Mat, m: usize, cfg: &EmConfig) -> Result<(PpcaParams, FitReport)> {
    let (n, d) = data.shape();
    if m == 0 || m >= d {
        return Err(Error::InvalidParameter(format!(
            "latent dimension {m} must be in 1..{d}"
        )));
    }
    if n <= m {
        return Err(Error::InvalidData(format!("need more than {m} observations, got {n}")));
    }
    let mu = column_means(data);
    let s = scatter(data, &mu);
    let mut rng = RandomSource::new(cfg.seed);
    let sd = 0.1f64.sqrt();
    let w = Mat::from_fn(d, m, |_, _| sd * rng.normal());
    let sigma2 = (0.5 * s.trace() / d as f64).max(SIGMA2_FLOOR);
    let init = PpcaParams { w, mu, sigma2 };
    let (p, rep) = run_em(&PpcaEm { scatter: s, n }, init, cfg)?;
    Ok((p.canonicalize(), rep))
}

/// EM from caller-supplied parameters (the mean is re-estimated as the sample mean).
pub fn fit_em_from(data: &Mat, init: &PpcaParams, cfg: &EmConfig) -> Result<(PpcaParams, FitReport)> {
    if data.cols() != init.data_dim() {
        return Err(shape_err("data dimension differs from initial parameters"));
    }
    let mu = column_means(data);
    let s = scatter(data, &mu);
    let init = PpcaParams { w: init.w.clone(), mu, sigma2: init.sigma2.max(SIGMA2_FLOOR) };
    let (p, rep) = run_em(&PpcaEm { scatter: s, n: data.rows() }, init, cfg)?;
    Ok((p.canonicalize(), rep))
}
