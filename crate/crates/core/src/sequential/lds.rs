use serde::{Deserialize, Serialize};

use crate::em::{run_em, EmConfig, EmProblem, FitReport};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{column_means, scatter, sub_vec, Mat};
use crate::par;
use crate::prob::{logpdf_with_factor, sample_gaussian, Gaussian};
use crate::rng::RandomSource;

/// Ridge added to the Gram matrices of the M-step normal equations.
pub const LDS_RIDGE: f64 = 1e-9;
/// Eigenvalue floor for the estimated noise covariances.
const NOISE_FLOOR: f64 = 1e-12;

/// `z_1 ~ N(mu0, sigma0)`, `z_t = A z_{t-1} + N(0, Q)`, `x_t = C z_t + N(0, R)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdsParams {
    pub a: Mat,
    pub c: Mat,
    pub q: Mat,
    pub r: Mat,
    pub mu0: Vec<f64>,
    pub sigma0: Mat,
}

impl LdsParams {
    pub fn new(a: Mat, c: Mat, q: Mat, r: Mat, mu0: Vec<f64>, sigma0: Mat) -> Result<Self> {
        let dz = a.rows();
        let dx = c.rows();
        let ok = a.shape() == (dz, dz)
            && c.shape() == (dx, dz)
            && q.shape() == (dz, dz)
            && r.shape() == (dx, dx)
            && mu0.len() == dz
            && sigma0.shape() == (dz, dz);
        if !ok {
            return Err(shape_err("inconsistent LDS parameter shapes"));
        }
        for (name, m) in [("Q", &q), ("R", &r), ("Sigma0", &sigma0)] {
            if !m.is_symmetric(1e-10) {
                return Err(Error::InvalidParameter(format!("{name} is not symmetric")));
            }
            m.psd_factor().map_err(|_| Error::InvalidParameter(format!("{name} is not positive semi-definite")))?;
        }
        if ![&a, &c].iter().all(|m| m.is_finite()) || mu0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("LDS parameters".into()));
        }
        Ok(Self { a, c, q, r, mu0, sigma0 })
    }

    pub fn state_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.rows()
    }
}

/// Output of the forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterResult {
    /// `p(z_t | x_{1:t})`.
    pub filtered: Vec<Gaussian>,
    /// `p(z_t | x_{1:t-1})`.
    pub predicted: Vec<Gaussian>,
    pub loglik: f64,
}

/// Smoothed state posteriors for one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdsPosterior {
    /// `p(z_t | x_{1:T})`.
    pub marginals: Vec<Gaussian>,
    /// `T - 1` matrices `Cov(z_{t+1}, z_t | x_{1:T})`.
    pub cross_covs: Vec<Mat>,
    pub loglik: f64,
}

fn check_obs(params: &LdsParams, obs: &Mat) -> Result<()> {
    if obs.rows() == 0 {
        return Err(Error::Empty("empty observation sequence".into()));
    }
    if obs.cols() != params.obs_dim() {
        return Err(shape_err(format!("observations have {} columns, model has d_x = {}", obs.cols(), params.obs_dim())));
    }
    Ok(())
}

/// Kalman filter. Covariances are updated in Joseph form and symmetrized at
/// every step; the log-likelihood accumulates the innovation densities.
pub fn kalman_filter(params: &LdsParams, obs: &Mat) -> Result<FilterResult> {
    check_obs(params, obs)?;
    let dz = params.state_dim();
    let eye = Mat::identity(dz);
    let mut filtered = Vec::with_capacity(obs.rows());
    let mut predicted = Vec::with_capacity(obs.rows());
    let mut loglik = 0.0;
    let mut mean = params.mu0.clone();
    let mut cov = params.sigma0.clone();
    for t in 0..obs.rows() {
        if t > 0 {
            mean = params.a.matvec(&mean);
            cov = params.a.matmul(&cov).matmul_t(&params.a).add(&params.q).symmetrize();
        }
        predicted.push(Gaussian { mean: mean.clone(), cov: cov.clone() });
        let x = obs.row(t);
        let s = params.c.matmul(&cov).matmul_t(&params.c).add(&params.r).symmetrize();
        let chol = s
            .cholesky_strict()
            .map_err(|_| Error::Singular(format!("innovation covariance at step {t}")))?;
        let pred_x = params.c.matvec(&mean);
        loglik += logpdf_with_factor(x, &pred_x, &chol);
        // K = P C^T S^{-1}
        let gain = chol.solve_mat(&params.c.matmul(&cov)).transpose();
        let innovation = sub_vec(x, &pred_x);
        let shift = gain.matvec(&innovation);
        mean.iter_mut().zip(&shift).for_each(|(m, s)| *m += s);
        let ikc = eye.sub(&gain.matmul(&params.c));
        cov = ikc
            .matmul(&cov)
            .matmul_t(&ikc)
            .add(&gain.matmul(&params.r).matmul_t(&gain))
            .symmetrize();
        filtered.push(Gaussian { mean: mean.clone(), cov: cov.clone() });
    }
    Ok(FilterResult { filtered, predicted, loglik })
}

/// Rauch-Tung-Striebel smoother on top of [`kalman_filter`].
pub fn kalman_smooth(params: &LdsParams, obs: &Mat) -> Result<LdsPosterior> {
    let f = kalman_filter(params, obs)?;
    let t_len = obs.rows();
    let mut marginals = f.filtered.clone();
    let mut cross_covs = vec![Mat::zeros(0, 0); t_len.saturating_sub(1)];
    for t in (0..t_len.saturating_sub(1)).rev() {
        let pf = &f.filtered[t].cov;
        let pred = &f.predicted[t + 1];
        // J = P_t A^T P_{t+1|t}^{-1}
        let chol = pred.cov.cholesky()?;
        let j = chol.solve_mat(&params.a.matmul(pf)).transpose();
        let next = marginals[t + 1].clone();
        let dm = sub_vec(&next.mean, &pred.mean);
        let mut mean = f.filtered[t].mean.clone();
        mean.iter_mut().zip(j.matvec(&dm)).for_each(|(m, s)| *m += s);
        let cov = pf.add(&j.matmul(&next.cov.sub(&pred.cov)).matmul_t(&j)).symmetrize();
        cross_covs[t] = next.cov.matmul_t(&j);
        marginals[t] = Gaussian { mean, cov };
    }
    Ok(LdsPosterior { marginals, cross_covs, loglik: f.loglik })
}

pub fn lds_loglik(params: &LdsParams, obs_set: &[Mat]) -> Result<f64> {
    Ok(par::try_map_slice(obs_set, |x| kalman_filter(params, x).map(|f| f.loglik))?.iter().sum())
}

/// Draws states (`T x d_z`) and observations (`T x d_x`).
pub fn lds_sample(params: &LdsParams, t_len: usize, rng: &mut RandomSource) -> Result<(Mat, Mat)> {
    let (dz, dx) = (params.state_dim(), params.obs_dim());
    let lq = params.q.psd_factor()?;
    let lr = params.r.psd_factor()?;
    let mut z = Mat::zeros(t_len, dz);
    let mut x = Mat::zeros(t_len, dx);
    let mut cur = sample_gaussian(&Gaussian { mean: params.mu0.clone(), cov: params.sigma0.clone() }, rng)?;
    for t in 0..t_len {
        if t > 0 {
            cur = crate::prob::sample_with_factor(&params.a.matvec(&cur), &lq, rng);
        }
        z.row_mut(t).copy_from_slice(&cur);
        let obs = crate::prob::sample_with_factor(&params.c.matvec(&cur), &lr, rng);
        x.row_mut(t).copy_from_slice(&obs);
    }
    Ok((z, x))
}

struct LdsEm<'a> {
    seqs: &'a [Mat],
}

impl EmProblem for LdsEm<'_> {
    type Params = LdsParams;
    type Stats = Vec<LdsPosterior>;

    fn e_step(&self, p: &LdsParams) -> Result<Vec<LdsPosterior>> {
        par::try_map_slice(self.seqs, |x| kalman_smooth(p, x))
    }

    fn objective(&self, p: &LdsParams) -> Result<f64> {
        lds_loglik(p, self.seqs)
    }

    fn e_step_with_objective(&self, p: &LdsParams) -> Result<(Vec<LdsPosterior>, f64)> {
        let post = self.e_step(p)?;
        let ll = post.iter().map(|s| s.loglik).sum();
        Ok((post, ll))
    }

    fn m_step(&self, post: &Vec<LdsPosterior>, cur: &LdsParams, _: &mut Vec<usize>) -> Result<LdsParams> {
        lds_m_step(self.seqs, post, cur)
    }
}

/// `E[z z^T] = Cov + mean mean^T`.
fn second_moment(g: &Gaussian) -> Mat {
    let mut m = g.cov.clone();
    m.add_outer(1.0, &g.mean, &g.mean);
    m
}

fn lds_m_step(seqs: &[Mat], post: &[LdsPosterior], cur: &LdsParams) -> Result<LdsParams> {
    let (dz, dx) = (cur.state_dim(), cur.obs_dim());
    let mut szz = Mat::zeros(dz, dz); // sum_t E[z_t z_t^T]
    let mut sxz = Mat::zeros(dx, dz); // sum_t x_t E[z_t]^T
    let mut s_prev = Mat::zeros(dz, dz); // sum_{t>=2} E[z_{t-1} z_{t-1}^T]
    let mut s_next = Mat::zeros(dz, dz); // sum_{t>=2} E[z_t z_t^T]
    let mut s_cross = Mat::zeros(dz, dz); // sum_{t>=2} E[z_t z_{t-1}^T]
    let mut n_obs = 0usize;
    let mut n_trans = 0usize;
    for (x, p) in seqs.iter().zip(post) {
        let moments: Vec<Mat> = p.marginals.iter().map(second_moment).collect();
        for (t, g) in p.marginals.iter().enumerate() {
            szz.add_assign(&moments[t]);
            sxz.add_outer(1.0, x.row(t), &g.mean);
            if t > 0 {
                s_prev.add_assign(&moments[t - 1]);
                s_next.add_assign(&moments[t]);
                let mut cross = p.cross_covs[t - 1].clone();
                cross.add_outer(1.0, &g.mean, &p.marginals[t - 1].mean);
                s_cross.add_assign(&cross);
            }
        }
        n_obs += x.rows();
        n_trans += x.rows() - 1;
    }

    // C = Sxz Szz^{-1}, R = mean of E[(x - C z)(x - C z)^T]
    let c = szz.add_diag(LDS_RIDGE).cholesky()?.solve_mat(&sxz.transpose()).transpose();
    let mut r = Mat::zeros(dx, dx);
    for (x, p) in seqs.iter().zip(post) {
        for (t, g) in p.marginals.iter().enumerate() {
            let resid = sub_vec(x.row(t), &c.matvec(&g.mean));
            r.add_outer(1.0, &resid, &resid);
        }
    }
    r.add_assign(&c.matmul(&szz.sub(&outer_sum_means(post))).matmul_t(&c));
    let r = r.scale(1.0 / n_obs as f64).clamp_eigenvalues(NOISE_FLOOR)?;

    // A = Scross Sprev^{-1}, Q = mean of E[(z_t - A z_{t-1})(...)^T]
    let a = s_prev.add_diag(LDS_RIDGE).cholesky()?.solve_mat(&s_cross.transpose()).transpose();
    let ac = a.matmul(&s_cross.transpose());
    let q = s_next
        .sub(&ac)
        .sub(&ac.transpose())
        .add(&a.matmul(&s_prev).matmul_t(&a))
        .scale(1.0 / n_trans.max(1) as f64)
        .symmetrize()
        .clamp_eigenvalues(NOISE_FLOOR)?;

    let firsts: Vec<&Gaussian> = post.iter().map(|p| &p.marginals[0]).collect();
    let mut mu0 = vec![0.0; dz];
    for g in &firsts {
        crate::linalg::axpy(&mut mu0, 1.0 / firsts.len() as f64, &g.mean);
    }
    // a single sequence cannot identify the initial spread
    let sigma0 = if firsts.len() >= 2 {
        let mut s = Mat::zeros(dz, dz);
        for g in &firsts {
            s.add_assign(&g.cov);
            let d = sub_vec(&g.mean, &mu0);
            s.add_outer(1.0, &d, &d);
        }
        s.scale(1.0 / firsts.len() as f64).clamp_eigenvalues(NOISE_FLOOR)?
    } else {
        cur.sigma0.clone()
    };
    Ok(LdsParams { a, c, q, r, mu0, sigma0 })
}

/// `sum_t E[z_t] E[z_t]^T`, so that `szz - this` is the summed posterior covariance.
fn outer_sum_means(post: &[LdsPosterior]) -> Mat {
    let dz = post[0].marginals[0].dim();
    let mut m = Mat::zeros(dz, dz);
    for p in post {
        for g in &p.marginals {
            m.add_outer(1.0, &g.mean, &g.mean);
        }
    }
    m
}

fn check_lds_data(seqs: &[Mat]) -> Result<usize> {
    if seqs.is_empty() {
        return Err(Error::Empty("no sequences".into()));
    }
    let dx = seqs[0].cols();
    for (i, s) in seqs.iter().enumerate() {
        if s.rows() < 2 {
            return Err(Error::InvalidData(format!("sequence {i} has fewer than 2 steps")));
        }
        if s.cols() != dx {
            return Err(shape_err(format!("sequence {i} has {} columns, expected {dx}", s.cols())));
        }
    }
    Ok(dx)
}

/// Default starting point: `A = 0.5 I`, `Q = I`, `R = diag` of the pooled data
/// covariance, `mu0 = 0`, `Sigma0 = I`; `C = I` when `d_z = d_x`, otherwise the
/// leading principal directions of the pooled data.
pub fn lds_init(seqs: &[Mat], dz: usize) -> Result<LdsParams> {
    let dx = check_lds_data(seqs)?;
    if dz == 0 {
        return Err(Error::InvalidParameter("state dimension must be positive".into()));
    }
    let refs: Vec<&Mat> = seqs.iter().collect();
    let pooled = super::pooled_rows(&refs);
    let mu = column_means(&pooled);
    let cov = scatter(&pooled, &mu);
    let c = if dz == dx {
        Mat::identity(dx)
    } else {
        let (_, vecs) = cov.sym_eigen()?;
        Mat::from_fn(dx, dz, |i, j| if j < dx { vecs[(i, j)] } else { 0.0 })
    };
    let r = Mat::diag(&cov.diagonal().iter().map(|v| v.max(1e-6)).collect::<Vec<_>>());
    LdsParams::new(Mat::identity(dz).scale(0.5), c, Mat::identity(dz), r, vec![0.0; dz], Mat::identity(dz))
}

pub fn lds_fit(seqs: &[Mat], dz: usize, cfg: &EmConfig) -> Result<(LdsParams, FitReport)> {
    let init = lds_init(seqs, dz)?;
    lds_fit_from(seqs, init, cfg)
}

pub fn lds_fit_from(seqs: &[Mat], init: LdsParams, cfg: &EmConfig) -> Result<(LdsParams, FitReport)> {
    let dx = check_lds_data(seqs)?;
    if dx != init.obs_dim() {
        return Err(shape_err(format!("data has d_x = {dx}, model has {}", init.obs_dim())));
    }
    run_em(&LdsEm { seqs }, init, cfg)
}
