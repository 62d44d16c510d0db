//! Probability primitives shared by every model: log-domain sums, Gaussians,
//! simplex vectors, sampling, and categorical KL divergence.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::linalg::{sub_vec, Mat};
use crate::rng::RandomSource;

/// `ln(2 pi)`.
pub const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Stable `log(sum(exp(v)))`.
///
/// Returns `-inf` iff every entry is `-inf`.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::Empty("log_sum_exp of an empty vector".into()));
    }
    Ok(log_sum_exp_unchecked(v))
}

/// [`log_sum_exp`] for callers that guarantee non-empty input.
pub fn log_sum_exp_unchecked(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m == f64::INFINITY {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalizes log-weights in place into probabilities; returns the log normalizer.
pub fn normalize_log_weights(v: &mut [f64]) -> f64 {
    let z = log_sum_exp_unchecked(v);
    for x in v.iter_mut() {
        *x = if z.is_finite() { (*x - z).exp() } else { 0.0 };
    }
    z
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(sigmoid(x))` without cancellation.
pub fn log_sigmoid(x: f64) -> f64 {
    -softplus(-x)
}

/// `log(1 + exp(x))`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Multivariate normal `N(mean, cov)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub mean: Vec<f64>,
    pub cov: Mat,
}

impl Gaussian {
    /// Validates shapes, finiteness and symmetry (within 1e-10).
    pub fn new(mean: Vec<f64>, cov: Mat) -> Result<Self> {
        if cov.shape() != (mean.len(), mean.len()) {
            return Err(shape_err(format!(
                "mean of length {} with {}x{} covariance",
                mean.len(),
                cov.rows(),
                cov.cols()
            )));
        }
        if !cov.is_finite() || mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gaussian parameters".into()));
        }
        if !cov.is_symmetric(1e-10) {
            return Err(Error::InvalidParameter("covariance is not symmetric".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn standard(d: usize) -> Self {
        Self { mean: vec![0.0; d], cov: Mat::identity(d) }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn logpdf(&self, x: &[f64]) -> Result<f64> {
        gaussian_logpdf(x, self)
    }

    pub fn sample(&self, rng: &mut RandomSource) -> Result<Vec<f64>> {
        sample_gaussian(self, rng)
    }
}

/// Log density of a multivariate normal, evaluated through a Cholesky factor
/// (with the crate's single-jitter policy).
pub fn gaussian_logpdf(x: &[f64], g: &Gaussian) -> Result<f64> {
    if x.len() != g.dim() {
        return Err(shape_err(format!("point of length {} for a {}-d gaussian", x.len(), g.dim())));
    }
    let chol = g.cov.cholesky()?;
    Ok(logpdf_with_factor(x, &g.mean, &chol))
}

/// Log density given a pre-computed Cholesky factor of the covariance.
pub fn logpdf_with_factor(x: &[f64], mean: &[f64], chol: &crate::linalg::Cholesky) -> f64 {
    let diff = sub_vec(x, mean);
    -0.5 * (x.len() as f64 * LN_2PI + chol.log_det() + chol.quad_form(&diff))
}

/// Univariate normal log density.
pub fn normal_logpdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (LN_2PI + var.ln() + (x - mean) * (x - mean) / var)
}

/// Conditions a joint Gaussian over `(a, b)` on `b = observed_b`, where `a` is the
/// leading `joint.dim() - observed_b.len()` coordinates.
pub fn gaussian_condition(joint: &Gaussian, observed_b: &[f64]) -> Result<Gaussian> {
    let d = joint.dim();
    let nb = observed_b.len();
    if nb > d {
        return Err(shape_err(format!("{nb} observed coordinates of a {d}-d gaussian")));
    }
    let na = d - nb;
    if nb == 0 {
        return Ok(joint.clone());
    }
    let s_aa = joint.cov.block(0, 0, na, na);
    let s_ab = joint.cov.block(0, na, na, nb);
    let s_bb = joint.cov.block(na, na, nb, nb);
    let chol = s_bb
        .cholesky_strict()
        .map_err(|_| Error::Singular("observed-block covariance is not invertible".into()))?;
    let mu_a = &joint.mean[..na];
    let mu_b = &joint.mean[na..];
    let innovation = sub_vec(observed_b, mu_b);
    let shift = s_ab.matvec(&chol.solve_vec(&innovation));
    let mean: Vec<f64> = mu_a.iter().zip(&shift).map(|(m, s)| m + s).collect();
    // S_ab S_bb^{-1} S_ba
    let gain_t = chol.solve_mat(&s_ab.transpose());
    let cov = s_aa.sub(&s_ab.matmul(&gain_t)).symmetrize();
    Ok(Gaussian { mean, cov })
}

/// Draws `mean + L * e` with `L L^T = cov` and `e` standard normal. The factor
/// tolerates semi-definite covariances, so a zero covariance returns the mean.
pub fn sample_gaussian(g: &Gaussian, rng: &mut RandomSource) -> Result<Vec<f64>> {
    let l = g.cov.psd_factor()?;
    Ok(sample_with_factor(&g.mean, &l, rng))
}

pub fn sample_with_factor(mean: &[f64], l: &Mat, rng: &mut RandomSource) -> Vec<f64> {
    let e = rng.normal_vec(mean.len());
    let mut x = l.matvec(&e);
    for (xi, m) in x.iter_mut().zip(mean) {
        *xi += m;
    }
    x
}

/// Probability vector: non-negative entries summing to one (within 1e-12).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Simplex(Vec<f64>);

impl Simplex {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Empty("simplex with no entries".into()));
        }
        if probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidParameter("simplex entries must be finite and >= 0".into()));
        }
        let s: f64 = probs.iter().sum();
        if (s - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("simplex sums to {s}")));
        }
        Ok(Self(probs))
    }

    /// Normalizes non-negative weights.
    pub fn from_weights(w: &[f64]) -> Result<Self> {
        let s: f64 = w.iter().sum();
        if !(s > 0.0) || !s.is_finite() || w.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidParameter("weights must be non-negative with positive sum".into()));
        }
        let mut p: Vec<f64> = w.iter().map(|v| v / s).collect();
        renormalize(&mut p);
        Ok(Self(p))
    }

    /// Softmax of log-weights.
    pub fn from_log_weights(lw: &[f64]) -> Result<Self> {
        let mut p = lw.to_vec();
        let z = normalize_log_weights(&mut p);
        if !z.is_finite() {
            return Err(Error::ZeroProbability("all log-weights are -inf".into()));
        }
        renormalize(&mut p);
        Ok(Self(p))
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn point_mass(k: usize, at: usize) -> Self {
        let mut p = vec![0.0; k];
        p[at] = 1.0;
        Self(p)
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.0.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
    }

    /// Index of the largest entry (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.0.iter().enumerate() {
            if p > self.0[best] {
                best = i;
            }
        }
        best
    }

    /// Raises every entry to at least `floor`, then renormalizes.
    pub fn floored(&self, floor: f64) -> Self {
        let w: Vec<f64> = self.0.iter().map(|&p| p.max(floor)).collect();
        Self::from_weights(&w).expect("floored weights are positive")
    }
}

impl TryFrom<Vec<f64>> for Simplex {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Simplex::new(v)
    }
}

impl From<Simplex> for Vec<f64> {
    fn from(s: Simplex) -> Self {
        s.0
    }
}

/// Pushes the rounding residue of a normalized vector onto its largest entry so
/// the sum is 1 to within an ulp or two.
fn renormalize(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    if s > 0.0 {
        p.iter_mut().for_each(|v| *v /= s);
    }
    let s: f64 = p.iter().sum();
    if let Some((i, _)) = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)) {
        p[i] += 1.0 - s;
    }
}

/// Inverse-CDF draw of an index.
pub fn sample_categorical(p: &Simplex, rng: &mut RandomSource) -> usize {
    sample_index(p.probs(), rng)
}

/// Inverse-CDF draw from unnormalized non-negative weights.
pub fn sample_index(w: &[f64], rng: &mut RandomSource) -> usize {
    let total: f64 = w.iter().sum();
    let u = rng.uniform() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in w.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Dirichlet draw via normalized Gamma variates.
pub fn sample_dirichlet(alpha: &[f64], rng: &mut RandomSource) -> Result<Simplex> {
    if alpha.is_empty() {
        return Err(Error::Empty("dirichlet with no concentration".into()));
    }
    if alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
        return Err(Error::InvalidParameter("dirichlet concentrations must be positive".into()));
    }
    let g: Vec<f64> = alpha.iter().map(|&a| rng.gamma(a)).collect();
    if g.iter().sum::<f64>() > 0.0 {
        return Simplex::from_weights(&g);
    }
    // All gammas underflowed (tiny concentrations): fall back to log-space draws.
    // For shape a < 1, Gamma(a) = Gamma(a + 1) * U^(1/a).
    let lg: Vec<f64> = alpha
        .iter()
        .map(|&a| rng.gamma(a + 1.0).ln() + rng.uniform_open().ln() / a)
        .collect();
    Simplex::from_log_weights(&lg)
}

/// Cross-entropy `H(q, p) = -sum q log p`; `+inf` when `p` misses support of `q`.
pub fn cross_entropy(q: &Simplex, p: &Simplex) -> f64 {
    q.probs()
        .iter()
        .zip(p.probs())
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| if pi > 0.0 { -qi * pi.ln() } else { f64::INFINITY })
        .sum()
}

/// `KL(q || p) = sum q log(q / p)`.
///
/// Returns `+inf` when `q` puts mass where `p` has none; use
/// [`kl_support_violated`] to detect that case explicitly.
pub fn kl_divergence_categorical(q: &Simplex, p: &Simplex) -> Result<f64> {
    if q.len() != p.len() {
        return Err(shape_err(format!("KL between {}- and {}-simplexes", q.len(), p.len())));
    }
    if kl_support_violated(q, p) {
        return Ok(f64::INFINITY);
    }
    let kl: f64 = q
        .probs()
        .iter()
        .zip(p.probs())
        .filter(|(&qi, _)| qi > 0.0)
        .map(|(&qi, &pi)| qi * (qi / pi).ln())
        .sum();
    Ok(kl.max(0.0))
}

pub fn kl_support_violated(q: &Simplex, p: &Simplex) -> bool {
    q.probs().iter().zip(p.probs()).any(|(&qi, &pi)| qi > 0.0 && pi <= 0.0)
}

/// KL between diagonal Gaussians `N(mu, diag(var_q))` and `N(0, I)`.
pub fn kl_diag_gaussian_to_standard(mu: &[f64], var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(var)
        .map(|(&m, &v)| v + m * m - 1.0 - v.ln())
        .sum::<f64>()
}

/// Standard normal density (used by quadrature oracles).
pub fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}
