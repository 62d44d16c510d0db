//! Two-parameter logistic item response model.
//!
//! Person ability `theta ~ N(0, 1)`, binary responses with
//! `P(X_j = 1 | theta) = sigmoid(a_j * theta - b_j)`. The ability integral has no
//! closed form, so the marginal likelihood and the E-step use Gauss-Hermite
//! quadrature under the standard-normal measure.

use serde::{Deserialize, Serialize};

use crate::em::{run_em, EmConfig, EmProblem, FitReport};
use crate::error::{shape_err, Error, Result};
use crate::linalg::Mat;
use crate::par;
use crate::prob::{log_sigmoid, log_sum_exp_unchecked, sigmoid, Simplex};

/// Default number of quadrature nodes.
pub const DEFAULT_NODES: usize = 41;

const NEWTON_STEPS: usize = 25;
const GRAD_TOL: f64 = 1e-10;
/// Bounds on `ln a` during fitting; keeps perfectly separating items finite.
const LOG_A_RANGE: (f64, f64) = (-12.0, 4.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrtParams {
    /// Discriminations.
    pub a: Vec<f64>,
    /// Difficulties.
    pub b: Vec<f64>,
}

impl IrtParams {
    /// `a_j = 0` is accepted so that uninformative items can be evaluated; fitted
    /// discriminations are always positive.
    pub fn new(a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() {
            return Err(shape_err(format!("{} discriminations, {} difficulties", a.len(), b.len())));
        }
        if a.is_empty() {
            return Err(Error::Empty("no items".into()));
        }
        if a.iter().chain(&b).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("item parameters".into()));
        }
        if let Some(j) = a.iter().position(|&v| v < 0.0) {
            return Err(Error::InvalidParameter(format!("item {j}: discrimination must be non-negative")));
        }
        Ok(Self { a, b })
    }

    pub fn n_items(&self) -> usize {
        self.a.len()
    }
}

/// `sigmoid(a * theta - b)`.
pub fn item_prob(theta: f64, a: f64, b: f64) -> f64 {
    sigmoid(a * theta - b)
}

/// Log Bernoulli probability of response `x` at logit `z`.
fn log_bernoulli(x: bool, z: f64) -> f64 {
    if x {
        log_sigmoid(z)
    } else {
        log_sigmoid(-z)
    }
}

/// Quadrature nodes and weights for expectations under `N(0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureRule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl QuadratureRule {
    /// `n`-point Gauss-Hermite rule for the standard-normal measure (exact for
    /// polynomials of degree `< 2n`).
    ///
    /// Nodes start from the eigenvalues of the Jacobi matrix of the
    /// probabilists' Hermite polynomials and are polished by Newton's method;
    /// weights use `n! / (n He_{n-1}(x))^2`, which stays accurate in the tails
    /// where eigenvector components underflow.
    pub fn gauss_hermite(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidParameter("quadrature needs at least one node".into()));
        }
        let jacobi = Mat::from_fn(n, n, |i, j| {
            if i + 1 == j || j + 1 == i {
                (i.max(j) as f64).sqrt()
            } else {
                0.0
            }
        });
        let (mut nodes, _) = jacobi.sym_eigen()?;
        nodes.reverse();
        let ln_fact: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
        let mut weights = Vec::with_capacity(n);
        for x in nodes.iter_mut() {
            for _ in 0..3 {
                let (h, h1) = hermite_pair(n, *x);
                let step = h / (n as f64 * h1);
                if step.is_finite() {
                    *x -= step;
                }
            }
            let (_, h1) = hermite_pair(n, *x);
            weights.push((ln_fact - 2.0 * ((n as f64).ln() + h1.abs().ln())).exp());
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Self { nodes, weights })
    }

    pub fn standard() -> Self {
        Self::gauss_hermite(DEFAULT_NODES).expect("default rule")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn log_weights(&self) -> Vec<f64> {
        self.weights.iter().map(|w| w.ln()).collect()
    }
}

/// `(He_n(x), He_{n-1}(x))` by the three-term recurrence.
fn hermite_pair(n: usize, x: f64) -> (f64, f64) {
    let (mut prev, mut cur) = (1.0, x);
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

fn validate_responses(params: &IrtParams, responses: &Mat) -> Result<()> {
    if responses.cols() != params.n_items() {
        return Err(shape_err(format!(
            "responses have {} items, model has {}",
            responses.cols(),
            params.n_items()
        )));
    }
    check_binary(responses)
}

fn check_binary(responses: &Mat) -> Result<()> {
    for (i, row) in responses.row_iter().enumerate() {
        if let Some(j) = row.iter().position(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidData(format!("row {i}, item {j}: response {} is not 0 or 1", row[j])));
        }
    }
    Ok(())
}

/// `log w_q + log P(x | theta_q)` for every node.
fn person_log_joint(params: &IrtParams, x: &[f64], quad: &QuadratureRule, log_w: &[f64]) -> Vec<f64> {
    quad.nodes
        .iter()
        .zip(log_w)
        .map(|(&t, &lw)| {
            lw + x
                .iter()
                .enumerate()
                .map(|(j, &xj)| log_bernoulli(xj == 1.0, params.a[j] * t - params.b[j]))
                .sum::<f64>()
        })
        .collect()
}

/// Quadrature approximation of `sum_i log int P(x_i | theta) N(theta | 0, 1) dtheta`.
pub fn marginal_loglik(params: &IrtParams, responses: &Mat, quad: &QuadratureRule) -> Result<f64> {
    Ok(pointwise_loglik(params, responses, quad)?.iter().sum())
}

pub fn pointwise_loglik(params: &IrtParams, responses: &Mat, quad: &QuadratureRule) -> Result<Vec<f64>> {
    validate_responses(params, responses)?;
    let log_w = quad.log_weights();
    Ok(par::map_range(responses.rows(), |i| {
        log_sum_exp_unchecked(&person_log_joint(params, responses.row(i), quad, &log_w))
    }))
}

/// Posterior over ability for one response pattern.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThetaPosterior {
    /// Posterior mean.
    pub eap: f64,
    /// Posterior standard deviation.
    pub sd: f64,
    pub node_weights: Simplex,
}

pub fn posterior_theta(params: &IrtParams, x: &[f64], quad: &QuadratureRule) -> Result<ThetaPosterior> {
    let m = Mat::from_vec(1, x.len(), x.to_vec())?;
    validate_responses(params, &m)?;
    let lj = person_log_joint(params, x, quad, &quad.log_weights());
    let w = Simplex::from_log_weights(&lj)?;
    let eap: f64 = w.probs().iter().zip(&quad.nodes).map(|(p, t)| p * t).sum();
    let var: f64 = w.probs().iter().zip(&quad.nodes).map(|(p, t)| p * (t - eap) * (t - eap)).sum();
    Ok(ThetaPosterior { eap, sd: var.sqrt(), node_weights: w })
}

/// Expected complete-data counts: `n[q]` persons at node `q` and `r[j][q]` of
/// them answering item `j` correctly.
pub struct IrtStats {
    n: Vec<f64>,
    r: Vec<Vec<f64>>,
    loglik: f64,
}

fn e_step(params: &IrtParams, responses: &Mat, quad: &QuadratureRule) -> IrtStats {
    let log_w = quad.log_weights();
    let q = quad.len();
    let j_items = params.n_items();
    let rows = par::map_range(responses.rows(), |i| {
        let mut lj = person_log_joint(params, responses.row(i), quad, &log_w);
        let ll = log_sum_exp_unchecked(&lj);
        lj.iter_mut().for_each(|v| *v = (*v - ll).exp());
        (lj, ll)
    });
    let mut n = vec![0.0; q];
    let mut r = vec![vec![0.0; q]; j_items];
    let mut loglik = 0.0;
    for (i, (post, ll)) in rows.iter().enumerate() {
        loglik += ll;
        for (nq, p) in n.iter_mut().zip(post) {
            *nq += p;
        }
        for (j, &x) in responses.row(i).iter().enumerate() {
            if x == 1.0 {
                for (rq, p) in r[j].iter_mut().zip(post) {
                    *rq += p;
                }
            }
        }
    }
    IrtStats { n, r, loglik }
}

/// Expected complete-data log-likelihood of one item at `(ln a, b)`.
fn item_objective(nodes: &[f64], n: &[f64], r: &[f64], log_a: f64, b: f64) -> f64 {
    let a = log_a.exp();
    nodes
        .iter()
        .enumerate()
        .map(|(q, &t)| {
            let z = a * t - b;
            r[q] * log_sigmoid(z) + (n[q] - r[q]) * log_sigmoid(-z)
        })
        .sum()
}

/// Gradient and Hessian of [`item_objective`] in `(ln a, b)`.
fn item_derivatives(nodes: &[f64], n: &[f64], r: &[f64], log_a: f64, b: f64) -> ([f64; 2], [[f64; 2]; 2]) {
    let a = log_a.exp();
    let mut g = [0.0; 2];
    let mut h = [[0.0; 2]; 2];
    for (q, &t) in nodes.iter().enumerate() {
        let p = sigmoid(a * t - b);
        let gz = r[q] - n[q] * p;
        let hz = n[q] * p * (1.0 - p);
        let at = a * t;
        g[0] += gz * at;
        g[1] -= gz;
        h[0][0] += -hz * at * at + gz * at;
        h[0][1] += hz * at;
        h[1][1] -= hz;
    }
    h[1][0] = h[0][1];
    (g, h)
}

/// Maximizes one item's expected log-likelihood from `(log_a, b)` by damped
/// Newton steps. With `fixed_a` only `b` moves.
fn maximize_item(nodes: &[f64], n: &[f64], r: &[f64], mut log_a: f64, mut b: f64, fixed_a: bool) -> (f64, f64) {
    let mut f = item_objective(nodes, n, r, log_a, b);
    for _ in 0..NEWTON_STEPS {
        let (g, h) = item_derivatives(nodes, n, r, log_a, b);
        let gnorm = if fixed_a { g[1].abs() } else { g[0].hypot(g[1]) };
        if gnorm < GRAD_TOL {
            break;
        }
        let mut step = if fixed_a {
            [0.0, if h[1][1] < 0.0 { -g[1] / h[1][1] } else { g[1] }]
        } else {
            let det = h[0][0] * h[1][1] - h[0][1] * h[1][0];
            if h[0][0] < 0.0 && det > 0.0 {
                [
                    -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                    -(-h[1][0] * g[0] + h[0][0] * g[1]) / det,
                ]
            } else {
                // not locally concave: plain gradient ascent
                let s = 1.0 / (1.0 + gnorm);
                [s * g[0], s * g[1]]
            }
        };
        let mut accepted = false;
        for _ in 0..40 {
            let la = (log_a + step[0]).clamp(LOG_A_RANGE.0, LOG_A_RANGE.1);
            let nb = b + step[1];
            let nf = item_objective(nodes, n, r, la, nb);
            if nf >= f {
                accepted = nf > f || (la, nb) != (log_a, b);
                log_a = la;
                b = nb;
                f = nf;
                break;
            }
            step = [0.5 * step[0], 0.5 * step[1]];
        }
        if !accepted {
            break;
        }
    }
    (log_a, b)
}

/// Options for [`fit_irt_with`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrtFitOptions {
    /// Hold every discrimination at this value and estimate difficulties only.
    pub fixed_discrimination: Option<f64>,
}

struct IrtEm<'a> {
    responses: &'a Mat,
    quad: &'a QuadratureRule,
    fixed_a: bool,
}

impl EmProblem for IrtEm<'_> {
    type Params = IrtParams;
    type Stats = IrtStats;

    fn e_step(&self, p: &IrtParams) -> Result<IrtStats> {
        Ok(e_step(p, self.responses, self.quad))
    }

    fn objective(&self, p: &IrtParams) -> Result<f64> {
        marginal_loglik(p, self.responses, self.quad)
    }

    fn e_step_with_objective(&self, p: &IrtParams) -> Result<(IrtStats, f64)> {
        let s = e_step(p, self.responses, self.quad);
        let ll = s.loglik;
        Ok((s, ll))
    }

    fn m_step(&self, s: &IrtStats, cur: &IrtParams, _: &mut Vec<usize>) -> Result<IrtParams> {
        let nodes = &self.quad.nodes;
        let updated = par::map_range(cur.n_items(), |j| {
            let (la, b) = maximize_item(nodes, &s.n, &s.r[j], cur.a[j].ln(), cur.b[j], self.fixed_a);
            (la.exp(), b)
        });
        let (a, b) = updated.into_iter().unzip();
        IrtParams::new(a, b)
    }

    fn monotonicity_slack(&self) -> f64 {
        1e-6
    }
}

/// Starting values: `a = 1`, `b` matching each item's observed proportion at `theta = 0`.
pub fn irt_init(responses: &Mat) -> Result<IrtParams> {
    let (n, j_items) = responses.shape();
    if n < 2 {
        return Err(Error::InvalidData(format!("need at least 2 persons, got {n}")));
    }
    if j_items == 0 {
        return Err(Error::Empty("no items".into()));
    }
    check_binary(responses)?;
    let mut b = Vec::with_capacity(j_items);
    for j in 0..j_items {
        let p = responses.col(j).iter().sum::<f64>() / n as f64;
        if p == 0.0 || p == 1.0 {
            return Err(Error::InvalidData(format!(
                "item {j} has constant responses; its parameters are not identifiable"
            )));
        }
        b.push(-(p / (1.0 - p)).ln());
    }
    IrtParams::new(vec![1.0; j_items], b)
}

pub fn fit_irt(responses: &Mat, quad: &QuadratureRule, cfg: &EmConfig) -> Result<(IrtParams, FitReport)> {
    fit_irt_with(responses, quad, cfg, &IrtFitOptions::default())
}

pub fn fit_irt_with(
    responses: &Mat,
    quad: &QuadratureRule,
    cfg: &EmConfig,
    opts: &IrtFitOptions,
) -> Result<(IrtParams, FitReport)> {
    let mut init = irt_init(responses)?;
    if let Some(a) = opts.fixed_discrimination {
        if !(a > 0.0) || !a.is_finite() {
            return Err(Error::InvalidParameter(format!("fixed discrimination {a} must be positive")));
        }
        init.a.iter_mut().for_each(|v| *v = a);
    }
    fit_irt_from(responses, quad, init, cfg, opts)
}

pub fn fit_irt_from(
    responses: &Mat,
    quad: &QuadratureRule,
    init: IrtParams,
    cfg: &EmConfig,
    opts: &IrtFitOptions,
) -> Result<(IrtParams, FitReport)> {
    validate_responses(&init, responses)?;
    if init.a.iter().any(|&a| a <= 0.0) {
        return Err(Error::InvalidParameter("initial discriminations must be positive".into()));
    }
    let problem = IrtEm { responses, quad, fixed_a: opts.fixed_discrimination.is_some() };
    run_em(&problem, init, cfg)
}
