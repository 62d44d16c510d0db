//! Generic expectation-maximization driver.
//!
//! A model plugs in through [`EmProblem`]: the E-step computes posterior
//! summaries at the current parameters, the M-step maps those summaries to new
//! parameters, and the objective (observed-data log-likelihood, or an ELBO) is
//! tracked every iteration. EM never decreases the objective, so a decrease
//! beyond the model's slack is reported as an error.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Stopping rule and seed for an EM run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop when `|delta| / max(1, |objective|) < rel_tol`.
    pub rel_tol: f64,
    /// Stop when `|delta| <= abs_tol`.
    pub abs_tol: f64,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iters: 500, rel_tol: 1e-7, abs_tol: 1e-12, seed: 0 }
    }
}

impl EmConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if !(self.rel_tol > 0.0) || !(self.abs_tol > 0.0) {
            return Err(Error::InvalidParameter("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Outcome of an EM run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    /// Objective after each iteration's parameter update.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iters: usize,
    pub final_objective: f64,
    /// Objective at the initial parameters.
    pub initial_objective: f64,
    /// `(iteration, component)` pairs for components re-seeded after becoming empty.
    pub rescued: Vec<(usize, usize)>,
}

impl FitReport {
    /// A report for estimators that do not iterate (closed-form fits).
    pub fn closed_form(objective: f64) -> Self {
        Self {
            objective_trace: vec![objective],
            converged: true,
            iters: 1,
            final_objective: objective,
            initial_objective: objective,
            rescued: Vec::new(),
        }
    }

    /// Largest drop between consecutive objectives (0 if monotone).
    pub fn max_decrease(&self) -> f64 {
        std::iter::once(&self.initial_objective)
            .chain(&self.objective_trace)
            .collect::<Vec<_>>()
            .windows(2)
            .map(|w| (w[0] - w[1]).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Callbacks a model supplies to [`run_em`].
pub trait EmProblem {
    type Params: Clone;
    type Stats;

    /// Posterior summaries at `params`.
    fn e_step(&self, params: &Self::Params) -> Result<Self::Stats>;

    /// Objective at `params`.
    fn objective(&self, params: &Self::Params) -> Result<f64>;

    /// New parameters from the E-step summaries. Components that had to be
    /// re-seeded are pushed onto `rescued`.
    fn m_step(
        &self,
        stats: &Self::Stats,
        current: &Self::Params,
        rescued: &mut Vec<usize>,
    ) -> Result<Self::Params>;

    /// E-step together with the objective at the same parameters. Models whose
    /// E-step yields the objective as a by-product override this.
    fn e_step_with_objective(&self, params: &Self::Params) -> Result<(Self::Stats, f64)> {
        Ok((self.e_step(params)?, self.objective(params)?))
    }

    /// Allowed objective decrease per iteration.
    fn monotonicity_slack(&self) -> f64 {
        1e-8
    }
}

/// Runs EM from `init` until the relative objective change drops below
/// `cfg.rel_tol` (or `|delta| <= cfg.abs_tol`) or `cfg.max_iters` is reached.
///
/// One iteration is an M-step followed by the E-step at the new parameters, so
/// `objective_trace[i]` is the objective after `i + 1` updates.
pub fn run_em<P: EmProblem>(problem: &P, init: P::Params, cfg: &EmConfig) -> Result<(P::Params, FitReport)> {
    cfg.validate()?;
    let slack = problem.monotonicity_slack();
    let mut params = init;
    let (mut stats, initial) = problem.e_step_with_objective(&params)?;
    check_finite(initial, 0)?;
    let mut prev = initial;
    let mut trace = Vec::new();
    let mut rescued_log = Vec::new();
    let mut converged = false;

    for iter in 1..=cfg.max_iters {
        let mut rescued = Vec::new();
        params = problem.m_step(&stats, &params, &mut rescued)?;
        let (next_stats, obj) = problem.e_step_with_objective(&params)?;
        check_finite(obj, iter)?;
        stats = next_stats;
        trace.push(obj);
        // A re-seeded component restarts part of the search, so the bound does not apply.
        if rescued.is_empty() && obj < prev - slack {
            return Err(Error::NonMonotone { iter, previous: prev, current: obj });
        }
        rescued_log.extend(rescued.into_iter().map(|k| (iter, k)));
        let delta = (obj - prev).abs();
        if delta / obj.abs().max(1.0) < cfg.rel_tol || delta <= cfg.abs_tol {
            converged = true;
            break;
        }
        prev = obj;
    }

    let final_objective = *trace.last().expect("at least one iteration");
    Ok((
        params,
        FitReport {
            iters: trace.len(),
            objective_trace: trace,
            converged,
            final_objective,
            initial_objective: initial,
            rescued: rescued_log,
        },
    ))
}

fn check_finite(obj: f64, iter: usize) -> Result<()> {
    if obj.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("objective at iteration {iter} is {obj}")))
    }
}
