#![allow(dead_code)]

use latentlab_core::{FitReport, Mat, RandomSource, Simplex};
use latentlab_deep::{Parameters, Tensor};

/// `Ok(detail)` on success, `Err(reason)` on failure.
pub type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

/// Turns any displayable error into a failure reason.
pub trait Context<T> {
    fn ctx(self, what: &str) -> Result<T, String>;
}

impl<T, E: std::fmt::Display> Context<T> for Result<T, E> {
    fn ctx(self, what: &str) -> Result<T, String> {
        self.map_err(|e| format!("{what}: {e}"))
    }
}

pub fn random_simplex(rng: &mut RandomSource, k: usize) -> Simplex {
    let w: Vec<f64> = (0..k).map(|_| 0.05 + rng.uniform()).collect();
    Simplex::from_weights(&w).unwrap()
}

pub fn random_spd(rng: &mut RandomSource, d: usize, scale: f64, ridge: f64) -> Mat {
    let a = Mat::from_fn(d, d, |_, _| rng.normal());
    a.matmul_t(&a).scale(scale).add_diag(ridge)
}

/// Largest drop along `initial, trace...`, skipping iterations that re-seeded
/// a component.
pub fn worst_drop(rep: &FitReport) -> f64 {
    let mut prev = rep.initial_objective;
    let mut worst = 0.0f64;
    for (i, &obj) in rep.objective_trace.iter().enumerate() {
        let iter = i + 1;
        if !rep.rescued.iter().any(|&(it, _)| it == iter) {
            worst = worst.max(prev - obj);
        }
        prev = obj;
    }
    worst
}

pub fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

const FD_STEP: f64 = 1e-4;

/// Central differences of `f` with respect to every parameter of `model`.
pub fn fd_grad<M: Parameters>(model: &mut M, f: impl Fn(&M) -> f64) -> Vec<Tensor> {
    let shapes: Vec<(usize, usize)> = model.params().iter().map(|t| t.shape()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (p, &(r, c)) in shapes.iter().enumerate() {
        let mut g = Tensor::zeros(r, c);
        for k in 0..r * c {
            let orig = model.params()[p].as_slice()[k];
            model.params_mut()[p].as_mut_slice()[k] = orig + FD_STEP;
            let up = f(model);
            model.params_mut()[p].as_mut_slice()[k] = orig - FD_STEP;
            let down = f(model);
            model.params_mut()[p].as_mut_slice()[k] = orig;
            g.as_mut_slice()[k] = (up - down) / (2.0 * FD_STEP);
        }
        out.push(g);
    }
    out
}

/// Largest entrywise relative error between two gradient lists, with
/// magnitudes below 1e-6 treated as 1e-6. Fails on an all-zero gradient.
pub fn grad_error(analytic: &[Tensor], numeric: &[Tensor]) -> Result<f64, String> {
    let a: Vec<f64> = analytic.iter().flat_map(|t| t.as_slice().iter().copied()).collect();
    let n: Vec<f64> = numeric.iter().flat_map(|t| t.as_slice().iter().copied()).collect();
    ensure!(a.len() == n.len(), "gradient sizes differ: {} vs {}", a.len(), n.len());
    ensure!(a.iter().any(|v| v.abs() > 1e-8), "analytic gradient is identically zero");
    Ok(a.iter().zip(&n).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6)).fold(0.0, f64::max))
}
