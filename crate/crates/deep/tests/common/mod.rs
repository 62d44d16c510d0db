#![allow(dead_code)]

use latentlab_deep::{Parameters, Tensor};

pub const FD_EPS: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-4;

/// Central differences of `f` with respect to every parameter of `model`.
pub fn fd_grad<M: Parameters>(model: &mut M, f: impl Fn(&M) -> f64) -> Vec<Tensor> {
    let shapes: Vec<(usize, usize)> = model.params().iter().map(|t| t.shape()).collect();
    let mut out = Vec::with_capacity(shapes.len());
    for (p, &(r, c)) in shapes.iter().enumerate() {
        let mut g = Tensor::zeros(r, c);
        for k in 0..r * c {
            let orig = model.params()[p].as_slice()[k];
            model.params_mut()[p].as_mut_slice()[k] = orig + FD_EPS;
            let up = f(model);
            model.params_mut()[p].as_mut_slice()[k] = orig - FD_EPS;
            let down = f(model);
            model.params_mut()[p].as_mut_slice()[k] = orig;
            g.as_mut_slice()[k] = (up - down) / (2.0 * FD_EPS);
        }
        out.push(g);
    }
    out
}

/// Largest entrywise `|a - n| / max(|a|, |n|, floor)`.
pub fn max_rel_err_with(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    max_rel_err_with(analytic, numeric, 1e-6)
}

pub fn flatten(ts: &[Tensor]) -> Vec<f64> {
    ts.iter().flat_map(|t| t.as_slice().iter().copied()).collect()
}

/// Asserts analytic and FD gradients agree to [`FD_TOL`] and are not all zero.
pub fn assert_grads_match(analytic: &[Tensor], numeric: &[Tensor], what: &str) {
    let (a, n) = (flatten(analytic), flatten(numeric));
    let err = max_rel_err(&a, &n);
    assert!(err < FD_TOL, "{what}: relative gradient error {err}");
    assert!(a.iter().any(|v| v.abs() > 1e-8), "{what}: gradient identically zero");
}
