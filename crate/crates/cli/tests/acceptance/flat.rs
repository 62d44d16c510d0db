//! PPCA exactness and the flat-model oracles (GMM, LCA, IRT).

use latentlab_core::datasets::CategoricalData;
use latentlab_core::irt::{marginal_loglik as irt_loglik, IrtParams, QuadratureRule};
use latentlab_core::linalg::sub_vec;
use latentlab_core::mixture::{gmm_e_step, lca_e_step, GmmParams, LcaParams};
use latentlab_core::ppca::{self, PpcaParams, SampleFrom};
use latentlab_core::prob::{gaussian_condition, Gaussian};
use latentlab_core::{EmConfig, Mat, RandomSource};

use crate::support::{max_abs_diff, random_simplex, random_spd, Context, Outcome};

pub fn ppca_exactness() -> Outcome {
    let mut rng = RandomSource::new(21);
    let (d, m) = (5, 2);
    let (mut worst_ll, mut worst_cov) = (0.0f64, 0.0f64);
    for case in 0..10 {
        let w = Mat::from_fn(d, m, |_, _| rng.normal());
        let truth = PpcaParams::new(w, rng.normal_vec(d), 0.1 + rng.uniform()).ctx("truth")?;
        let data = ppca::sample(&truth, 400, &mut rng, SampleFrom::Prior).ctx("sample")?;
        let cf = ppca::fit_closed_form(&data, m).ctx("closed form")?;
        let cfg = EmConfig { max_iters: 20_000, rel_tol: 1e-13, abs_tol: 1e-12, ..EmConfig::with_seed(case) };
        let (em, _) = ppca::fit_em(&data, m, &cfg).ctx("em")?;
        let l_cf = ppca::marginal_loglik(&cf, &data).ctx("loglik")?;
        let l_em = ppca::marginal_loglik(&em, &data).ctx("loglik")?;
        let dcov = cf.marginal_cov().sub(&em.marginal_cov()).frobenius_norm();
        ensure!((l_cf - l_em).abs() < 1e-4, "case {case}: log-likelihoods {l_cf} vs {l_em}");
        ensure!(dcov < 1e-3, "case {case}: covariance gap {dcov:e}");
        worst_ll = worst_ll.max((l_cf - l_em).abs());
        worst_cov = worst_cov.max(dcov);
    }

    // posterior against conditioning the joint of (z, x)
    let mut worst_post = 0.0f64;
    for _ in 0..10 {
        let p = PpcaParams::new(Mat::from_fn(d, m, |_, _| rng.normal()), rng.normal_vec(d), 0.2 + rng.uniform()).ctx("params")?;
        let mut cov = Mat::zeros(m + d, m + d);
        cov.set_block(0, 0, &Mat::identity(m));
        cov.set_block(0, m, &p.w.transpose());
        cov.set_block(m, 0, &p.w);
        cov.set_block(m, m, &p.w.matmul_t(&p.w).add_diag(p.sigma2));
        let mut mean = vec![0.0; m];
        mean.extend_from_slice(&p.mu);
        let x = rng.normal_vec(d);
        let oracle = gaussian_condition(&Gaussian::new(mean, cov).ctx("joint")?, &x).ctx("condition")?;
        let post = ppca::posterior(&p, &x).ctx("posterior")?;
        let err = max_abs_diff(&post.mean, &oracle.mean).max(post.cov.max_abs_diff(&oracle.cov));
        ensure!(err < 1e-10, "posterior differs from conditioning by {err:e}");
        worst_post = worst_post.max(err);
    }

    // zero noise, orthonormal loadings: points in the subspace come back exactly
    let mut worst_rec = 0.0f64;
    for _ in 0..10 {
        let (_, q) = random_spd(&mut rng, d, 1.0, 0.0).sym_eigen().ctx("eigen")?;
        let w = q.select_cols(&[0, 1]);
        let mu = rng.normal_vec(d);
        let pca = PpcaParams::pca_limit(w.clone(), mu.clone()).ctx("pca limit")?;
        let z = rng.normal_vec(m);
        let x: Vec<f64> = w.matvec(&z).iter().zip(&mu).map(|(a, b)| a + b).collect();
        let back = ppca::reconstruct(&pca, &x).ctx("reconstruct")?;
        let post = ppca::posterior(&pca, &x).ctx("posterior")?;
        let proj = w.t_matvec(&sub_vec(&x, &mu));
        let err = max_abs_diff(&back, &x).max(max_abs_diff(&post.mean, &proj));
        ensure!(err < 1e-10, "noiseless reconstruction error {err:e}");
        worst_rec = worst_rec.max(err);
    }
    Ok(format!(
        "closed form vs EM: loglik {worst_ll:.1e}, cov {worst_cov:.1e}; posterior {worst_post:.1e}; reconstruction {worst_rec:.1e}"
    ))
}

/// Bivariate normal density written out by hand.
fn density2(x: &[f64], mean: &[f64], cov: &Mat) -> f64 {
    let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let det = a * c - b * b;
    let (u, v) = (x[0] - mean[0], x[1] - mean[1]);
    (-0.5 * (c * u * u - 2.0 * b * u * v + a * v * v) / det).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

fn pattern_prob(a: &[f64], b: &[f64], x: &[f64], theta: f64) -> f64 {
    (0..a.len())
        .map(|j| {
            let p = 1.0 / (1.0 + (b[j] - a[j] * theta).exp());
            if x[j] == 1.0 {
                p
            } else {
                1.0 - p
            }
        })
        .product()
}

pub fn flat_oracles() -> Outcome {
    let mut rng = RandomSource::new(22);

    let mut worst_gmm = 0.0f64;
    for _ in 0..10 {
        let k = 3;
        let means: Vec<Vec<f64>> = (0..k).map(|_| rng.normal_vec(2).iter().map(|v| 2.0 * v).collect()).collect();
        let covs: Vec<Mat> = (0..k).map(|_| random_spd(&mut rng, 2, 1.0, 0.2)).collect();
        let p = GmmParams::new(random_simplex(&mut rng, k), means, covs).ctx("gmm")?;
        let x = Mat::from_fn(30, 2, |_, _| 2.5 * rng.normal());
        let resp = gmm_e_step(&p, &x).ctx("e-step")?;
        for (i, row) in x.row_iter().enumerate() {
            let joint: Vec<f64> = (0..k).map(|c| p.weights.probs()[c] * density2(row, &p.means[c], &p.covs[c])).collect();
            let z: f64 = joint.iter().sum();
            let oracle: Vec<f64> = joint.iter().map(|j| j / z).collect();
            worst_gmm = worst_gmm.max(max_abs_diff(resp.gamma.row(i), &oracle));
        }
    }
    ensure!(worst_gmm < 1e-12, "GMM responsibilities off by {worst_gmm:e}");

    let mut worst_lca = 0.0f64;
    for _ in 0..10 {
        let (k, cats) = (3, vec![2, 3, 4, 2]);
        let tables: Vec<Vec<_>> = (0..k).map(|_| cats.iter().map(|&c| random_simplex(&mut rng, c)).collect()).collect();
        let p = LcaParams::new(random_simplex(&mut rng, k), tables).ctx("lca")?;
        let codes: Vec<Vec<usize>> = (0..30).map(|_| cats.iter().map(|&c| rng.below(c)).collect()).collect();
        let data = CategoricalData::new(codes.clone(), cats.clone()).ctx("data")?;
        let resp = lca_e_step(&p, &data).ctx("e-step")?;
        for (i, row) in codes.iter().enumerate() {
            let joint: Vec<f64> = (0..k)
                .map(|c| p.weights.probs()[c] * row.iter().enumerate().map(|(j, &x)| p.item_probs[c][j].probs()[x]).product::<f64>())
                .collect();
            let z: f64 = joint.iter().sum();
            let oracle: Vec<f64> = joint.iter().map(|j| j / z).collect();
            worst_lca = worst_lca.max(max_abs_diff(resp.gamma.row(i), &oracle));
        }
    }
    ensure!(worst_lca < 1e-12, "LCA responsibilities off by {worst_lca:e}");

    // IRT marginal likelihood against a million ability draws
    let a = [0.6, 1.3, 2.0, 0.9];
    let b = [-0.8, 0.2, 1.1, -0.1];
    let params = IrtParams::new(a.to_vec(), b.to_vec()).ctx("irt")?;
    let q = QuadratureRule::standard();
    let thetas: Vec<f64> = (0..1_000_000).map(|_| rng.normal()).collect();
    let mut worst_mc = 0.0f64;
    for code in 0..16usize {
        let x: Vec<f64> = (0..4).map(|j| ((code >> j) & 1) as f64).collect();
        let mc = thetas.iter().map(|&t| pattern_prob(&a, &b, &x, t)).sum::<f64>() / thetas.len() as f64;
        let quad = irt_loglik(&params, &Mat::from_vec(1, 4, x.clone()).ctx("row")?, &q).ctx("marginal")?.exp();
        worst_mc = worst_mc.max((mc - quad).abs());
    }
    ensure!(worst_mc < 2e-3, "IRT marginal vs Monte Carlo off by {worst_mc:e}");

    let doubled = QuadratureRule::gauss_hermite(2 * q.len()).ctx("rule")?;
    let mut worst_quad = 0.0f64;
    for _ in 0..5 {
        let j = 8;
        let p = IrtParams::new((0..j).map(|_| 0.4 + 2.0 * rng.uniform()).collect(), (0..j).map(|_| 3.0 * rng.normal()).collect())
            .ctx("irt")?;
        let x = Mat::from_fn(200, j, |_, _| f64::from(u8::from(rng.uniform() < 0.5)));
        let l1 = irt_loglik(&p, &x, &q).ctx("marginal")?;
        let l2 = irt_loglik(&p, &x, &doubled).ctx("marginal")?;
        worst_quad = worst_quad.max((l1 - l2).abs());
    }
    ensure!(worst_quad < 1e-4, "doubling the quadrature moved the log-likelihood by {worst_quad:e}");
    Ok(format!(
        "GMM {worst_gmm:.1e}, LCA {worst_lca:.1e}, IRT vs MC {worst_mc:.1e}, quadrature doubling {worst_quad:.1e}"
    ))
}
