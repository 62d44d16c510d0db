//! Deep generative models: VAE bound, flow exactness, diffusion consistency,
//! autoregressive normalization and the gradient suite.

use latentlab_core::ppca::{self, PpcaParams};
use latentlab_core::prob::{gaussian_condition, Gaussian};
use latentlab_core::{Mat, RandomSource};
use latentlab_deep::arm::ArModel;
use latentlab_deep::diffusion::{
    elbo_terms, posterior_params, q_step, DiffusionModel, NoisePredictor, NoiseSchedule, EMBED_DIM,
};
use latentlab_deep::flow::{FlowLayer, FlowModel, PlanarLayer};
use latentlab_deep::gan::{GanModel, GenLoss};
use latentlab_deep::vae::{kl_to_standard, Likelihood, VaeModel};
use latentlab_deep::{Activation, Mlp, Parameters, Tensor};

use crate::support::{fd_grad, grad_error, max_abs_diff, mean_se, Context, Outcome};

fn linear(rows: usize, cols: usize, w: &[f64], b: &[f64]) -> Result<Mlp, String> {
    let mut m = Mlp::zeros(&[rows, cols], Activation::Identity, Activation::Identity).ctx("mlp")?;
    m.layers[0].w = Tensor::from_vec(rows, cols, w.to_vec()).ctx("weights")?;
    m.layers[0].b = Tensor::row_vector(b);
    Ok(m)
}

fn jitter<M: Parameters>(model: &mut M, scale: f64, rng: &mut RandomSource) {
    for p in model.params_mut() {
        for v in p.as_mut_slice() {
            *v += scale * rng.normal();
        }
    }
}

pub fn vae_bound() -> Outcome {
    ensure!(kl_to_standard(&[0.0], &[1.0]) == 0.0, "KL(N(0,1) || N(0,1)) is not 0");
    ensure!(kl_to_standard(&[1.0], &[1.0]) == 0.5, "KL(N(1,1) || N(0,1)) is not 0.5");

    // decoder mean W z + mu with noise sigma is exactly PPCA
    let (w, mu, sigma) = ([1.0, 0.5], [0.2, -0.1], 0.5);
    let params = PpcaParams::new(Mat::from_vec(2, 1, w.to_vec()).ctx("W")?, mu.to_vec(), sigma * sigma).ctx("ppca")?;
    let decoder = linear(1, 2, &w, &mu)?;
    let encoder = linear(2, 2, &[0.3, -0.5, 0.1, 0.2], &[0.1, -0.3])?;
    let vae = VaeModel::from_parts(encoder, decoder, Likelihood::Gaussian { sigma }).ctx("vae")?;
    let mut rng = RandomSource::new(26);
    let n = 10_000;
    let mut worst = f64::NEG_INFINITY;
    for x in [[0.2, -0.1], [1.5, 0.9], [-2.0, 0.4], [0.0, 3.0]] {
        let xm = Mat::from_vec(1, 2, x.to_vec()).ctx("x")?;
        let exact = ppca::pointwise_loglik(&params, &xm).ctx("ppca loglik")?[0];
        let draws = (0..n)
            .map(|_| {
                let eps = Mat::from_fn(1, 1, |_, _| rng.normal());
                vae.elbo_with_noise(&xm, &eps).map(|p| p.elbo)
            })
            .collect::<Result<Vec<_>, _>>()
            .ctx("elbo")?;
        let (m, se) = mean_se(&draws);
        ensure!(m <= exact + 3.0 * se, "x={x:?}: ELBO {m} above log p(x) {exact} (se {se:.1e})");
        worst = worst.max((m - exact) / se);
    }
    Ok(format!("KL cases exact; ELBO minus log p(x) at most {worst:.1} standard errors over 4 points"))
}

/// `ln |det J|` of the forward map by central differences.
fn fd_logdet(model: &FlowModel, z: &[f64]) -> Result<f64, String> {
    let d = z.len();
    let h = 1e-5;
    let mut jac = Mat::zeros(d, d);
    for j in 0..d {
        let (mut up, mut down) = (z.to_vec(), z.to_vec());
        up[j] += h;
        down[j] -= h;
        let (fu, _) = model.forward_with_logdet(&up).ctx("forward")?;
        let (fd, _) = model.forward_with_logdet(&down).ctx("forward")?;
        for i in 0..d {
            jac[(i, j)] = (fu[i] - fd[i]) / (2.0 * h);
        }
    }
    Ok(jac.determinant().ctx("determinant")?.abs().ln())
}

fn planar_stack(d: usize, n: usize, scale: f64, rng: &mut RandomSource) -> Result<FlowModel, String> {
    let layers = (0..n).map(|_| FlowLayer::Planar(PlanarLayer::random(d, scale, rng))).collect();
    FlowModel::new(d, layers).ctx("planar stack")
}

fn coupling_stack(d: usize, n: usize, rng: &mut RandomSource) -> Result<FlowModel, String> {
    let mut m = FlowModel::coupling_stack(d, n, &[5], rng).ctx("coupling stack")?;
    jitter(&mut m, 0.4, rng);
    Ok(m)
}

pub fn flow_exactness() -> Outcome {
    let mut rng = RandomSource::new(27);
    let (mut worst_inv, mut worst_ld, mut worst_add) = (0.0f64, 0.0f64, 0.0f64);
    for d in 1..=4 {
        let models = [planar_stack(d, 3, 1.5, &mut rng)?, coupling_stack(d, 3, &mut rng)?];
        for m in &models {
            for _ in 0..20 {
                let z = rng.normal_vec(d);
                let (x, ld) = m.forward_with_logdet(&z).ctx("forward")?;
                worst_inv = worst_inv.max(max_abs_diff(&m.inverse(&x).ctx("inverse")?, &z));
                worst_ld = worst_ld.max((ld - fd_logdet(m, &z)?).abs());
            }
        }
        // composing two stacks adds their log-determinants
        let ab = FlowModel::new(d, models[0].layers.iter().chain(&models[1].layers).cloned().collect()).ctx("stack")?;
        for _ in 0..20 {
            let z = rng.normal_vec(d);
            let (y, la) = models[0].forward_with_logdet(&z).ctx("forward")?;
            let (_, lb) = models[1].forward_with_logdet(&y).ctx("forward")?;
            let (_, lab) = ab.forward_with_logdet(&z).ctx("forward")?;
            worst_add = worst_add.max((lab - (la + lb)).abs());
        }
    }
    ensure!(worst_inv < 1e-8, "round trip error {worst_inv:e}");
    ensure!(worst_ld < 1e-5, "log-det differs from the finite-difference Jacobian by {worst_ld:e}");
    ensure!(worst_add < 1e-12, "log-dets not additive: {worst_add:e}");

    // 1-d densities integrate to one (trapezoid on [-12, 12])
    let mut worst_mass = 0.0f64;
    for m in [planar_stack(1, 4, 1.0, &mut rng)?, coupling_stack(1, 3, &mut rng)?] {
        let n = 24_000;
        let h = 24.0 / n as f64;
        let p = (0..=n).map(|i| m.log_likelihood(&[-12.0 + h * i as f64]).map(f64::exp)).collect::<Result<Vec<_>, _>>().ctx("density")?;
        let mass = h * (p.iter().sum::<f64>() - 0.5 * (p[0] + p[n]));
        worst_mass = worst_mass.max((mass - 1.0).abs());
    }
    ensure!(worst_mass < 1e-3, "1-d density mass off by {worst_mass:e}");
    Ok(format!(
        "inversion {worst_inv:.1e}, log-det vs FD {worst_ld:.1e}, additivity {worst_add:.1e}, 1-d mass {worst_mass:.1e}"
    ))
}

/// Returns the noise that was actually injected when the data is a point mass.
struct PointOracle {
    c: Vec<f64>,
    schedule: NoiseSchedule,
}

impl NoisePredictor for PointOracle {
    fn predict_noise(&self, x_t: &Mat, t: &[usize]) -> latentlab_deep::Result<Mat> {
        Ok(Mat::from_fn(x_t.rows(), x_t.cols(), |i, j| {
            let ab = self.schedule.alpha_bar(t[i]);
            (x_t[(i, j)] - ab.sqrt() * self.c[j]) / (1.0 - ab).sqrt()
        }))
    }
}

pub fn diffusion_consistency() -> Outcome {
    let mut rng = RandomSource::new(28);
    let s = NoiseSchedule::default_for(40).ctx("schedule")?;

    // composed one-step kernels against the closed-form marginal
    let x0 = [1.5, -0.8];
    let n = 100_000;
    let mut worst_mom = 0.0f64;
    for t in [1, 5, 20, 40] {
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let mut x = x0.to_vec();
            for k in 1..=t {
                x = q_step(&s, &x, k, &mut rng).ctx("q_step")?;
            }
            for j in 0..2 {
                sum[j] += x[j];
                sq[j] += x[j] * x[j];
            }
        }
        let (ab, var) = (s.alpha_bar(t), 1.0 - s.alpha_bar(t));
        for j in 0..2 {
            let m = sum[j] / n as f64;
            let v = sq[j] / n as f64 - m * m;
            let mean = ab.sqrt() * x0[j];
            // a mean near zero is judged on the scale of the spread instead
            let rel_m = (m - mean).abs() / mean.abs().max(var.sqrt());
            let rel_v = (v - var).abs() / var;
            ensure!(rel_m < 0.02 && rel_v < 0.02, "t={t}: mean {m} vs {mean}, variance {v} vs {var}");
            worst_mom = worst_mom.max(rel_m).max(rel_v);
        }
    }

    // posterior of x_{t-1} given (x_t, x_0) against conditioning their joint
    let mut worst_post = 0.0f64;
    for t in 2..=s.steps() {
        let (a0, at) = (2.0 * rng.normal(), 2.0 * rng.normal());
        let (ab, abp, b) = (s.alpha_bar(t), s.alpha_bar(t - 1), s.beta(t));
        let cross = (1.0 - b).sqrt() * (1.0 - abp);
        let cov = Mat::from_vec(2, 2, vec![1.0 - abp, cross, cross, 1.0 - ab]).ctx("cov")?;
        let joint = Gaussian::new(vec![abp.sqrt() * a0, ab.sqrt() * a0], cov).ctx("joint")?;
        let oracle = gaussian_condition(&joint, &[at]).ctx("condition")?;
        let (mu, var) = posterior_params(&s, &[at], &[a0], t).ctx("posterior")?;
        worst_post = worst_post.max((mu[0] - oracle.mean[0]).abs()).max((var - oracle.cov[(0, 0)]).abs());
    }
    ensure!(worst_post < 1e-12, "posterior parameters off by {worst_post:e}");

    // an all-zero network predicts eps = 0, so the loss is E|eps|^2 = d
    let d = 3;
    let net = Mlp::zeros(&[d + EMBED_DIM, d], Activation::Identity, Activation::Identity).ctx("net")?;
    let zero = DiffusionModel::from_parts(d, s.clone(), net).ctx("model")?;
    let m = 20_000;
    let loss = zero.loss_simple(&Mat::from_fn(m, d, |_, _| rng.normal()), &mut rng).ctx("loss")?;
    let sd = (2.0 * d as f64 / m as f64).sqrt();
    ensure!((loss - d as f64).abs() < 3.0 * sd, "zero-network loss {loss}, expected {d} +- {:.3}", 3.0 * sd);

    let c = vec![0.8, -1.2];
    let oracle = PointOracle { c: c.clone(), schedule: s.clone() };
    let terms = elbo_terms(&oracle, &s, &c, &mut rng).ctx("elbo terms")?;
    let worst_term = terms.iter().copied().fold(0.0, f64::max);
    ensure!(terms.len() == s.steps() && worst_term < 1e-20, "oracle ELBO terms not zero: {worst_term:e}");
    Ok(format!(
        "moments {:.2}%, posterior {worst_post:.1e}, zero-net loss {loss:.4} (d={d}), oracle terms {worst_term:.0e}",
        100.0 * worst_mom
    ))
}

fn all_sequences(d: usize, v: usize) -> Vec<Vec<usize>> {
    (0..v.pow(d as u32))
        .map(|mut k| {
            let mut s = vec![0; d];
            for slot in s.iter_mut().rev() {
                *slot = k % v;
                k /= v;
            }
            s
        })
        .collect()
}

pub fn autoregressive() -> Outcome {
    let mut rng = RandomSource::new(29);
    let mut worst = 0.0f64;
    for (d, v) in [(1, 2), (2, 2), (1, 7), (3, 3), (4, 4), (8, 2), (2, 16), (5, 3)] {
        let mut m = ArModel::new(d, v, &[10], &mut rng).ctx("model")?;
        jitter(&mut m, 0.5, &mut rng);
        let seqs = all_sequences(d, v);
        ensure!(seqs.len() <= 256, "instance too large");
        let total: f64 = m.pointwise_loglik(&seqs).ctx("loglik")?.iter().map(|l| l.exp()).sum();
        ensure!((total - 1.0).abs() < 1e-10, "D={d} V={v}: probabilities sum to {total}");
        worst = worst.max((total - 1.0).abs());
    }

    // changing x_d leaves the logits of positions 0..=d untouched
    let (d, v) = (6, 3);
    let mut m = ArModel::new(d, v, &[12], &mut rng).ctx("model")?;
    jitter(&mut m, 0.5, &mut rng);
    for _ in 0..20 {
        let x: Vec<usize> = (0..d).map(|_| rng.below(v)).collect();
        let base = m.logits(&x).ctx("logits")?;
        for pos in 0..d {
            let mut y = x.clone();
            y[pos] = (y[pos] + 1) % v;
            let pert = m.logits(&y).ctx("logits")?;
            ensure!(base[..(pos + 1) * v] == pert[..(pos + 1) * v], "position {pos} leaks into its own or earlier conditionals");
        }
    }
    Ok(format!("normalization within {worst:.1e} on 8 instances; causal at every position"))
}

pub fn gradients() -> Outcome {
    let mut rng = RandomSource::new(30);
    let mut report = Vec::new();
    let mut record = |name: &str, err: f64| -> Result<(), String> {
        ensure!(err < 1e-4, "{name}: relative gradient error {err:e}");
        report.push(format!("{name} {err:.0e}"));
        Ok(())
    };

    for (name, likelihood) in [("vae-gaussian", Likelihood::Gaussian { sigma: 0.7 }), ("vae-bernoulli", Likelihood::Bernoulli)] {
        let mut vae = VaeModel::new(3, 2, &[4], likelihood, &mut rng).ctx("vae")?;
        jitter(&mut vae, 0.1, &mut rng);
        let x = Mat::from_fn(4, 3, |_, _| rng.uniform());
        let eps = Mat::from_fn(4, 2, |_, _| rng.normal());
        let analytic = vae.elbo_gradient(&x, &eps).ctx("gradient")?;
        let numeric = fd_grad(&mut vae, |m| m.elbo_with_noise(&x, &eps).unwrap().elbo);
        record(name, grad_error(&analytic, &numeric)?)?;
    }

    let mut flow = coupling_stack(3, 3, &mut rng)?;
    let data = Mat::from_fn(5, 3, |_, _| rng.normal());
    let (_, analytic) = flow.loglik_gradient(&data).ctx("gradient")?;
    let numeric = fd_grad(&mut flow, |f| f.pointwise_loglik(&data).unwrap().iter().sum::<f64>() / 5.0);
    record("flow", grad_error(&analytic, &numeric)?)?;

    let mut diff = DiffusionModel::new(2, NoiseSchedule::default_for(10).ctx("schedule")?, &[6], &mut rng).ctx("diffusion")?;
    let x0 = Mat::from_fn(5, 2, |_, _| rng.normal());
    let t = [1, 3, 5, 8, 10];
    let eps = Mat::from_fn(5, 2, |_, _| rng.normal());
    let analytic = diff.loss_gradient(&x0, &t, &eps).ctx("gradient")?;
    let numeric = fd_grad(&mut diff, |m| m.loss_simple_with(&x0, &t, &eps).unwrap());
    record("diffusion", grad_error(&analytic, &numeric)?)?;

    let mut arm = ArModel::new(3, 3, &[12], &mut rng).ctx("arm")?;
    jitter(&mut arm, 0.3, &mut rng);
    let seqs: Vec<Vec<usize>> = (0..6).map(|_| (0..3).map(|_| rng.below(3)).collect()).collect();
    let (_, analytic) = arm.loglik_gradient(&seqs).ctx("gradient")?;
    let numeric = fd_grad(&mut arm, |m| m.pointwise_loglik(&seqs).unwrap().iter().sum::<f64>() / 6.0);
    record("arm", grad_error(&analytic, &numeric)?)?;

    let gan = GanModel::new(2, 2, &[4], &[5], &mut rng).ctx("gan")?;
    let real = Mat::from_fn(6, 2, |_, _| rng.normal() + 1.0);
    let fake = gan.sample(5, &mut rng).ctx("sample")?;
    let (_, analytic) = gan.disc_loss_gradient(&real, &fake).ctx("gradient")?;
    let mut disc = gan.disc.clone();
    let numeric = fd_grad(&mut disc, |d| GanModel::from_parts(gan.gen.clone(), d.clone()).unwrap().disc_loss(&real, &fake).unwrap());
    record("gan-disc", grad_error(&analytic, &numeric)?)?;
    let z = gan.prior(7, &mut rng);
    for (name, kind) in [("gan-gen-nonsaturating", GenLoss::NonSaturating), ("gan-gen-minimax", GenLoss::Minimax)] {
        let (_, analytic) = gan.gen_loss_gradient(&z, kind).ctx("gradient")?;
        let mut gen = gan.gen.clone();
        let numeric = fd_grad(&mut gen, |g| {
            let m = GanModel::from_parts(g.clone(), gan.disc.clone()).unwrap();
            m.gen_loss(&m.generate(&z).unwrap(), kind).unwrap()
        });
        record(name, grad_error(&analytic, &numeric)?)?;
    }
    drop(record);
    Ok(report.join(", "))
}
