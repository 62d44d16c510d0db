//! Forward-backward against path enumeration, Kalman filtering and smoothing
//! against conditioning the stacked joint Gaussian.

use latentlab_core::prob::{gaussian_condition, Gaussian};
use latentlab_core::sequential::{hmm_forward_backward, kalman_filter, kalman_smooth, lds_sample, Emission, HmmParams, LdsParams, Sequence};
use latentlab_core::{Mat, RandomSource};

use crate::support::{max_abs_diff, random_simplex, random_spd, Context, Outcome};

fn enumeration_gap(p: &HmmParams, xs: &[usize]) -> Result<f64, String> {
    let Emission::Discrete(b) = &p.emit else { return Err("expected discrete emissions".into()) };
    let (k, t_len) = (p.k(), xs.len());
    let mut total = 0.0;
    let mut marg = vec![vec![0.0; k]; t_len];
    let mut pair = vec![vec![vec![0.0; k]; k]; t_len.saturating_sub(1)];
    for code in 0..k.pow(t_len as u32) {
        let path: Vec<usize> = (0..t_len).map(|t| (code / k.pow(t as u32)) % k).collect();
        let mut pr = p.pi.probs()[path[0]] * b[path[0]].probs()[xs[0]];
        for t in 1..t_len {
            pr *= p.trans[(path[t - 1], path[t])] * b[path[t]].probs()[xs[t]];
        }
        total += pr;
        for t in 0..t_len {
            marg[t][path[t]] += pr;
            if t + 1 < t_len {
                pair[t][path[t]][path[t + 1]] += pr;
            }
        }
    }
    let post = hmm_forward_backward(p, &Sequence::Discrete(xs.to_vec())).ctx("forward-backward")?;
    let mut gap = (post.loglik - total.ln()).abs();
    for t in 0..t_len {
        for i in 0..k {
            gap = gap.max((post.marginals[(t, i)] - marg[t][i] / total).abs());
            if t + 1 < t_len {
                for j in 0..k {
                    gap = gap.max((post.pairwise[t][(i, j)] - pair[t][i][j] / total).abs());
                }
            }
        }
    }
    Ok(gap)
}

/// Joint Gaussian of `(z_1..z_T, x_1..x_T)` assembled from the state equations.
fn stacked_joint(p: &LdsParams, t_len: usize) -> Result<Gaussian, String> {
    let (dz, dx) = (p.state_dim(), p.obs_dim());
    let mut means = vec![p.mu0.clone()];
    let mut vars = vec![p.sigma0.clone()];
    for t in 1..t_len {
        means.push(p.a.matvec(&means[t - 1]));
        vars.push(p.a.matmul(&vars[t - 1]).matmul_t(&p.a).add(&p.q));
    }
    // cov(z_t, z_s) = A^(t-s) V_s for t >= s
    let zz = |t: usize, s: usize| {
        let (hi, lo) = (t.max(s), t.min(s));
        let mut m = vars[lo].clone();
        for _ in lo..hi {
            m = p.a.matmul(&m);
        }
        if t >= s {
            m
        } else {
            m.transpose()
        }
    };
    let n = t_len * (dz + dx);
    let xo = t_len * dz;
    let mut cov = Mat::zeros(n, n);
    for t in 0..t_len {
        for s in 0..t_len {
            let c = zz(t, s);
            cov.set_block(t * dz, s * dz, &c);
            cov.set_block(xo + t * dx, s * dz, &p.c.matmul(&c));
            cov.set_block(t * dz, xo + s * dx, &c.matmul_t(&p.c));
            let mut xx = p.c.matmul(&c).matmul_t(&p.c);
            if t == s {
                xx = xx.add(&p.r);
            }
            cov.set_block(xo + t * dx, xo + s * dx, &xx);
        }
    }
    let mut mean = means.concat();
    for m in &means {
        mean.extend(p.c.matvec(m));
    }
    Gaussian::new(mean, cov).ctx("joint")
}

fn select(g: &Gaussian, idx: &[usize]) -> Result<Gaussian, String> {
    let mean = idx.iter().map(|&i| g.mean[i]).collect();
    Gaussian::new(mean, Mat::from_fn(idx.len(), idx.len(), |a, b| g.cov[(idx[a], idx[b])])).ctx("marginal")
}

fn kalman_gap(p: &LdsParams, t_len: usize, rng: &mut RandomSource) -> Result<f64, String> {
    let (dz, dx) = (p.state_dim(), p.obs_dim());
    let (_, x) = lds_sample(p, t_len, rng).ctx("sample")?;
    let joint = stacked_joint(p, t_len)?;
    let xo = t_len * dz;
    let filt = kalman_filter(p, &x).ctx("filter")?;
    let smooth = kalman_smooth(p, &x).ctx("smoother")?;
    let all: Vec<usize> = (xo..xo + t_len * dx).collect();
    let mut gap = (filt.loglik - select(&joint, &all)?.logpdf(x.as_slice()).ctx("density")?).abs();
    for t in 0..t_len {
        let z_idx: Vec<usize> = (t * dz..(t + 1) * dz).collect();
        let past: Vec<usize> = (xo..xo + (t + 1) * dx).collect();
        let oracle = gaussian_condition(&select(&joint, &[z_idx.clone(), past].concat())?, &x.as_slice()[..(t + 1) * dx])
            .ctx("condition")?;
        let f = &filt.filtered[t];
        gap = gap.max(max_abs_diff(&f.mean, &oracle.mean)).max(f.cov.max_abs_diff(&oracle.cov));

        let oracle = gaussian_condition(&select(&joint, &[z_idx.clone(), all.clone()].concat())?, x.as_slice()).ctx("condition")?;
        let s = &smooth.marginals[t];
        gap = gap.max(max_abs_diff(&s.mean, &oracle.mean)).max(s.cov.max_abs_diff(&oracle.cov));
        if t + 1 < t_len {
            let next: Vec<usize> = ((t + 1) * dz..(t + 2) * dz).collect();
            let pair = gaussian_condition(&select(&joint, &[next, z_idx, all.clone()].concat())?, x.as_slice()).ctx("condition")?;
            gap = gap.max(smooth.cross_covs[t].max_abs_diff(&pair.cov.block(0, dz, dz, dz)));
        }
    }
    Ok(gap)
}

pub fn criterion() -> Outcome {
    let mut rng = RandomSource::new(23);
    let mut worst_fb = 0.0f64;
    let mut cases = 0;
    for k in 1..=3 {
        for t_len in 1..=6 {
            let m = 2 + rng.below(3);
            let rows: Vec<Vec<f64>> = (0..k).map(|_| random_simplex(&mut rng, k).into_vec()).collect();
            let emit = Emission::Discrete((0..k).map(|_| random_simplex(&mut rng, m)).collect());
            let p = HmmParams::new(random_simplex(&mut rng, k), Mat::from_rows(&rows).ctx("trans")?, emit).ctx("hmm")?;
            let xs: Vec<usize> = (0..t_len).map(|_| rng.below(m)).collect();
            worst_fb = worst_fb.max(enumeration_gap(&p, &xs)?);
            cases += 1;
        }
    }
    ensure!(worst_fb < 1e-10, "forward-backward differs from enumeration by {worst_fb:e}");

    let mut worst_kf = 0.0f64;
    for (dz, dx) in [(1, 1), (1, 2), (2, 1), (2, 2), (3, 2)] {
        for t_len in 1..=5 {
            let p = LdsParams::new(
                Mat::from_fn(dz, dz, |_, _| 0.5 * rng.normal()),
                Mat::from_fn(dx, dz, |_, _| rng.normal()),
                random_spd(&mut rng, dz, 0.3, 0.1),
                random_spd(&mut rng, dx, 0.3, 0.1),
                rng.normal_vec(dz),
                random_spd(&mut rng, dz, 0.5, 0.1),
            )
            .ctx("lds")?;
            worst_kf = worst_kf.max(kalman_gap(&p, t_len, &mut rng)?);
        }
    }
    ensure!(worst_kf < 1e-8, "Kalman recursions differ from joint conditioning by {worst_kf:e}");
    Ok(format!("forward-backward {worst_fb:.1e} over {cases} chains, Kalman {worst_kf:.1e} over 25 systems"))
}
