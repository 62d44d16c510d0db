//! Parameter recovery on planted data, up to relabeling.

use std::time::Instant;

use latentlab_core::datasets::sample_gmm;
use latentlab_core::irt::{fit_irt, item_prob, QuadratureRule};
use latentlab_core::lda::{default_config, fit_lda, generate_with_topics, LdaHyper};
use latentlab_core::mixture::{fit_gmm, GmmParams};
use latentlab_core::sequential::{hmm_fit, hmm_sample, Emission, EmissionKind, HmmParams};
use latentlab_core::{EmConfig, Mat, RandomSource, Simplex};
use latentlab_deep::diffusion::{DiffusionModel, NoiseSchedule};
use latentlab_deep::{AdamConfig, TrainConfig};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::support::{Context, Outcome};

const BUDGET_SECS: f64 = 180.0;

fn gmm_means() -> Result<f64, String> {
    let truth = GmmParams::new(
        Simplex::new(vec![0.5, 0.5]).ctx("weights")?,
        vec![vec![0.0, 0.0], vec![10.0, 0.0]],
        vec![Mat::identity(2), Mat::identity(2)],
    )
    .ctx("truth")?;
    let (x, _) = sample_gmm(&truth, 1000, &mut RandomSource::new(31)).ctx("sample")?;
    let (fit, _) = fit_gmm(&x, 2, &EmConfig::with_seed(31)).ctx("fit")?;
    let err = |perm: [usize; 2]| {
        (0..2)
            .flat_map(|k| (0..2).map(move |j| (k, j)))
            .map(|(k, j)| (fit.means[k][j] - truth.means[perm[k]][j]).abs())
            .fold(0.0, f64::max)
    };
    Ok(err([0, 1]).min(err([1, 0])))
}

fn hmm_transitions() -> Result<f64, String> {
    let truth = HmmParams::new(
        Simplex::new(vec![0.5, 0.5]).ctx("pi")?,
        Mat::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.8]]).ctx("trans")?,
        Emission::Discrete(vec![
            Simplex::new(vec![0.8, 0.15, 0.05]).ctx("emit")?,
            Simplex::new(vec![0.05, 0.25, 0.7]).ctx("emit")?,
        ]),
    )
    .ctx("truth")?;
    let (seq, _) = hmm_sample(&truth, 2000, &mut RandomSource::new(32)).ctx("sample")?;
    let (fit, _) = hmm_fit(&[seq], 2, EmissionKind::Discrete, &EmConfig::with_seed(32)).ctx("fit")?;
    let err = |perm: [usize; 2]| {
        (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| (fit.trans[(i, j)] - truth.trans[(perm[i], perm[j])]).abs())
            .fold(0.0, f64::max)
    };
    Ok(err([0, 1]).min(err([1, 0])))
}

fn irt_rmse() -> Result<(f64, f64), String> {
    let mut rng = RandomSource::new(33);
    let j = 10;
    let a: Vec<f64> = (0..j).map(|_| 0.7 + 1.1 * rng.uniform()).collect();
    let b: Vec<f64> = (0..j).map(|_| -1.2 + 2.4 * rng.uniform()).collect();
    let mut x = Mat::zeros(2000, j);
    for i in 0..2000 {
        let theta = rng.normal();
        for jj in 0..j {
            x[(i, jj)] = f64::from(u8::from(rng.uniform() < item_prob(theta, a[jj], b[jj])));
        }
    }
    let (fit, _) = fit_irt(&x, &QuadratureRule::standard(), &EmConfig::with_seed(33)).ctx("fit")?;
    let rmse = |u: &[f64], v: &[f64]| (u.iter().zip(v).map(|(p, q)| (p - q).powi(2)).sum::<f64>() / u.len() as f64).sqrt();
    Ok((rmse(&fit.a, &a), rmse(&fit.b, &b)))
}

/// Smallest share of a fitted topic's mass that falls on its planted block.
fn lda_planted_mass() -> Result<f64, String> {
    let (k, v) = (3, 15);
    let block = |i: usize| {
        let w: Vec<f64> = (0..v).map(|x| if x / 5 == i { 1.0 } else { 0.0 }).collect();
        Simplex::from_weights(&w)
    };
    let topics = (0..k).map(block).collect::<Result<Vec<_>, _>>().ctx("topics")?;
    let mut rng = RandomSource::new(34);
    let (corpus, _) = generate_with_topics(&[0.3; 3], &topics, &vec![50; 150], &mut rng).ctx("corpus")?;
    let hyper = LdaHyper::symmetric(k, v, 0.3, 0.1).ctx("hyper")?;
    let (var, _) = fit_lda(&hyper, &corpus, &default_config(34)).ctx("fit")?;
    let means = var.topic_means();
    // match each fitted topic to the block holding most of its mass; the matching must be a bijection
    let mut used = [false; 3];
    let mut worst = 1.0f64;
    for m in &means {
        let mass: Vec<f64> = (0..k).map(|i| m.probs()[i * 5..(i + 1) * 5].iter().sum()).collect();
        let best = (0..k).max_by(|&x, &y| mass[x].total_cmp(&mass[y])).unwrap();
        ensure!(!used[best], "two topics landed on block {best}");
        used[best] = true;
        worst = worst.min(mass[best]);
    }
    Ok(worst)
}

/// Total variation between the sample histogram and the target mixture on
/// 20 bins over [-4, 4], tails folded into the end bins.
fn diffusion_tv() -> Result<f64, String> {
    let mut rng = RandomSource::new(35);
    let data = Mat::from_fn(2000, 1, |_, _| if rng.uniform() < 0.5 { -2.0 + 0.5 * rng.normal() } else { 2.0 + 0.5 * rng.normal() });
    let mut model = DiffusionModel::new(1, NoiseSchedule::default_for(50).ctx("schedule")?, &[32, 32], &mut rng).ctx("model")?;
    let cfg = TrainConfig { epochs: 500, batch: 100, adam: AdamConfig::with_lr(0.002) };
    model.train(&data, &cfg, &mut rng).ctx("train")?;
    let samples = model.sample(10_000, &mut rng).ctx("sample")?;

    let comps = [Normal::new(-2.0, 0.5).ctx("normal")?, Normal::new(2.0, 0.5).ctx("normal")?];
    let cdf = |x: f64| comps.iter().map(|c| 0.5 * c.cdf(x)).sum::<f64>();
    let mut counts = [0usize; 20];
    for &x in samples.as_slice() {
        counts[(((x + 4.0) / 0.4).floor().max(0.0) as usize).min(19)] += 1;
    }
    let n = samples.rows() as f64;
    Ok((0..20)
        .map(|k| {
            let lo = if k == 0 { 0.0 } else { cdf(-4.0 + 0.4 * k as f64) };
            let hi = if k == 19 { 1.0 } else { cdf(-4.0 + 0.4 * (k + 1) as f64) };
            (counts[k] as f64 / n - (hi - lo)).abs()
        })
        .sum::<f64>()
        / 2.0)
}

pub fn criterion() -> Outcome {
    let start = Instant::now();
    let gmm = gmm_means()?;
    ensure!(gmm < 0.1, "GMM mean error {gmm}");
    let hmm = hmm_transitions()?;
    ensure!(hmm < 0.05, "HMM transition error {hmm}");
    let (ra, rb) = irt_rmse()?;
    ensure!(ra <= 0.15 && rb <= 0.1, "IRT RMSE a {ra}, b {rb}");
    let lda = lda_planted_mass()?;
    ensure!(lda >= 0.9, "LDA planted-topic mass {lda}");
    let tv = diffusion_tv()?;
    ensure!(tv <= 0.15, "diffusion total variation {tv}");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs <= BUDGET_SECS, "recovery suite took {secs:.0}s (budget {BUDGET_SECS}s)");
    Ok(format!(
        "GMM means {gmm:.3}, HMM transitions {hmm:.3}, IRT RMSE ({ra:.3}, {rb:.3}), LDA mass {lda:.3}, diffusion TV {tv:.3}"
    ))
}
