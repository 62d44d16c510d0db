//! EM objective traces never decrease, over 20 random instances per family.

use latentlab_core::datasets::{sample_gmm, CategoricalData};
use latentlab_core::irt::{fit_irt, item_prob, IrtParams, QuadratureRule};
use latentlab_core::lda::{default_config, fit_lda, generate_corpus, LdaHyper};
use latentlab_core::mixture::{fit_gmm, fit_lca, GmmParams};
use latentlab_core::prob::{sample_categorical, Gaussian};
use latentlab_core::sequential::{hmm_fit, hmm_sample, lds_fit, lds_sample, Emission, EmissionKind, HmmParams, LdsParams};
use latentlab_core::{EmConfig, FitReport, Mat, RandomSource, Simplex};

use crate::support::{random_simplex, random_spd, worst_drop, Context, Outcome};

const INSTANCES: u64 = 20;
const TIGHT: f64 = 1e-8;
const LOOSE: f64 = 1e-6;

fn config(seed: u64) -> EmConfig {
    EmConfig { max_iters: 300, ..EmConfig::with_seed(seed) }
}

fn gmm(seed: u64) -> Result<FitReport, String> {
    let mut rng = RandomSource::new(seed);
    let k = 2 + rng.below(2);
    let means = (0..k).map(|_| rng.normal_vec(2).iter().map(|v| 2.5 * v).collect()).collect();
    let covs = (0..k).map(|_| random_spd(&mut rng, 2, 0.5, 0.1)).collect();
    let truth = GmmParams::new(random_simplex(&mut rng, k), means, covs).ctx("truth")?;
    let (x, _) = sample_gmm(&truth, 150, &mut rng).ctx("sample")?;
    Ok(fit_gmm(&x, k, &config(seed)).ctx("fit")?.1)
}

fn lca(seed: u64) -> Result<FitReport, String> {
    let mut rng = RandomSource::new(seed);
    let (k, items) = (2 + rng.below(2), 5);
    let cats: Vec<usize> = (0..items).map(|_| 2 + rng.below(2)).collect();
    let weights = random_simplex(&mut rng, k);
    let tables: Vec<Vec<Simplex>> = (0..k).map(|_| cats.iter().map(|&c| random_simplex(&mut rng, c)).collect()).collect();
    let codes = (0..200)
        .map(|_| {
            let c = sample_categorical(&weights, &mut rng);
            tables[c].iter().map(|t| sample_categorical(t, &mut rng)).collect()
        })
        .collect();
    let data = CategoricalData::new(codes, cats).ctx("data")?;
    Ok(fit_lca(&data, k, &config(seed)).ctx("fit")?.1)
}

fn hmm(seed: u64, gaussian: bool) -> Result<FitReport, String> {
    let mut rng = RandomSource::new(seed);
    let k = 2 + rng.below(2);
    let rows: Vec<Vec<f64>> = (0..k).map(|_| random_simplex(&mut rng, k).into_vec()).collect();
    let emit = if gaussian {
        Emission::Gaussian(
            (0..k)
                .map(|_| Gaussian::new(rng.normal_vec(2).iter().map(|v| 3.0 * v).collect(), random_spd(&mut rng, 2, 0.3, 0.2)))
                .collect::<Result<_, _>>()
                .ctx("emission")?,
        )
    } else {
        Emission::Discrete((0..k).map(|_| random_simplex(&mut rng, 4)).collect())
    };
    let truth = HmmParams::new(random_simplex(&mut rng, k), Mat::from_rows(&rows).ctx("trans")?, emit).ctx("truth")?;
    let seqs = (0..3).map(|_| hmm_sample(&truth, 60, &mut rng).map(|s| s.0)).collect::<Result<Vec<_>, _>>().ctx("sample")?;
    let kind = if gaussian { EmissionKind::Gaussian } else { EmissionKind::Discrete };
    Ok(hmm_fit(&seqs, k, kind, &config(seed)).ctx("fit")?.1)
}

fn lds(seed: u64) -> Result<FitReport, String> {
    let mut rng = RandomSource::new(seed);
    let (dz, dx) = (1 + rng.below(2), 2);
    let a = Mat::from_fn(dz, dz, |_, _| 0.4 * rng.normal());
    let c = Mat::from_fn(dx, dz, |_, _| rng.normal());
    let truth = LdsParams::new(
        a,
        c,
        random_spd(&mut rng, dz, 0.3, 0.1),
        random_spd(&mut rng, dx, 0.3, 0.1),
        rng.normal_vec(dz),
        random_spd(&mut rng, dz, 0.5, 0.1),
    )
    .ctx("truth")?;
    let seqs = (0..2).map(|_| lds_sample(&truth, 40, &mut rng).map(|s| s.1)).collect::<Result<Vec<_>, _>>().ctx("sample")?;
    Ok(lds_fit(&seqs, dz, &config(seed)).ctx("fit")?.1)
}

fn irt(seed: u64) -> Result<FitReport, String> {
    let mut rng = RandomSource::new(seed);
    let j = 6;
    let a: Vec<f64> = (0..j).map(|_| 0.5 + 1.5 * rng.uniform()).collect();
    let b: Vec<f64> = (0..j).map(|_| -1.5 + 3.0 * rng.uniform()).collect();
    let truth = IrtParams::new(a, b).ctx("truth")?;
    let mut x = Mat::zeros(300, j);
    for i in 0..300 {
        let theta = rng.normal();
        for jj in 0..j {
            x[(i, jj)] = f64::from(u8::from(rng.uniform() < item_prob(theta, truth.a[jj], truth.b[jj])));
        }
    }
    Ok(fit_irt(&x, &QuadratureRule::standard(), &config(seed)).ctx("fit")?.1)
}

fn lda(seed: u64) -> Result<FitReport, String> {
    let mut rng = RandomSource::new(seed);
    let hyper = LdaHyper::symmetric(3, 12, 0.2 + rng.uniform(), 0.05 + 0.3 * rng.uniform()).ctx("hyper")?;
    let (corpus, _) = generate_corpus(&hyper, &vec![25; 12], &mut rng).ctx("corpus")?;
    let cfg = EmConfig { max_iters: 300, ..default_config(seed) };
    Ok(fit_lda(&hyper, &corpus, &cfg).ctx("fit")?.1)
}

pub fn criterion() -> Outcome {
    type Family = (&'static str, f64, fn(u64) -> Result<FitReport, String>);
    let families: [Family; 7] = [
        ("gmm", TIGHT, gmm),
        ("lca", TIGHT, lca),
        ("hmm", TIGHT, |s| hmm(s, false)),
        ("ghmm", TIGHT, |s| hmm(s, true)),
        ("lds", TIGHT, lds),
        ("irt", LOOSE, irt),
        ("lda", LOOSE, lda),
    ];
    let mut summary = Vec::new();
    for (name, slack, run) in families {
        let mut worst = 0.0f64;
        for seed in 0..INSTANCES {
            let rep = run(1000 + seed).map_err(|e| format!("{name} seed {seed}: {e}"))?;
            ensure!(rep.objective_trace.iter().all(|v| v.is_finite()), "{name} seed {seed}: non-finite objective");
            let drop = worst_drop(&rep);
            ensure!(drop <= slack, "{name} seed {seed}: objective fell by {drop:e} (slack {slack:e})");
            worst = worst.max(drop);
        }
        summary.push(format!("{name} {worst:.0e}"));
    }
    Ok(format!("{INSTANCES} instances each, worst drop: {}", summary.join(", ")))
}
