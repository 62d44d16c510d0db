//! The LDA ELBO stays below the exact evidence and never decreases under
//! coordinate sweeps.

use latentlab_core::lda::{
    default_config, elbo, fit_lda, generate_corpus, lda_init, update_doc_topic, update_topic_word, update_word_topic, Corpus,
    LdaHyper,
};
use latentlab_core::RandomSource;
use statrs::function::gamma::ln_gamma;

use crate::support::{Context, Outcome};

/// `log p(n | a)` for one ordered draw sequence with counts `n` under a
/// Dirichlet-categorical.
fn log_dir_cat(a: &[f64], n: &[usize]) -> f64 {
    let total: usize = n.iter().sum();
    let sa: f64 = a.iter().sum();
    ln_gamma(sa) - ln_gamma(sa + total as f64)
        + a.iter().zip(n).map(|(&ai, &ni)| ln_gamma(ai + ni as f64) - ln_gamma(ai)).sum::<f64>()
}

/// Exact `log p(w)`: sum over every topic assignment, with theta and phi
/// integrated out in closed form.
fn log_evidence(hyper: &LdaHyper, corpus: &Corpus) -> f64 {
    let k = hyper.k();
    let tokens: Vec<(usize, usize)> =
        corpus.docs.iter().enumerate().flat_map(|(d, doc)| doc.iter().map(move |&w| (d, w))).collect();
    let terms: Vec<f64> = (0..k.pow(tokens.len() as u32))
        .map(|code| {
            let mut c = code;
            let mut doc_counts = vec![vec![0usize; k]; corpus.docs.len()];
            let mut word_counts = vec![vec![0usize; hyper.v()]; k];
            for &(d, w) in &tokens {
                doc_counts[d][c % k] += 1;
                word_counts[c % k][w] += 1;
                c /= k;
            }
            doc_counts.iter().map(|n| log_dir_cat(&hyper.alpha, n)).sum::<f64>()
                + word_counts.iter().map(|n| log_dir_cat(&hyper.beta, n)).sum::<f64>()
        })
        .collect();
    let m = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

fn beta_pdf(x: f64, a: f64, b: f64) -> f64 {
    ((a - 1.0) * x.ln() + (b - 1.0) * (1.0 - x).ln() + ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)).exp()
}

/// `log p(w)` for one document over a two-word vocabulary with two topics, by
/// midpoint quadrature over theta, phi_0 and phi_1.
fn log_evidence_grid(alpha: [f64; 2], beta: [f64; 2], doc: &[usize]) -> f64 {
    let g = 120;
    let h = 1.0 / g as f64;
    let pts: Vec<f64> = (0..g).map(|i| (i as f64 + 0.5) * h).collect();
    let mut total = 0.0;
    for &t in &pts {
        let pt = beta_pdf(t, alpha[0], alpha[1]);
        for &f0 in &pts {
            let p0 = beta_pdf(f0, beta[0], beta[1]);
            for &f1 in &pts {
                let p1 = beta_pdf(f1, beta[0], beta[1]);
                let (theta, phi) = ([t, 1.0 - t], [[f0, 1.0 - f0], [f1, 1.0 - f1]]);
                let lik: f64 = doc.iter().map(|&w| theta[0] * phi[0][w] + theta[1] * phi[1][w]).product();
                total += pt * p0 * p1 * lik;
            }
        }
    }
    (total * h * h * h).ln()
}

pub fn criterion() -> Outcome {
    // the two exact computations agree
    let (alpha, beta) = ([1.5, 2.0], [2.0, 1.5]);
    let hyper = LdaHyper::new(alpha.to_vec(), beta.to_vec()).ctx("hyper")?;
    let doc = vec![0, 1, 1];
    let grid = log_evidence_grid(alpha, beta, &doc);
    let exact = log_evidence(&hyper, &Corpus::new(vec![doc], 2).ctx("corpus")?);
    ensure!((grid - exact).abs() < 1e-3, "enumeration {exact} vs grid quadrature {grid}");

    let mut rng = RandomSource::new(25);
    let mut min_gap = f64::INFINITY;
    for case in 0..20u64 {
        let v = 2 + (case % 2) as usize;
        let hyper = LdaHyper::symmetric(2, v, 0.2 + 1.5 * rng.uniform(), 0.2 + 1.5 * rng.uniform()).ctx("hyper")?;
        let n_docs = 1 + rng.below(2);
        let docs: Vec<Vec<usize>> = (0..n_docs).map(|_| (0..1 + rng.below(3)).map(|_| rng.below(v)).collect()).collect();
        let corpus = Corpus::new(docs, v).ctx("corpus")?;
        let exact = log_evidence(&hyper, &corpus);
        let init = lda_init(&hyper, &corpus, case).ctx("init")?;
        let (fit, _) = fit_lda(&hyper, &corpus, &default_config(case)).ctx("fit")?;
        for var in [&init, &fit] {
            let e = elbo(&hyper, &corpus, var).ctx("elbo")?;
            ensure!(exact - e >= -1e-3, "case {case}: ELBO {e} above log p(w) {exact}");
            min_gap = min_gap.min(exact - e);
        }
    }

    // every coordinate update, on larger corpora
    let mut worst_drop = 0.0f64;
    for seed in 0..5u64 {
        let hyper = LdaHyper::symmetric(3, 10, 0.4, 0.2).ctx("hyper")?;
        let (corpus, _) = generate_corpus(&hyper, &[20, 35, 15, 25, 30], &mut rng).ctx("corpus")?;
        let mut var = lda_init(&hyper, &corpus, seed).ctx("init")?;
        let mut last = elbo(&hyper, &corpus, &var).ctx("elbo")?;
        for sweep in 0..30 {
            for step in 0..3 {
                match step {
                    0 => update_word_topic(&corpus, &mut var),
                    1 => update_doc_topic(&hyper, &mut var),
                    _ => update_topic_word(&hyper, &corpus, &mut var),
                }
                let e = elbo(&hyper, &corpus, &var).ctx("elbo")?;
                let drop = last - e;
                ensure!(drop <= 1e-9 * last.abs().max(1.0), "seed {seed} sweep {sweep} update {step}: ELBO fell by {drop:e}");
                worst_drop = worst_drop.max(drop);
                last = e;
            }
        }
    }
    Ok(format!(
        "grid vs enumeration {:.1e}; smallest gap over 20 instances {min_gap:.2e}; largest sweep drop {worst_drop:.1e}",
        (grid - exact).abs()
    ))
}
