//! Latent Dirichlet allocation with mean-field variational inference.
//!
//! Generative model: `phi_k ~ Dir(beta)`, `theta_d ~ Dir(alpha)`,
//! `z_dn ~ Cat(theta_d)`, `w_dn ~ Cat(phi_{z_dn})`. The variational family is
//! `q(phi) prod_d q(theta_d) prod_n q(z_dn)` with Dirichlet and categorical
//! factors; coordinate ascent on the ELBO cycles through token, document and
//! topic updates.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::em::{run_em, EmConfig, EmProblem, FitReport};
use crate::error::{shape_err, Error, Result};
use crate::par;
use crate::prob::{sample_categorical, sample_dirichlet, Simplex};
use crate::rng::RandomSource;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaHyper {
    /// Dirichlet prior on document-topic proportions (length K).
    pub alpha: Vec<f64>,
    /// Dirichlet prior on topic-word distributions (length V).
    pub beta: Vec<f64>,
}

impl LdaHyper {
    pub fn new(alpha: Vec<f64>, beta: Vec<f64>) -> Result<Self> {
        let h = Self { alpha, beta };
        h.validate()?;
        Ok(h)
    }

    pub fn symmetric(k: usize, v: usize, alpha: f64, beta: f64) -> Result<Self> {
        Self::new(vec![alpha; k], vec![beta; v])
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.is_empty() || self.beta.is_empty() {
            return Err(Error::Empty("LDA needs at least one topic and one word".into()));
        }
        if self.alpha.iter().chain(&self.beta).any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::InvalidParameter("alpha and beta must be positive".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.alpha.len()
    }

    pub fn v(&self) -> usize {
        self.beta.len()
    }
}

/// Documents as sequences of word indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub docs: Vec<Vec<usize>>,
    pub vocab_size: usize,
}

impl Corpus {
    pub fn new(docs: Vec<Vec<usize>>, vocab_size: usize) -> Result<Self> {
        let c = Self { docs, vocab_size };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if self.docs.is_empty() {
            return Err(Error::Empty("corpus has no documents".into()));
        }
        for (d, doc) in self.docs.iter().enumerate() {
            if doc.is_empty() {
                return Err(Error::InvalidData(format!("document {d} is empty")));
            }
            if let Some(&w) = doc.iter().find(|&&w| w >= self.vocab_size) {
                return Err(Error::InvalidData(format!(
                    "document {d}: word {w} outside vocabulary of size {}",
                    self.vocab_size
                )));
            }
        }
        Ok(())
    }

    pub fn n_tokens(&self) -> usize {
        self.docs.iter().map(Vec::len).sum()
    }
}

/// Ground truth from [`generate_corpus`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaLatents {
    /// `theta[d]`: topic proportions of document `d`.
    pub theta: Vec<Simplex>,
    /// `phi[k]`: word distribution of topic `k`.
    pub phi: Vec<Simplex>,
    /// `z[d][n]`: topic of token `n` in document `d`.
    pub z: Vec<Vec<usize>>,
}

/// Ancestral sampling from the generative model.
pub fn generate_corpus(hyper: &LdaHyper, doc_lengths: &[usize], rng: &mut RandomSource) -> Result<(Corpus, LdaLatents)> {
    hyper.validate()?;
    let phi: Vec<Simplex> = (0..hyper.k()).map(|_| sample_dirichlet(&hyper.beta, rng)).collect::<Result<_>>()?;
    generate_with_topics(&hyper.alpha, &phi, doc_lengths, rng)
}

/// Samples documents from fixed topics; `theta_d ~ Dir(alpha)`.
pub fn generate_with_topics(
    alpha: &[f64],
    phi: &[Simplex],
    doc_lengths: &[usize],
    rng: &mut RandomSource,
) -> Result<(Corpus, LdaLatents)> {
    if alpha.len() != phi.len() {
        return Err(shape_err(format!("{} alpha entries for {} topics", alpha.len(), phi.len())));
    }
    let v = phi.first().map_or(0, Simplex::len);
    let mut theta = Vec::with_capacity(doc_lengths.len());
    let mut docs = Vec::with_capacity(doc_lengths.len());
    let mut z = Vec::with_capacity(doc_lengths.len());
    for &len in doc_lengths {
        let th = sample_dirichlet(alpha, rng)?;
        let mut words = Vec::with_capacity(len);
        let mut topics = Vec::with_capacity(len);
        for _ in 0..len {
            let k = sample_categorical(&th, rng);
            topics.push(k);
            words.push(sample_categorical(&phi[k], rng));
        }
        theta.push(th);
        docs.push(words);
        z.push(topics);
    }
    let corpus = Corpus::new(docs, v)?;
    Ok((corpus, LdaLatents { theta, phi: phi.to_vec(), z }))
}

/// Variational parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaVariational {
    /// Dirichlet parameters of `q(theta_d)`, `D x K`.
    pub doc_topic: Vec<Vec<f64>>,
    /// Dirichlet parameters of `q(phi_k)`, `K x V`.
    pub topic_word: Vec<Vec<f64>>,
    /// `q(z_dn)`, one simplex per token.
    pub word_topic: Vec<Vec<Simplex>>,
}

impl LdaVariational {
    pub fn k(&self) -> usize {
        self.topic_word.len()
    }

    /// Posterior-mean topic-word distributions.
    pub fn topic_means(&self) -> Vec<Simplex> {
        self.topic_word.iter().map(|l| Simplex::from_weights(l).expect("positive")).collect()
    }

    /// Posterior-mean topic proportions per document.
    pub fn doc_means(&self) -> Vec<Simplex> {
        self.doc_topic.iter().map(|g| Simplex::from_weights(g).expect("positive")).collect()
    }

    /// Relabels topics: new topic `i` is old topic `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pv = |v: &[f64]| perm.iter().map(|&k| v[k]).collect::<Vec<_>>();
        Self {
            doc_topic: self.doc_topic.iter().map(|g| pv(g)).collect(),
            topic_word: perm.iter().map(|&k| self.topic_word[k].clone()).collect(),
            word_topic: self
                .word_topic
                .iter()
                .map(|doc| doc.iter().map(|s| Simplex::new(pv(s.probs())).expect("permuted")).collect())
                .collect(),
        }
    }

    pub fn validate(&self, hyper: &LdaHyper, corpus: &Corpus) -> Result<()> {
        let (k, v) = (hyper.k(), hyper.v());
        if corpus.vocab_size != v {
            return Err(shape_err(format!("corpus vocabulary {} vs beta length {v}", corpus.vocab_size)));
        }
        if self.topic_word.len() != k || self.topic_word.iter().any(|l| l.len() != v) {
            return Err(shape_err(format!("topic_word must be {k} x {v}")));
        }
        if self.doc_topic.len() != corpus.docs.len() || self.doc_topic.iter().any(|g| g.len() != k) {
            return Err(shape_err(format!("doc_topic must be {} x {k}", corpus.docs.len())));
        }
        if self.word_topic.len() != corpus.docs.len()
            || self.word_topic.iter().zip(&corpus.docs).any(|(q, d)| q.len() != d.len() || q.iter().any(|s| s.len() != k))
        {
            return Err(shape_err("word_topic must have one K-simplex per token"));
        }
        if self.doc_topic.iter().chain(&self.topic_word).flatten().any(|&x| !(x > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidParameter("Dirichlet parameters must be positive".into()));
        }
        Ok(())
    }
}

/// `E[log x]` under `Dir(gamma)`.
pub fn dirichlet_expected_log(gamma: &[f64]) -> Vec<f64> {
    let s = digamma(gamma.iter().sum());
    gamma.iter().map(|&g| digamma(g) - s).collect()
}

/// `log B(a)^{-1} = ln Gamma(sum a) - sum ln Gamma(a_i)`.
fn log_dirichlet_norm(a: &[f64]) -> f64 {
    ln_gamma(a.iter().sum()) - a.iter().map(|&x| ln_gamma(x)).sum::<f64>()
}

/// `E_q[log Dir(x | prior)] - E_q[log Dir(x | post)]` for `q = Dir(post)`.
fn dirichlet_term(prior: &[f64], post: &[f64], elog: &[f64]) -> f64 {
    let cross: f64 = prior.iter().zip(elog).map(|(a, e)| (a - 1.0) * e).sum();
    let ent: f64 = post.iter().zip(elog).map(|(a, e)| (a - 1.0) * e).sum();
    log_dirichlet_norm(prior) + cross - log_dirichlet_norm(post) - ent
}

/// Evidence lower bound `E_q[log p(w, theta, phi, z)] - E_q[log q]`.
pub fn elbo(hyper: &LdaHyper, corpus: &Corpus, var: &LdaVariational) -> Result<f64> {
    hyper.validate()?;
    corpus.validate()?;
    var.validate(hyper, corpus)?;
    Ok(elbo_unchecked(hyper, corpus, var))
}

fn elbo_unchecked(hyper: &LdaHyper, corpus: &Corpus, var: &LdaVariational) -> f64 {
    topic_elbo(hyper, var) + doc_elbos_unchecked(hyper, corpus, var).iter().sum::<f64>()
}

/// Topic-level part of the ELBO, `sum_k E_q[log Dir(phi_k | beta)] - E_q[log q(phi_k)]`.
pub fn topic_elbo(hyper: &LdaHyper, var: &LdaVariational) -> f64 {
    var.topic_word
        .iter()
        .map(|l| dirichlet_term(&hyper.beta, l, &dirichlet_expected_log(l)))
        .sum()
}

/// Per-document parts of the ELBO. Together with [`topic_elbo`] they sum to [`elbo`].
pub fn doc_elbos(hyper: &LdaHyper, corpus: &Corpus, var: &LdaVariational) -> Result<Vec<f64>> {
    hyper.validate()?;
    corpus.validate()?;
    var.validate(hyper, corpus)?;
    Ok(doc_elbos_unchecked(hyper, corpus, var))
}

fn doc_elbos_unchecked(hyper: &LdaHyper, corpus: &Corpus, var: &LdaVariational) -> Vec<f64> {
    let elog_phi: Vec<Vec<f64>> = var.topic_word.iter().map(|l| dirichlet_expected_log(l)).collect();
    par::map_range(corpus.docs.len(), |d| {
        let g = &var.doc_topic[d];
        let elog_theta = dirichlet_expected_log(g);
        let mut t = dirichlet_term(&hyper.alpha, g, &elog_theta);
        for (&w, q) in corpus.docs[d].iter().zip(&var.word_topic[d]) {
            for (k, &p) in q.probs().iter().enumerate() {
                if p > 0.0 {
                    t += p * (elog_theta[k] + elog_phi[k][w] - p.ln());
                }
            }
        }
        t
    })
}

/// Fits the document and token factors of `corpus` with the topic factors held
/// at `topic_word`, by alternating token and document updates until the
/// document part of the ELBO settles under `cfg`'s tolerances.
pub fn infer_documents(
    hyper: &LdaHyper,
    corpus: &Corpus,
    topic_word: &[Vec<f64>],
    cfg: &EmConfig,
) -> Result<LdaVariational> {
    hyper.validate()?;
    corpus.validate()?;
    cfg.validate()?;
    let k = hyper.k();
    let word_topic = corpus.docs.iter().map(|doc| vec![Simplex::uniform(k); doc.len()]).collect();
    let mut var = LdaVariational { doc_topic: Vec::new(), topic_word: topic_word.to_vec(), word_topic };
    update_doc_topic(hyper, &mut var);
    var.validate(hyper, corpus)?;
    let mut prev = doc_elbos_unchecked(hyper, corpus, &var).iter().sum::<f64>();
    for _ in 0..cfg.max_iters {
        update_word_topic(corpus, &mut var);
        update_doc_topic(hyper, &mut var);
        let cur = doc_elbos_unchecked(hyper, corpus, &var).iter().sum::<f64>();
        let delta = cur - prev;
        prev = cur;
        if delta.abs() <= cfg.abs_tol || delta.abs() / prev.abs().max(1.0) < cfg.rel_tol {
            break;
        }
    }
    Ok(var)
}

/// Token update: `q(z_dn = k) ∝ exp(E[log theta_dk] + E[log phi_{k, w_dn}])`.
pub fn update_word_topic(corpus: &Corpus, var: &mut LdaVariational) {
    let elog_phi: Vec<Vec<f64>> = var.topic_word.iter().map(|l| dirichlet_expected_log(l)).collect();
    var.word_topic = par::map_range(corpus.docs.len(), |d| {
        let elog_theta = dirichlet_expected_log(&var.doc_topic[d]);
        corpus.docs[d]
            .iter()
            .map(|&w| {
                let lw: Vec<f64> = (0..elog_theta.len()).map(|k| elog_theta[k] + elog_phi[k][w]).collect();
                Simplex::from_log_weights(&lw).expect("finite log weights")
            })
            .collect()
    });
}

/// Document update: `gamma_d = alpha + sum_n q(z_dn)`.
pub fn update_doc_topic(hyper: &LdaHyper, var: &mut LdaVariational) {
    var.doc_topic = par::map_slice(&var.word_topic, |doc| {
        let mut g = hyper.alpha.clone();
        for q in doc {
            for (gk, p) in g.iter_mut().zip(q.probs()) {
                *gk += p;
            }
        }
        g
    });
}

/// Topic update: `lambda_kv = beta_v + sum_{d,n: w_dn = v} q(z_dn = k)`.
pub fn update_topic_word(hyper: &LdaHyper, corpus: &Corpus, var: &mut LdaVariational) {
    let mut lambda = vec![hyper.beta.clone(); hyper.k()];
    for (doc, qs) in corpus.docs.iter().zip(&var.word_topic) {
        for (&w, q) in doc.iter().zip(qs) {
            for (k, p) in q.probs().iter().enumerate() {
                lambda[k][w] += p;
            }
        }
    }
    var.topic_word = lambda;
}

/// Initial state: token distributions drawn from `Dir(1)`, global and document
/// parameters set to prior plus the implied expected counts.
pub fn lda_init(hyper: &LdaHyper, corpus: &Corpus, seed: u64) -> Result<LdaVariational> {
    hyper.validate()?;
    corpus.validate()?;
    if corpus.vocab_size != hyper.v() {
        return Err(shape_err(format!("corpus vocabulary {} vs beta length {}", corpus.vocab_size, hyper.v())));
    }
    let mut rng = RandomSource::new(seed);
    let ones = vec![1.0; hyper.k()];
    let word_topic = corpus
        .docs
        .iter()
        .map(|doc| doc.iter().map(|_| sample_dirichlet(&ones, &mut rng)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let mut var = LdaVariational { doc_topic: Vec::new(), topic_word: Vec::new(), word_topic };
    update_doc_topic(hyper, &mut var);
    update_topic_word(hyper, corpus, &mut var);
    Ok(var)
}

/// EM configuration used by default for LDA (relative ELBO tolerance `1e-6`).
pub fn default_config(seed: u64) -> EmConfig {
    EmConfig { rel_tol: 1e-6, seed, ..EmConfig::default() }
}

struct LdaEm<'a> {
    hyper: &'a LdaHyper,
    corpus: &'a Corpus,
}

impl EmProblem for LdaEm<'_> {
    type Params = LdaVariational;
    type Stats = LdaVariational;

    /// Local step: tokens, then documents.
    fn e_step(&self, p: &LdaVariational) -> Result<LdaVariational> {
        let mut v = p.clone();
        update_word_topic(self.corpus, &mut v);
        update_doc_topic(self.hyper, &mut v);
        Ok(v)
    }

    fn objective(&self, p: &LdaVariational) -> Result<f64> {
        Ok(elbo_unchecked(self.hyper, self.corpus, p))
    }

    /// Global step: topics.
    fn m_step(&self, local: &LdaVariational, _: &LdaVariational, _: &mut Vec<usize>) -> Result<LdaVariational> {
        let mut v = local.clone();
        update_topic_word(self.hyper, self.corpus, &mut v);
        Ok(v)
    }

    fn monotonicity_slack(&self) -> f64 {
        1e-6
    }
}

pub fn fit_lda(hyper: &LdaHyper, corpus: &Corpus, cfg: &EmConfig) -> Result<(LdaVariational, FitReport)> {
    let init = lda_init(hyper, corpus, cfg.seed)?;
    fit_lda_from(hyper, corpus, init, cfg)
}

pub fn fit_lda_from(
    hyper: &LdaHyper,
    corpus: &Corpus,
    init: LdaVariational,
    cfg: &EmConfig,
) -> Result<(LdaVariational, FitReport)> {
    hyper.validate()?;
    corpus.validate()?;
    init.validate(hyper, corpus)?;
    run_em(&LdaEm { hyper, corpus }, init, cfg)
}
