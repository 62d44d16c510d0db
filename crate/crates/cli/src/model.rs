use std::path::Path;

use latentlab_core::datasets::{read_corpus, read_csv, read_model, read_seq, ModelFile};
use latentlab_core::datasets::CategoricalData;
use latentlab_core::irt::{IrtParams, QuadratureRule, DEFAULT_NODES};
use latentlab_core::lda::{self, Corpus, LdaHyper};
use latentlab_core::mixture::{self, GmmParams, LcaParams};
use latentlab_core::ppca::{self, PpcaParams};
use latentlab_core::sequential::{self, EmissionKind, HmmParams, LdsParams, Sequence};
use latentlab_core::{irt, EmConfig, FitReport, Mat, RandomSource};
use latentlab_deep::arm::ArModel;
use latentlab_deep::diffusion::{DiffusionModel, NoiseSchedule};
use latentlab_deep::flow::FlowModel;
use latentlab_deep::gan::GanModel;
use latentlab_deep::vae::{Likelihood, VaeModel};
use serde::{Deserialize, Serialize};

use crate::config::{PpcaMethod, RunConfig};
use crate::error::{CliError, CliResult};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Family {
    Ppca,
    Gmm,
    Lca,
    Irt,
    Lda,
    /// HMM with discrete emissions.
    Hmm,
    /// HMM with Gaussian emissions.
    Ghmm,
    Lds,
    Vae,
    Flow,
    Diffusion,
    Arm,
    Gan,
}

const ALL: [Family; 13] = [
    Family::Ppca,
    Family::Gmm,
    Family::Lca,
    Family::Irt,
    Family::Lda,
    Family::Hmm,
    Family::Ghmm,
    Family::Lds,
    Family::Vae,
    Family::Flow,
    Family::Diffusion,
    Family::Arm,
    Family::Gan,
];

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Ppca => "ppca",
            Family::Gmm => "gmm",
            Family::Lca => "lca",
            Family::Irt => "irt",
            Family::Lda => "lda",
            Family::Hmm => "hmm",
            Family::Ghmm => "ghmm",
            Family::Lds => "lds",
            Family::Vae => "vae",
            Family::Flow => "flow",
            Family::Diffusion => "diffusion",
            Family::Arm => "arm",
            Family::Gan => "gan",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        ALL.into_iter().find(|f| f.name() == name)
    }
}

/// Topic factors of a fitted LDA model. Document factors are refitted for
/// whatever corpus the model is applied to.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdaModel {
    pub hyper: LdaHyper,
    /// Dirichlet parameters of `q(phi_k)`, `K x V`.
    pub topic_word: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Ppca(PpcaParams),
    Gmm(GmmParams),
    Lca(LcaParams),
    Irt(IrtParams),
    Lda(LdaModel),
    Hmm(HmmParams),
    Ghmm(HmmParams),
    Lds(LdsParams),
    Vae(VaeModel),
    Flow(FlowModel),
    Diffusion(DiffusionModel),
    Arm(ArModel),
    Gan(GanModel),
}

impl Model {
    pub fn family(&self) -> Family {
        match self {
            Model::Ppca(_) => Family::Ppca,
            Model::Gmm(_) => Family::Gmm,
            Model::Lca(_) => Family::Lca,
            Model::Irt(_) => Family::Irt,
            Model::Lda(_) => Family::Lda,
            Model::Hmm(_) => Family::Hmm,
            Model::Ghmm(_) => Family::Ghmm,
            Model::Lds(_) => Family::Lds,
            Model::Vae(_) => Family::Vae,
            Model::Flow(_) => Family::Flow,
            Model::Diffusion(_) => Family::Diffusion,
            Model::Arm(_) => Family::Arm,
            Model::Gan(_) => Family::Gan,
        }
    }
}

/// A model together with the configuration it was fitted under.
#[derive(Clone, Debug, PartialEq)]
pub struct Saved {
    pub model: Model,
    pub config: RunConfig,
}

impl Saved {
    pub fn read(path: &Path) -> CliResult<Self> {
        let file = read_model(path).map_err(|e| CliError::usage(format!("model {}: {e}", path.display())))?;
        let family = Family::parse(&file.family)
            .ok_or_else(|| CliError::usage(format!("model {}: unknown family '{}'", path.display(), file.family)))?;
        let config: RunConfig = file.config_as()?;
        let model = match family {
            Family::Ppca => Model::Ppca(file.params_as()?),
            Family::Gmm => Model::Gmm(file.params_as()?),
            Family::Lca => Model::Lca(file.params_as()?),
            Family::Irt => Model::Irt(file.params_as()?),
            Family::Lda => Model::Lda(file.params_as()?),
            Family::Hmm => Model::Hmm(file.params_as()?),
            Family::Ghmm => Model::Ghmm(file.params_as()?),
            Family::Lds => Model::Lds(file.params_as()?),
            Family::Vae => Model::Vae(file.params_as()?),
            Family::Flow => Model::Flow(file.params_as()?),
            Family::Diffusion => Model::Diffusion(file.params_as()?),
            Family::Arm => Model::Arm(file.params_as()?),
            Family::Gan => Model::Gan(file.params_as()?),
        };
        Ok(Saved { model, config })
    }

    pub fn to_file(&self) -> CliResult<ModelFile> {
        let name = self.model.family().name();
        let c = &self.config;
        Ok(match &self.model {
            Model::Ppca(p) => ModelFile::new(name, c, p)?,
            Model::Gmm(p) => ModelFile::new(name, c, p)?,
            Model::Lca(p) => ModelFile::new(name, c, p)?,
            Model::Irt(p) => ModelFile::new(name, c, p)?,
            Model::Lda(p) => ModelFile::new(name, c, p)?,
            Model::Hmm(p) | Model::Ghmm(p) => ModelFile::new(name, c, p)?,
            Model::Lds(p) => ModelFile::new(name, c, p)?,
            Model::Vae(p) => ModelFile::new(name, c, p)?,
            Model::Flow(p) => ModelFile::new(name, c, p)?,
            Model::Diffusion(p) => ModelFile::new(name, c, p)?,
            Model::Arm(p) => ModelFile::new(name, c, p)?,
            Model::Gan(p) => ModelFile::new(name, c, p)?,
        })
    }

    pub fn quadrature(&self) -> CliResult<QuadratureRule> {
        Ok(QuadratureRule::gauss_hermite(self.config.nodes.unwrap_or(DEFAULT_NODES))?)
    }

    pub fn em_config(&self) -> EmConfig {
        self.config.em.clone().unwrap_or_else(|| EmConfig::with_seed(self.config.seed))
    }
}

/// Per-iteration objective of a fit, written as `<out>.trace.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    /// Name of the index column followed by the value columns.
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<f64>>,
}

impl Trace {
    /// Initial objective at iteration 0, then one row per EM iteration.
    fn em(report: &FitReport) -> Self {
        let mut rows = vec![vec![report.initial_objective]];
        rows.extend(report.objective_trace.iter().map(|&v| vec![v]));
        Trace { header: vec!["iter", "objective"], rows }
    }

    fn epochs(name: &'static str, values: Vec<f64>) -> Self {
        Trace { header: vec!["epoch", name], rows: values.into_iter().map(|v| vec![v]).collect() }
    }
}

fn read_matrix(path: &Path) -> CliResult<Mat> {
    Ok(read_csv(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?.values)
}

fn read_categorical(path: &Path, n_categories: Option<Vec<usize>>) -> CliResult<CategoricalData> {
    let d = read_csv(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    Ok(d.to_categorical(n_categories)?)
}

fn read_sequences(path: &Path) -> CliResult<Vec<Sequence>> {
    read_seq(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn read_docs(path: &Path, vocab: Option<usize>) -> CliResult<Corpus> {
    read_corpus(path, vocab).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

fn continuous(seqs: &[Sequence]) -> CliResult<Vec<Mat>> {
    seqs.iter().map(|s| Ok(s.as_continuous()?.clone())).collect()
}

/// Rows of a CSV of integer codes, for the autoregressive model.
fn read_codes(path: &Path) -> CliResult<Vec<Vec<usize>>> {
    let data = read_categorical(path, None)?;
    Ok(data.codes)
}

pub fn fit(family: Family, data: &Path, cfg: &mut RunConfig) -> CliResult<(Model, Trace)> {
    let name = family.name();
    let seed = cfg.seed;
    Ok(match family {
        Family::Ppca => {
            let x = read_matrix(data)?;
            let m = RunConfig::required(cfg.latent_dim, "latent-dim", name)?;
            let (p, report) = match *cfg.method.get_or_insert(PpcaMethod::ClosedForm) {
                PpcaMethod::ClosedForm => {
                    let p = ppca::fit_closed_form(&x, m)?;
                    let ll = ppca::marginal_loglik(&p, &x)?;
                    (p, FitReport::closed_form(ll))
                }
                PpcaMethod::Em => ppca::fit_em(&x, m, &cfg.em_config(EmConfig::default()))?,
            };
            (Model::Ppca(p), Trace::em(&report))
        }
        Family::Gmm => {
            let x = read_matrix(data)?;
            let k = RunConfig::required(cfg.k, "k", name)?;
            let (p, report) = mixture::fit_gmm(&x, k, &cfg.em_config(EmConfig::default()))?;
            (Model::Gmm(p), Trace::em(&report))
        }
        Family::Lca => {
            let x = read_categorical(data, None)?;
            let k = RunConfig::required(cfg.k, "k", name)?;
            let (p, report) = mixture::fit_lca(&x, k, &cfg.em_config(EmConfig::default()))?;
            (Model::Lca(p), Trace::em(&report))
        }
        Family::Irt => {
            let x = read_matrix(data)?;
            let quad = QuadratureRule::gauss_hermite(*cfg.nodes.get_or_insert(DEFAULT_NODES))?;
            let (p, report) = irt::fit_irt(&x, &quad, &cfg.em_config(EmConfig::default()))?;
            (Model::Irt(p), Trace::em(&report))
        }
        Family::Lda => {
            let corpus = read_docs(data, cfg.vocab)?;
            cfg.vocab = Some(corpus.vocab_size);
            let k = RunConfig::required(cfg.k, "k", name)?;
            let alpha = *cfg.alpha.get_or_insert(1.0 / k as f64);
            let beta = *cfg.beta.get_or_insert(0.1);
            let hyper = LdaHyper::symmetric(k, corpus.vocab_size, alpha, beta)?;
            let (var, report) = lda::fit_lda(&hyper, &corpus, &cfg.em_config(lda::default_config(seed)))?;
            (Model::Lda(LdaModel { hyper, topic_word: var.topic_word }), Trace::em(&report))
        }
        Family::Hmm | Family::Ghmm => {
            let seqs = read_sequences(data)?;
            let k = RunConfig::required(cfg.k, "k", name)?;
            let kind = if family == Family::Hmm { EmissionKind::Discrete } else { EmissionKind::Gaussian };
            let (p, report) = sequential::hmm_fit(&seqs, k, kind, &cfg.em_config(EmConfig::default()))?;
            let model = if family == Family::Hmm { Model::Hmm(p) } else { Model::Ghmm(p) };
            (model, Trace::em(&report))
        }
        Family::Lds => {
            let seqs = continuous(&read_sequences(data)?)?;
            let dz = RunConfig::required(cfg.latent_dim, "latent-dim", name)?;
            let (p, report) = sequential::lds_fit(&seqs, dz, &cfg.em_config(EmConfig::default()))?;
            (Model::Lds(p), Trace::em(&report))
        }
        Family::Vae => {
            let x = read_matrix(data)?;
            let latent = *cfg.latent_dim.get_or_insert(2);
            let hidden = cfg.hidden(&[32]);
            let lik = *cfg.likelihood.get_or_insert(Likelihood::default());
            let train = cfg.train_config();
            let mut rng = RandomSource::new(seed);
            let mut m = VaeModel::new(x.cols(), latent, &hidden, lik, &mut rng)?;
            let trace = m.train(&x, &train, &mut rng)?;
            (Model::Vae(m), Trace::epochs("elbo", trace))
        }
        Family::Flow => {
            let x = read_matrix(data)?;
            let layers = *cfg.layers.get_or_insert(4);
            let hidden = cfg.hidden(&[32]);
            let train = cfg.train_config();
            let mut rng = RandomSource::new(seed);
            let mut m = FlowModel::coupling_stack(x.cols(), layers, &hidden, &mut rng)?;
            let trace = m.fit(&x, &train, &mut rng)?;
            (Model::Flow(m), Trace::epochs("loglik", trace))
        }
        Family::Diffusion => {
            let x = read_matrix(data)?;
            let steps = *cfg.steps.get_or_insert(50);
            let hidden = cfg.hidden(&[32, 32]);
            let train = cfg.train_config();
            let mut rng = RandomSource::new(seed);
            let mut m = DiffusionModel::new(x.cols(), NoiseSchedule::default_for(steps)?, &hidden, &mut rng)?;
            let trace = m.train(&x, &train, &mut rng)?;
            (Model::Diffusion(m), Trace::epochs("loss", trace))
        }
        Family::Arm => {
            let seqs = read_codes(data)?;
            let len = seqs.first().map_or(0, Vec::len);
            let observed = seqs.iter().flatten().map(|&v| v + 1).max().unwrap_or(2).max(2);
            let vocab = *cfg.vocab.get_or_insert(observed);
            let hidden = cfg.hidden(&[32]);
            let train = cfg.train_config();
            let mut rng = RandomSource::new(seed);
            let mut m = ArModel::new(len, vocab, &hidden, &mut rng)?;
            let trace = m.train(&seqs, &train, &mut rng)?;
            (Model::Arm(m), Trace::epochs("loglik", trace))
        }
        Family::Gan => {
            let x = read_matrix(data)?;
            let prior = *cfg.latent_dim.get_or_insert(2);
            let hidden = cfg.hidden(&[32]);
            let gan = *cfg.gan.get_or_insert_with(Default::default);
            let mut rng = RandomSource::new(seed);
            let mut m = GanModel::new(prior, x.cols(), &hidden, &hidden, &mut rng)?;
            let t = m.train(&x, &gan, &mut rng)?;
            let rows = t.disc.iter().zip(&t.gen).map(|(&d, &g)| vec![d, g]).collect();
            (Model::Gan(m), Trace { header: vec!["step", "disc_loss", "gen_loss"], rows })
        }
    })
}

/// Per-point scores from `eval`.
pub struct Scores {
    /// `loglik` or `elbo`.
    pub kind: &'static str,
    pub points: Vec<f64>,
    pub total: f64,
}

impl Scores {
    fn sum(kind: &'static str, points: Vec<f64>) -> Self {
        let total = points.iter().sum();
        Scores { kind, points, total }
    }
}

/// Log-likelihood per observation (row, document or sequence), or a lower
/// bound where the likelihood is intractable. Stochastic bounds average
/// `samples` draws.
pub fn eval(saved: &Saved, data: &Path, samples: usize, rng: &mut RandomSource) -> CliResult<Scores> {
    if samples == 0 {
        return Err(CliError::usage("--samples must be positive"));
    }
    Ok(match &saved.model {
        Model::Ppca(p) => Scores::sum("loglik", ppca::pointwise_loglik(p, &read_matrix(data)?)?),
        Model::Gmm(p) => Scores::sum("loglik", mixture::gmm_pointwise_loglik(p, &read_matrix(data)?)?),
        Model::Lca(p) => {
            let x = read_categorical(data, Some(p.n_categories()))?;
            Scores::sum("loglik", mixture::lca_pointwise_loglik(p, &x)?)
        }
        Model::Irt(p) => Scores::sum("loglik", irt::pointwise_loglik(p, &read_matrix(data)?, &saved.quadrature()?)?),
        Model::Lda(m) => {
            let corpus = read_docs(data, Some(m.hyper.v()))?;
            let var = lda::infer_documents(&m.hyper, &corpus, &m.topic_word, &saved.em_config())?;
            let points = lda::doc_elbos(&m.hyper, &corpus, &var)?;
            // the topic part of the bound is shared by all documents
            let total = lda::topic_elbo(&m.hyper, &var) + points.iter().sum::<f64>();
            Scores { kind: "elbo", points, total }
        }
        Model::Hmm(p) | Model::Ghmm(p) => {
            let seqs = read_sequences(data)?;
            let points = seqs.iter().map(|s| sequential::hmm_loglik(p, std::slice::from_ref(s))).collect::<Result<_, _>>()?;
            Scores::sum("loglik", points)
        }
        Model::Lds(p) => {
            let seqs = continuous(&read_sequences(data)?)?;
            let points = seqs.iter().map(|s| sequential::lds_loglik(p, std::slice::from_ref(s))).collect::<Result<_, _>>()?;
            Scores::sum("loglik", points)
        }
        Model::Vae(m) => Scores::sum("elbo", m.pointwise_elbo(&read_matrix(data)?, samples, rng)?),
        Model::Flow(m) => Scores::sum("loglik", m.pointwise_loglik(&read_matrix(data)?)?),
        Model::Diffusion(m) => {
            let x = read_matrix(data)?;
            let mut points = Vec::with_capacity(x.rows());
            for row in x.row_iter() {
                let mut acc = 0.0;
                for _ in 0..samples {
                    acc += m.elbo(row, rng)?;
                }
                points.push(acc / samples as f64);
            }
            Scores::sum("elbo", points)
        }
        Model::Arm(m) => Scores::sum("loglik", m.pointwise_loglik(&read_codes(data)?)?),
        Model::Gan(_) => return Err(CliError::usage("eval: a gan defines no likelihood")),
    })
}

/// A CSV table with a header and preformatted cells.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

fn names(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|j| format!("{prefix}{j}")).collect()
}

fn numbers(v: &[f64]) -> Vec<String> {
    v.iter().map(|&x| latentlab_core::datasets::format_f64(x)).collect()
}

fn matrix_table(prefix: &str, m: &Mat) -> Table {
    Table { header: names(prefix, m.cols()), rows: m.row_iter().map(numbers).collect() }
}

/// Posterior summaries: latent means (PPCA, VAE with scales, flow codes),
/// class responsibilities (GMM, LCA), ability EAP and SD (IRT), document topic
/// proportions (LDA) and smoothed per-step marginals (HMM, LDS).
pub fn infer(saved: &Saved, data: &Path) -> CliResult<Table> {
    Ok(match &saved.model {
        Model::Ppca(p) => {
            let x = read_matrix(data)?;
            let rows = x.row_iter().map(|r| Ok(numbers(&ppca::posterior(p, r)?.mean))).collect::<CliResult<_>>()?;
            Table { header: names("z", p.latent_dim()), rows }
        }
        Model::Gmm(p) => matrix_table("p", &mixture::gmm_e_step(p, &read_matrix(data)?)?.gamma),
        Model::Lca(p) => {
            let x = read_categorical(data, Some(p.n_categories()))?;
            matrix_table("p", &mixture::lca_e_step(p, &x)?.gamma)
        }
        Model::Irt(p) => {
            let x = read_matrix(data)?;
            let quad = saved.quadrature()?;
            let rows = x
                .row_iter()
                .map(|r| {
                    let post = irt::posterior_theta(p, r, &quad)?;
                    Ok(numbers(&[post.eap, post.sd]))
                })
                .collect::<CliResult<_>>()?;
            Table { header: vec!["eap".into(), "sd".into()], rows }
        }
        Model::Lda(m) => {
            let corpus = read_docs(data, Some(m.hyper.v()))?;
            let var = lda::infer_documents(&m.hyper, &corpus, &m.topic_word, &saved.em_config())?;
            Table { header: names("topic", m.hyper.k()), rows: var.doc_means().iter().map(|s| numbers(s.probs())).collect() }
        }
        Model::Hmm(p) | Model::Ghmm(p) => {
            let mut rows = Vec::new();
            for (i, s) in read_sequences(data)?.iter().enumerate() {
                let post = sequential::hmm_forward_backward(p, s)?;
                for (t, r) in post.marginals.row_iter().enumerate() {
                    let mut row = vec![i.to_string(), t.to_string()];
                    row.extend(numbers(r));
                    rows.push(row);
                }
            }
            let mut header = vec!["seq".to_string(), "t".to_string()];
            header.extend(names("p", p.k()));
            Table { header, rows }
        }
        Model::Lds(p) => {
            let mut rows = Vec::new();
            for (i, s) in continuous(&read_sequences(data)?)?.iter().enumerate() {
                let post = sequential::kalman_smooth(p, s)?;
                for (t, g) in post.marginals.iter().enumerate() {
                    let mut row = vec![i.to_string(), t.to_string()];
                    row.extend(numbers(&g.mean));
                    row.extend((0..g.dim()).map(|j| latentlab_core::datasets::format_f64(g.cov[(j, j)])));
                    rows.push(row);
                }
            }
            let dz = p.state_dim();
            let mut header = vec!["seq".to_string(), "t".to_string()];
            header.extend(names("mean", dz));
            header.extend(names("var", dz));
            Table { header, rows }
        }
        Model::Vae(m) => {
            let (mu, sigma) = m.encode(&read_matrix(data)?)?;
            let mut header = names("mu", mu.cols());
            header.extend(names("sigma", sigma.cols()));
            let rows = mu
                .row_iter()
                .zip(sigma.row_iter())
                .map(|(a, b)| {
                    let mut r = numbers(a);
                    r.extend(numbers(b));
                    r
                })
                .collect();
            Table { header, rows }
        }
        Model::Flow(m) => matrix_table("z", &m.encode(&read_matrix(data)?)?),
        other => {
            return Err(CliError::usage(format!("infer: a {} model has no posterior summary", other.family().name())))
        }
    })
}

pub fn reconstruct(saved: &Saved, data: &Path) -> CliResult<Mat> {
    let x = read_matrix(data)?;
    Ok(match &saved.model {
        Model::Ppca(p) => {
            let rows: Vec<f64> = x.row_iter().map(|r| ppca::reconstruct(p, r)).collect::<Result<Vec<_>, _>>()?.concat();
            Mat::from_vec(x.rows(), p.data_dim(), rows)?
        }
        Model::Vae(m) => m.reconstruct(&x)?,
        other => {
            return Err(CliError::usage(format!(
                "reconstruct: only ppca and vae models reconstruct, not {}",
                other.family().name()
            )))
        }
    })
}
