use serde::{Deserialize, Serialize};

use super::{CategoricalData, Dataset};
use crate::error::{shape_err, Error, Result};
use crate::irt::{item_prob, IrtParams};
use crate::lda::{generate_corpus, Corpus, LdaHyper, LdaLatents};
use crate::linalg::Mat;
use crate::mixture::{GmmParams, LcaParams};
use crate::ppca::PpcaParams;
use crate::prob::{sample_categorical, sample_gaussian, Simplex};
use crate::rng::RandomSource;
use crate::sequential::{hmm_sample, lds_sample, Emission, EmissionKind, HmmParams, LdsParams, Sequence};

/// What to generate. The JSON form is tagged by `family`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SyntheticSpec {
    Ppca {
        params: PpcaParams,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    Gmm {
        params: GmmParams,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    Lca {
        params: LcaParams,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    Irt {
        params: IrtParams,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    Lda {
        hyper: LdaHyper,
        doc_lengths: Vec<usize>,
        #[serde(default)]
        seed: u64,
    },
    /// HMM with discrete emissions.
    Hmm {
        params: HmmParams,
        lengths: Vec<usize>,
        #[serde(default)]
        seed: u64,
    },
    /// HMM with Gaussian emissions.
    Ghmm {
        params: HmmParams,
        lengths: Vec<usize>,
        #[serde(default)]
        seed: u64,
    },
    Lds {
        params: LdsParams,
        lengths: Vec<usize>,
        #[serde(default)]
        seed: u64,
    },
    /// Univariate Gaussian mixture given by weights, means and standard deviations.
    Mixture1d {
        weights: Vec<f64>,
        means: Vec<f64>,
        sds: Vec<f64>,
        n: usize,
        #[serde(default)]
        seed: u64,
    },
    /// `k` isotropic 2-d blobs with standard deviation `sd`, centered at
    /// `(i * separation, 0)` and equally weighted.
    Blobs2d {
        k: usize,
        n: usize,
        separation: f64,
        #[serde(default = "one")]
        sd: f64,
        #[serde(default)]
        seed: u64,
    },
    /// Fully observed Markov chain over `trans.rows()` symbols.
    MarkovSeq {
        init: Simplex,
        trans: Mat,
        lengths: Vec<usize>,
        #[serde(default)]
        seed: u64,
    },
}

fn one() -> f64 {
    1.0
}

/// Generated observations.
#[derive(Clone, Debug, PartialEq)]
pub enum SyntheticData {
    Matrix(Dataset),
    Categorical(CategoricalData),
    Corpus(Corpus),
    Sequences(Vec<Sequence>),
}

/// Hidden variables behind the observations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "kebab-case")]
pub enum Latents {
    /// One latent vector per observation (PPCA).
    Vectors(Mat),
    /// One class label per observation.
    Labels(Vec<usize>),
    /// One ability per person (IRT).
    Abilities(Vec<f64>),
    Topics(LdaLatents),
    /// One state path per sequence.
    Paths(Vec<Vec<usize>>),
    /// One `T x d_z` state matrix per sequence.
    States(Vec<Mat>),
}

/// Parameters that generated the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", content = "params", rename_all = "kebab-case")]
pub enum TrueParams {
    Ppca(PpcaParams),
    Gmm(GmmParams),
    Lca(LcaParams),
    Irt(IrtParams),
    Lda(LdaHyper),
    Hmm(HmmParams),
    Lds(LdsParams),
}

impl TrueParams {
    /// Family name under which the parameters are fitted and serialized.
    pub fn family(&self) -> &'static str {
        match self {
            TrueParams::Ppca(_) => "ppca",
            TrueParams::Gmm(_) => "gmm",
            TrueParams::Lca(_) => "lca",
            TrueParams::Irt(_) => "irt",
            TrueParams::Lda(_) => "lda",
            TrueParams::Hmm(p) => match p.emit.kind() {
                EmissionKind::Discrete => "hmm",
                EmissionKind::Gaussian => "ghmm",
            },
            TrueParams::Lds(_) => "lds",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Synthetic {
    pub data: SyntheticData,
    pub latents: Latents,
    pub truth: TrueParams,
}

impl SyntheticSpec {
    pub fn seed(&self) -> u64 {
        match self {
            SyntheticSpec::Ppca { seed, .. }
            | SyntheticSpec::Gmm { seed, .. }
            | SyntheticSpec::Lca { seed, .. }
            | SyntheticSpec::Irt { seed, .. }
            | SyntheticSpec::Lda { seed, .. }
            | SyntheticSpec::Hmm { seed, .. }
            | SyntheticSpec::Ghmm { seed, .. }
            | SyntheticSpec::Lds { seed, .. }
            | SyntheticSpec::Mixture1d { seed, .. }
            | SyntheticSpec::Blobs2d { seed, .. }
            | SyntheticSpec::MarkovSeq { seed, .. } => *seed,
        }
    }
}

fn field_err(field: &str, msg: impl std::fmt::Display) -> Error {
    Error::InvalidParameter(format!("{field}: {msg}"))
}

/// Ancestral sampling from the family's generative process.
pub fn generate(spec: &SyntheticSpec) -> Result<Synthetic> {
    let mut rng = RandomSource::new(spec.seed());
    match spec {
        SyntheticSpec::Ppca { params, n, .. } => {
            if !(params.sigma2 >= 0.0) {
                return Err(field_err("params.sigma2", "must be non-negative"));
            }
            let m = params.latent_dim();
            let mut z = Mat::zeros(*n, m);
            let mut x = Mat::zeros(*n, params.data_dim());
            for i in 0..*n {
                let zi = rng.normal_vec(m);
                let mut xi = params.w.matvec(&zi);
                let sd = params.sigma2.sqrt();
                for (v, mu) in xi.iter_mut().zip(&params.mu) {
                    *v += mu + sd * rng.normal();
                }
                z.row_mut(i).copy_from_slice(&zi);
                x.row_mut(i).copy_from_slice(&xi);
            }
            Ok(Synthetic {
                data: SyntheticData::Matrix(Dataset::from_mat(x)),
                latents: Latents::Vectors(z),
                truth: TrueParams::Ppca(params.clone()),
            })
        }
        SyntheticSpec::Gmm { params, n, .. } => {
            let params = GmmParams::new(params.weights.clone(), params.means.clone(), params.covs.clone())
                .map_err(|e| field_err("params", e))?;
            let (x, labels) = sample_gmm(&params, *n, &mut rng)?;
            Ok(Synthetic {
                data: SyntheticData::Matrix(Dataset::from_mat(x)),
                latents: Latents::Labels(labels),
                truth: TrueParams::Gmm(params),
            })
        }
        SyntheticSpec::Mixture1d { weights, means, sds, n, .. } => {
            if weights.len() != means.len() || means.len() != sds.len() {
                return Err(field_err("weights/means/sds", "must have equal lengths"));
            }
            if sds.iter().any(|&s| !(s > 0.0)) {
                return Err(field_err("sds", "must be positive"));
            }
            let w = Simplex::from_weights(weights).map_err(|e| field_err("weights", e))?;
            let params = GmmParams::new(
                w,
                means.iter().map(|&m| vec![m]).collect(),
                sds.iter().map(|&s| Mat::diag(&[s * s])).collect(),
            )?;
            let (x, labels) = sample_gmm(&params, *n, &mut rng)?;
            Ok(Synthetic {
                data: SyntheticData::Matrix(Dataset::from_mat(x)),
                latents: Latents::Labels(labels),
                truth: TrueParams::Gmm(params),
            })
        }
        SyntheticSpec::Blobs2d { k, n, separation, sd, .. } => {
            if *k == 0 {
                return Err(field_err("k", "must be positive"));
            }
            if !(*sd > 0.0) {
                return Err(field_err("sd", "must be positive"));
            }
            let params = GmmParams::new(
                Simplex::uniform(*k),
                (0..*k).map(|i| vec![i as f64 * separation, 0.0]).collect(),
                vec![Mat::identity(2).scale(sd * sd); *k],
            )?;
            let (x, labels) = sample_gmm(&params, *n, &mut rng)?;
            Ok(Synthetic {
                data: SyntheticData::Matrix(Dataset::from_mat(x)),
                latents: Latents::Labels(labels),
                truth: TrueParams::Gmm(params),
            })
        }
        SyntheticSpec::Lca { params, n, .. } => {
            let params = LcaParams::new(params.weights.clone(), params.item_probs.clone()).map_err(|e| field_err("params", e))?;
            let mut codes = Vec::with_capacity(*n);
            let mut labels = Vec::with_capacity(*n);
            for _ in 0..*n {
                let k = sample_categorical(&params.weights, &mut rng);
                labels.push(k);
                codes.push(params.item_probs[k].iter().map(|s| sample_categorical(s, &mut rng)).collect());
            }
            Ok(Synthetic {
                data: SyntheticData::Categorical(CategoricalData::new(codes, params.n_categories())?),
                latents: Latents::Labels(labels),
                truth: TrueParams::Lca(params),
            })
        }
        SyntheticSpec::Irt { params, n, .. } => {
            let params = IrtParams::new(params.a.clone(), params.b.clone()).map_err(|e| field_err("params", e))?;
            let j = params.n_items();
            let mut theta = Vec::with_capacity(*n);
            let mut x = Mat::zeros(*n, j);
            for i in 0..*n {
                let t = rng.normal();
                theta.push(t);
                for jj in 0..j {
                    x[(i, jj)] = if rng.uniform() < item_prob(t, params.a[jj], params.b[jj]) { 1.0 } else { 0.0 };
                }
            }
            Ok(Synthetic {
                data: SyntheticData::Matrix(Dataset::from_mat(x)),
                latents: Latents::Abilities(theta),
                truth: TrueParams::Irt(params),
            })
        }
        SyntheticSpec::Lda { hyper, doc_lengths, .. } => {
            hyper.validate().map_err(|e| field_err("hyper", e))?;
            if doc_lengths.iter().any(|&l| l == 0) {
                return Err(field_err("doc_lengths", "documents must be non-empty"));
            }
            let (corpus, latents) = generate_corpus(hyper, doc_lengths, &mut rng)?;
            Ok(Synthetic {
                data: SyntheticData::Corpus(corpus),
                latents: Latents::Topics(latents),
                truth: TrueParams::Lda(hyper.clone()),
            })
        }
        SyntheticSpec::Hmm { params, lengths, .. } | SyntheticSpec::Ghmm { params, lengths, .. } => {
            let expected = if matches!(spec, SyntheticSpec::Hmm { .. }) { EmissionKind::Discrete } else { EmissionKind::Gaussian };
            if params.emit.kind() != expected {
                return Err(field_err("params.emit", format!("expected {expected:?} emissions")));
            }
            let params =
                HmmParams::new(params.pi.clone(), params.trans.clone(), params.emit.clone()).map_err(|e| field_err("params", e))?;
            let (seqs, paths) = sample_sequences(lengths, |t| hmm_sample(&params, t, &mut rng))?;
            Ok(Synthetic {
                data: SyntheticData::Sequences(seqs),
                latents: Latents::Paths(paths),
                truth: TrueParams::Hmm(params),
            })
        }
        SyntheticSpec::MarkovSeq { init, trans, lengths, .. } => {
            let k = init.len();
            let params = HmmParams::new(
                init.clone(),
                trans.clone(),
                Emission::Discrete((0..k).map(|i| Simplex::point_mass(k, i)).collect()),
            )
            .map_err(|e| field_err("trans", e))?;
            let (seqs, paths) = sample_sequences(lengths, |t| hmm_sample(&params, t, &mut rng))?;
            Ok(Synthetic {
                data: SyntheticData::Sequences(seqs),
                latents: Latents::Paths(paths),
                truth: TrueParams::Hmm(params),
            })
        }
        SyntheticSpec::Lds { params, lengths, .. } => {
            let params = LdsParams::new(
                params.a.clone(),
                params.c.clone(),
                params.q.clone(),
                params.r.clone(),
                params.mu0.clone(),
                params.sigma0.clone(),
            )
            .map_err(|e| field_err("params", e))?;
            if lengths.is_empty() {
                return Err(field_err("lengths", "need at least one sequence"));
            }
            let mut seqs = Vec::with_capacity(lengths.len());
            let mut states = Vec::with_capacity(lengths.len());
            for &t in lengths {
                let (z, x) = lds_sample(&params, t, &mut rng)?;
                seqs.push(Sequence::Continuous(x));
                states.push(z);
            }
            Ok(Synthetic {
                data: SyntheticData::Sequences(seqs),
                latents: Latents::States(states),
                truth: TrueParams::Lds(params),
            })
        }
    }
}

fn sample_sequences(
    lengths: &[usize],
    mut draw: impl FnMut(usize) -> Result<(Sequence, Vec<usize>)>,
) -> Result<(Vec<Sequence>, Vec<Vec<usize>>)> {
    if lengths.is_empty() || lengths.contains(&0) {
        return Err(field_err("lengths", "need at least one non-empty sequence"));
    }
    let mut seqs = Vec::with_capacity(lengths.len());
    let mut paths = Vec::with_capacity(lengths.len());
    for &t in lengths {
        let (s, z) = draw(t)?;
        seqs.push(s);
        paths.push(z);
    }
    Ok((seqs, paths))
}

/// `n` draws from a Gaussian mixture with their component labels.
pub fn sample_gmm(params: &GmmParams, n: usize, rng: &mut RandomSource) -> Result<(Mat, Vec<usize>)> {
    let d = params.dim();
    let mut x = Mat::zeros(n, d);
    let mut labels = Vec::with_capacity(n);
    let comps: Vec<_> = (0..params.k()).map(|k| params.component(k)).collect();
    for i in 0..n {
        let k = sample_categorical(&params.weights, rng);
        labels.push(k);
        let v = sample_gaussian(&comps[k], rng)?;
        if v.len() != d {
            return Err(shape_err("component dimension"));
        }
        x.row_mut(i).copy_from_slice(&v);
    }
    Ok((x, labels))
}
