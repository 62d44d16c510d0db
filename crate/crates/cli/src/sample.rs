use std::path::Path;

use latentlab_core::datasets::{read_csv, ModelFile};
use latentlab_core::datasets::{generate, sample_gmm, SyntheticData, SyntheticSpec};
use latentlab_core::irt::item_prob;
use latentlab_core::lda::generate_with_topics;
use latentlab_core::ppca::{self, SampleFrom};
use latentlab_core::prob::sample_categorical;
use latentlab_core::sequential::{hmm_sample, lds_sample, Sequence};
use latentlab_core::{Mat, RandomSource, Simplex};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::model::{Model, Saved};
use crate::output::{sibling, write_text, Observations};

/// Where latent draws come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Source {
    Prior,
    Posterior,
}

pub struct SampleRequest<'a> {
    pub n: usize,
    pub from: Source,
    pub given: Option<&'a Path>,
    /// Sequence or document length.
    pub length: usize,
    /// Bernoulli VAE: draw binary pixels instead of returning probabilities.
    pub binary: bool,
}

pub fn sample(saved: &Saved, req: &SampleRequest<'_>, rng: &mut RandomSource) -> CliResult<Observations> {
    let n = req.n;
    if req.from == Source::Posterior || req.given.is_some() {
        let Model::Ppca(p) = &saved.model else {
            return Err(CliError::usage("sample: posterior sampling is available for ppca only"));
        };
        if req.from != Source::Posterior {
            return Err(CliError::usage("sample: --given needs --from posterior"));
        }
        let given = req.given.ok_or_else(|| CliError::usage("sample: --from posterior needs --given <csv>"))?;
        let x = read_csv(given).map_err(|e| CliError::usage(format!("{}: {e}", given.display())))?.values;
        // n draws for each given row, in row order
        let mut flat = Vec::with_capacity(n * x.rows() * p.data_dim());
        for row in x.row_iter() {
            flat.extend_from_slice(ppca::sample(p, n, rng, SampleFrom::Posterior(row))?.as_slice());
        }
        return Ok(Observations::Matrix(Mat::from_vec(n * x.rows(), p.data_dim(), flat)?));
    }
    if req.length == 0 {
        return Err(CliError::usage("sample: --length must be positive"));
    }
    Ok(match &saved.model {
        Model::Ppca(p) => Observations::Matrix(ppca::sample(p, n, rng, SampleFrom::Prior)?),
        Model::Gmm(p) => Observations::Matrix(sample_gmm(p, n, rng)?.0),
        Model::Lca(p) => {
            let rows = (0..n)
                .map(|_| {
                    let k = sample_categorical(&p.weights, rng);
                    p.item_probs[k].iter().map(|s| sample_categorical(s, rng)).collect()
                })
                .collect();
            Observations::Codes(rows)
        }
        Model::Irt(p) => {
            let j = p.n_items();
            let mut x = Mat::zeros(n, j);
            for i in 0..n {
                let theta = rng.normal();
                for jj in 0..j {
                    x[(i, jj)] = f64::from(u8::from(rng.uniform() < item_prob(theta, p.a[jj], p.b[jj])));
                }
            }
            Observations::Matrix(x)
        }
        Model::Lda(m) => {
            // topics at their variational means
            let phi = m.topic_word.iter().map(|l| Simplex::from_weights(l)).collect::<Result<Vec<_>, _>>()?;
            let (corpus, _) = generate_with_topics(&m.hyper.alpha, &phi, &vec![req.length; n], rng)?;
            Observations::Corpus(corpus)
        }
        Model::Hmm(p) | Model::Ghmm(p) => {
            let seqs = (0..n).map(|_| Ok(hmm_sample(p, req.length, rng)?.0)).collect::<CliResult<_>>()?;
            Observations::Sequences(seqs)
        }
        Model::Lds(p) => {
            let seqs = (0..n).map(|_| Ok(Sequence::Continuous(lds_sample(p, req.length, rng)?.1))).collect::<CliResult<_>>()?;
            Observations::Sequences(seqs)
        }
        Model::Vae(m) => Observations::Matrix(m.sample(n, req.binary, rng)?),
        Model::Flow(m) => Observations::Matrix(m.sample(n, rng)?),
        Model::Diffusion(m) => Observations::Matrix(m.sample(n, rng)?),
        Model::Arm(m) => Observations::Codes(m.sample(n, rng)?),
        Model::Gan(m) => Observations::Matrix(m.sample(n, rng)?),
    })
}

/// Runs a synthetic spec and writes the data to `out`, the hidden variables to
/// `<out>.latents.json` and, for families the CLI can fit, the generating
/// parameters as a model file `<out>.truth.json`.
pub fn synth(spec_path: &Path, out: &Path) -> CliResult<()> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| CliError::usage(format!("cannot read spec {}: {e}", spec_path.display())))?;
    let spec: SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("spec {}: {e}", spec_path.display())))?;
    let s = generate(&spec)?;
    let data = match s.data {
        SyntheticData::Matrix(d) => Observations::Matrix(d.values),
        SyntheticData::Categorical(c) => Observations::Codes(c.codes),
        SyntheticData::Corpus(c) => Observations::Corpus(c),
        SyntheticData::Sequences(v) => Observations::Sequences(v),
    };
    data.write(out)?;
    let mut latents = serde_json::to_string_pretty(&s.latents)?;
    latents.push('\n');
    write_text(&sibling(out, ".latents.json"), &latents)?;
    let family = s.truth.family();
    if family != "lda" {
        let config = RunConfig { seed: spec.seed(), ..RunConfig::default() };
        let params = match serde_json::to_value(&s.truth)? {
            serde_json::Value::Object(mut m) => m.remove("params").unwrap_or_default(),
            _ => unreachable!("true parameters serialize as a tagged object"),
        };
        let file = ModelFile::new(family, &config, &params)?;
        write_text(&sibling(out, ".truth.json"), &file.to_json()?)?;
    }
    Ok(())
}
