use std::path::Path;

use latentlab_core::EmConfig;
use latentlab_deep::gan::{GanConfig, GenLoss};
use latentlab_deep::vae::Likelihood;
use latentlab_deep::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::model::Family;

/// How PPCA is fitted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum PpcaMethod {
    ClosedForm,
    Em,
}

/// Settings of a fit. Read from the `--config` file, overridden by flags,
/// completed with per-family defaults and stored in the model file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Components, classes, states or topics.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub latent_dim: Option<usize>,
    /// Diffusion steps.
    #[serde(rename = "T", skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    /// Coupling layers of a flow.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Quadrature nodes for IRT.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<PpcaMethod>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub likelihood: Option<Likelihood>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em: Option<EmConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gan: Option<GanConfig>,
}

/// Flag values that take precedence over the config file.
#[derive(Clone, Debug, Default, clap::Args)]
pub struct FitFlags {
    /// JSON file with a run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of components, classes, states or topics.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Number of diffusion steps.
    #[arg(long = "T")]
    pub steps: Option<usize>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    /// Coupling layers of a flow.
    #[arg(long)]
    pub layers: Option<usize>,
    /// Vocabulary size for lda and arm.
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Symmetric document-topic prior for lda.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Symmetric topic-word prior for lda.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Quadrature nodes for irt.
    #[arg(long)]
    pub nodes: Option<usize>,
    #[arg(long, value_enum)]
    pub method: Option<PpcaMethod>,
    /// Decoder likelihood of a VAE.
    #[arg(long, value_parser = ["gaussian", "bernoulli"])]
    pub likelihood: Option<String>,
    /// Observation noise of a Gaussian VAE decoder.
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub max_iters: Option<usize>,
    /// Relative tolerance of EM.
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Generator updates of a GAN.
    #[arg(long)]
    pub steps_gan: Option<usize>,
    #[arg(long, value_parser = ["non-saturating", "minimax"])]
    pub gen_loss: Option<String>,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))
    }

    /// Config file (if any) with the flags applied on top. Optimizer flags go
    /// to the GAN settings for `gan` and to the training settings otherwise.
    pub fn from_flags(flags: &FitFlags, family: Family) -> CliResult<Self> {
        let mut c = match &flags.config {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(s) = flags.seed {
            c.seed = s;
        }
        c.k.apply(flags.k);
        c.latent_dim.apply(flags.latent_dim);
        c.steps.apply(flags.steps);
        c.hidden.apply(flags.hidden.clone());
        c.layers.apply(flags.layers);
        c.vocab.apply(flags.vocab);
        c.alpha.apply(flags.alpha);
        c.beta.apply(flags.beta);
        c.nodes.apply(flags.nodes);
        c.method.apply(flags.method);
        match (flags.likelihood.as_deref(), flags.sigma) {
            (Some("bernoulli"), Some(_)) => return Err(CliError::usage("--sigma applies to the gaussian likelihood only")),
            (Some("bernoulli"), None) => c.likelihood = Some(Likelihood::Bernoulli),
            (Some(_), s) | (None, s @ Some(_)) => {
                let current = match c.likelihood {
                    Some(Likelihood::Gaussian { sigma }) => sigma,
                    _ => default_sigma(),
                };
                c.likelihood = Some(Likelihood::Gaussian { sigma: s.unwrap_or(current) });
            }
            (None, None) => {}
        }
        if flags.max_iters.is_some() || flags.tol.is_some() {
            let em = c.em.get_or_insert_with(EmConfig::default);
            set(&mut em.max_iters, flags.max_iters);
            set(&mut em.rel_tol, flags.tol);
        }
        let gan = family == Family::Gan;
        if !gan && (flags.epochs.is_some() || flags.batch.is_some() || flags.lr.is_some()) {
            let t = c.train.get_or_insert_with(TrainConfig::default);
            set(&mut t.epochs, flags.epochs);
            set(&mut t.batch, flags.batch);
            set(&mut t.adam.lr, flags.lr);
        }
        if gan && flags.epochs.is_some() {
            return Err(CliError::usage("fit gan: use --steps-gan instead of --epochs"));
        }
        if gan && (flags.steps_gan.is_some() || flags.gen_loss.is_some() || flags.batch.is_some() || flags.lr.is_some()) {
            let g = c.gan.get_or_insert_with(GanConfig::default);
            set(&mut g.steps, flags.steps_gan);
            set(&mut g.batch, flags.batch);
            if let Some(lr) = flags.lr {
                g.gen_adam.lr = lr;
                g.disc_adam.lr = lr;
            }
            if let Some(l) = flags.gen_loss.as_deref() {
                g.loss = if l == "minimax" { GenLoss::Minimax } else { GenLoss::NonSaturating };
            }
        }
        Ok(c)
    }

    /// EM settings with the run seed.
    pub fn em_config(&mut self, default: EmConfig) -> EmConfig {
        let mut em = self.em.clone().unwrap_or(default);
        em.seed = self.seed;
        self.em = Some(em.clone());
        em
    }

    pub fn train_config(&mut self) -> TrainConfig {
        *self.train.get_or_insert_with(TrainConfig::default)
    }

    pub fn hidden(&mut self, default: &[usize]) -> Vec<usize> {
        self.hidden.get_or_insert_with(|| default.to_vec()).clone()
    }

    pub fn required(value: Option<usize>, flag: &str, family: &str) -> CliResult<usize> {
        match value {
            Some(0) => Err(CliError::usage(format!("fit {family}: --{flag} must be positive"))),
            Some(v) => Ok(v),
            None => Err(CliError::usage(format!("fit {family}: --{flag} is required"))),
        }
    }
}

fn default_sigma() -> f64 {
    match Likelihood::default() {
        Likelihood::Gaussian { sigma } => sigma,
        Likelihood::Bernoulli => 0.1,
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

trait SetOpt<T> {
    fn apply(&mut self, v: Option<T>);
}

impl<T> SetOpt<T> for Option<T> {
    fn apply(&mut self, v: Option<T>) {
        if v.is_some() {
            *self = v;
        }
    }
}
