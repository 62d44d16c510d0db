//! Variational autoencoder with a diagonal Gaussian encoder and a reparameterized
//! single-sample ELBO.

use latentlab_core::{Mat, RandomSource};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{minibatches, Activation, Adam, Mlp, Parameters, Tape, Tensor, TrainConfig, Var};

/// Encoder standard deviations are clamped to `[1e-4, 1e4]`, i.e. the
/// log-variance head to `[2 ln 1e-4, 2 ln 1e4]`.
pub const SIGMA_MIN: f64 = 1e-4;
pub const SIGMA_MAX: f64 = 1e4;

fn logvar_bounds() -> (f64, f64) {
    (2.0 * SIGMA_MIN.ln(), 2.0 * SIGMA_MAX.ln())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Likelihood {
    /// `x | z ~ N(f(z), sigma^2 I)` with fixed `sigma`.
    Gaussian { sigma: f64 },
    /// `x_j | z ~ Bernoulli(sigmoid(f_j(z)))`.
    Bernoulli,
}

impl Default for Likelihood {
    fn default() -> Self {
        Likelihood::Gaussian { sigma: 0.1 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboParts {
    pub recon: f64,
    pub kl: f64,
    pub elbo: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    /// Outputs `(mu, log sigma^2)` stacked as `2 * latent_dim` columns.
    pub encoder: Mlp,
    /// Outputs Gaussian means or Bernoulli logits.
    pub decoder: Mlp,
    pub latent_dim: usize,
    pub likelihood: Likelihood,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeTrainOptions {
    /// Train the encoder only.
    pub freeze_decoder: bool,
}

/// `z = mu + sigma * eps` with `eps ~ N(0, I)`.
pub fn reparameterize(mu: &[f64], sigma: &[f64], rng: &mut RandomSource) -> Vec<f64> {
    assert_eq!(mu.len(), sigma.len(), "reparameterize: mu and sigma differ in length");
    mu.iter().zip(sigma).map(|(m, s)| m + s * rng.normal()).collect()
}

/// `KL(N(mu, diag sigma^2) || N(0, I)) = 1/2 sum(sigma^2 + mu^2 - 1 - ln sigma^2)`.
pub fn kl_to_standard(mu: &[f64], sigma: &[f64]) -> f64 {
    0.5 * mu.iter().zip(sigma).map(|(m, s)| s * s + m * m - 1.0 - (s * s).ln()).sum::<f64>()
}

struct ObjectiveVars {
    elbo: Var,
    recon: Var,
    kl: Var,
}

impl VaeModel {
    /// Encoder `[data_dim, hidden.., 2 latent_dim]` and decoder
    /// `[latent_dim, hidden.., data_dim]` with tanh hidden units.
    pub fn new(
        data_dim: usize,
        latent_dim: usize,
        hidden: &[usize],
        likelihood: Likelihood,
        rng: &mut RandomSource,
    ) -> Result<Self> {
        if data_dim == 0 || latent_dim == 0 {
            return Err(Error::InvalidParameter("data and latent dims must be positive".into()));
        }
        let enc_dims: Vec<usize> = [&[data_dim][..], hidden, &[2 * latent_dim]].concat();
        let dec_dims: Vec<usize> = [&[latent_dim][..], hidden, &[data_dim]].concat();
        let encoder = Mlp::new(&enc_dims, Activation::Tanh, Activation::Identity, rng)?;
        let decoder = Mlp::new(&dec_dims, Activation::Tanh, Activation::Identity, rng)?;
        Self::from_parts(encoder, decoder, likelihood)
    }

    pub fn from_parts(encoder: Mlp, decoder: Mlp, likelihood: Likelihood) -> Result<Self> {
        let latent_dim = decoder.input_dim();
        if encoder.output_dim() != 2 * latent_dim {
            return Err(shape_err(format!(
                "encoder emits {} values, expected 2 x latent dim {latent_dim}",
                encoder.output_dim()
            )));
        }
        if encoder.input_dim() != decoder.output_dim() {
            return Err(shape_err(format!(
                "encoder reads {} dims, decoder emits {}",
                encoder.input_dim(),
                decoder.output_dim()
            )));
        }
        if let Likelihood::Gaussian { sigma } = likelihood {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::InvalidParameter(format!("decoder sigma {sigma}")));
            }
        }
        Ok(Self { encoder, decoder, latent_dim, likelihood })
    }

    pub fn data_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    fn check_data(&self, x: &Mat) -> Result<()> {
        if x.cols() != self.data_dim() {
            return Err(shape_err(format!("data has {} columns, model expects {}", x.cols(), self.data_dim())));
        }
        if self.likelihood == Likelihood::Bernoulli && x.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData("bernoulli likelihood needs values in [0, 1]".into()));
        }
        Ok(())
    }

    /// Posterior means and standard deviations, one row per observation.
    pub fn encode(&self, x: &Mat) -> Result<(Mat, Mat)> {
        self.check_data(x)?;
        let h = self.encoder.forward(&Tensor::from_mat(x))?;
        let d = self.latent_dim;
        let (lo, hi) = logvar_bounds();
        let mu = Mat::from_fn(x.rows(), d, |i, j| h[(i, j)]);
        let sigma = Mat::from_fn(x.rows(), d, |i, j| (0.5 * h[(i, d + j)].clamp(lo, hi)).exp());
        if !mu.is_finite() {
            return Err(Error::InvalidData("encoder produced non-finite means".into()));
        }
        Ok((mu, sigma))
    }

    /// Decoder means (Gaussian) or success probabilities (Bernoulli).
    pub fn decode(&self, z: &Mat) -> Result<Mat> {
        let out = self.decoder.forward(&Tensor::from_mat(z))?;
        let out = match self.likelihood {
            Likelihood::Gaussian { .. } => out,
            Likelihood::Bernoulli => out.map(latentlab_core::prob::sigmoid),
        };
        out.to_mat()
    }

    /// Decodes the posterior mean of each row.
    pub fn reconstruct(&self, x: &Mat) -> Result<Mat> {
        let (mu, _) = self.encode(x)?;
        self.decode(&mu)
    }

    fn objective_on(&self, tape: &mut Tape, vars: &[Var], x: &Tensor, eps: &Tensor) -> ObjectiveVars {
        let n_enc = self.encoder.params().len();
        let d = self.latent_dim;
        let (lo, hi) = logvar_bounds();
        let xv = tape.leaf(x.clone());
        let h = self.encoder.forward_on(tape, &vars[..n_enc], xv);
        let mu = tape.select_cols(h, &(0..d).collect::<Vec<_>>());
        let raw = tape.select_cols(h, &(d..2 * d).collect::<Vec<_>>());
        let logvar = tape.clamp(raw, lo, hi);
        let half = tape.scale(logvar, 0.5);
        let sigma = tape.exp(half);
        let e = tape.leaf(eps.clone());
        let noise = tape.mul(sigma, e);
        let z = tape.add(mu, noise);
        let out = self.decoder.forward_on(tape, &vars[n_enc..], z);
        let recon = match self.likelihood {
            Likelihood::Gaussian { sigma } => {
                let lv = tape.leaf(Tensor::scalar(2.0 * sigma.ln()));
                tape.gaussian_logpdf(xv, out, lv)
            }
            Likelihood::Bernoulli => {
                let xl = tape.mul(xv, out);
                let sp = tape.softplus(out);
                let t = tape.sub(xl, sp);
                tape.row_sum(t)
            }
        };
        let var = tape.exp(logvar);
        let mu2 = tape.square(mu);
        let k = tape.add(var, mu2);
        let k = tape.sub(k, logvar);
        let k = tape.shift(k, -1.0);
        let k = tape.row_sum(k);
        let kl = tape.scale(k, 0.5);
        let per = tape.sub(recon, kl);
        ObjectiveVars { elbo: tape.mean(per), recon: tape.mean(recon), kl: tape.mean(kl) }
    }

    /// Mean ELBO over the rows of `x` with the given standard-normal noise
    /// (`x.rows() x latent_dim`). Deterministic; used for gradient checks.
    pub fn elbo_with_noise(&self, x: &Mat, eps: &Mat) -> Result<ElboParts> {
        self.check_data(x)?;
        if eps.shape() != (x.rows(), self.latent_dim) {
            return Err(shape_err(format!("noise is {:?}, expected ({}, {})", eps.shape(), x.rows(), self.latent_dim)));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let o = self.objective_on(&mut tape, &vars, &Tensor::from_mat(x), &Tensor::from_mat(eps));
        Ok(ElboParts {
            recon: tape.value(o.recon).item(),
            kl: tape.value(o.kl).item(),
            elbo: tape.value(o.elbo).item(),
        })
    }

    /// Gradient of [`VaeModel::elbo_with_noise`] with respect to every
    /// parameter, in [`Parameters::params`] order.
    pub fn elbo_gradient(&self, x: &Mat, eps: &Mat) -> Result<Vec<Tensor>> {
        self.check_data(x)?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let o = self.objective_on(&mut tape, &vars, &Tensor::from_mat(x), &Tensor::from_mat(eps));
        tape.backward(o.elbo)?;
        Ok(vars.iter().map(|&v| tape.grad_or_zeros(v)).collect())
    }

    /// Single-sample ELBO estimate for one observation.
    pub fn elbo(&self, x: &[f64], rng: &mut RandomSource) -> Result<ElboParts> {
        self.elbo_n(x, 1, rng)
    }

    /// ELBO with the reconstruction term averaged over `n_samples` draws; the
    /// KL term is analytic.
    pub fn elbo_n(&self, x: &[f64], n_samples: usize, rng: &mut RandomSource) -> Result<ElboParts> {
        if n_samples == 0 {
            return Err(Error::InvalidParameter("need at least one sample".into()));
        }
        let xs = Mat::from_fn(n_samples, x.len(), |_, j| x[j]);
        let eps = Mat::from_fn(n_samples, self.latent_dim, |_, _| rng.normal());
        self.elbo_with_noise(&xs, &eps)
    }

    /// Per-row ELBO estimates with `n_samples` draws each.
    pub fn pointwise_elbo(&self, data: &Mat, n_samples: usize, rng: &mut RandomSource) -> Result<Vec<f64>> {
        self.check_data(data)?;
        data.row_iter().map(|x| Ok(self.elbo_n(x, n_samples, rng)?.elbo)).collect()
    }

    /// Minibatch Adam ascent on the ELBO. Returns the mean ELBO of each epoch.
    pub fn train(&mut self, data: &Mat, cfg: &TrainConfig, rng: &mut RandomSource) -> Result<Vec<f64>> {
        self.train_with(data, cfg, VaeTrainOptions::default(), rng)
    }

    pub fn train_with(
        &mut self,
        data: &Mat,
        cfg: &TrainConfig,
        opts: VaeTrainOptions,
        rng: &mut RandomSource,
    ) -> Result<Vec<f64>> {
        cfg.validate()?;
        self.check_data(data)?;
        if data.rows() == 0 {
            return Err(Error::InvalidData("no training rows".into()));
        }
        let x_all = Tensor::from_mat(data);
        let n_enc = self.encoder.params().len();
        let n_train = if opts.freeze_decoder { n_enc } else { self.params().len() };
        let mut opt = Adam::new(cfg.adam, &self.params()[..n_train]);
        let mut trace = Vec::with_capacity(cfg.epochs);
        let mut tape = Tape::new();
        for epoch in 0..cfg.epochs {
            let mut total = 0.0;
            for idx in minibatches(data.rows(), cfg.batch, rng) {
                let x = x_all.select_rows(&idx);
                let eps = Tensor::from_fn(idx.len(), self.latent_dim, |_, _| rng.normal());
                tape.reset();
                let vars = self.bind(&mut tape);
                let o = self.objective_on(&mut tape, &vars, &x, &eps);
                let value = tape.value(o.elbo).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, what: "ELBO".into() });
                }
                total += value * idx.len() as f64;
                let loss = tape.scale(o.elbo, -1.0);
                tape.backward(loss)?;
                let grads: Vec<Tensor> = vars[..n_train].iter().map(|&v| tape.grad_or_zeros(v)).collect();
                let params: Vec<&mut Tensor> = self.params_mut().into_iter().take(n_train).collect();
                opt.step(params, &grads);
            }
            trace.push(total / data.rows() as f64);
        }
        Ok(trace)
    }

    /// Ancestral samples `z ~ N(0, I)`, `x ~ p(x | z)`. For the Bernoulli
    /// likelihood `binary = false` returns the probabilities themselves.
    pub fn sample(&self, n: usize, binary: bool, rng: &mut RandomSource) -> Result<Mat> {
        let z = Mat::from_fn(n, self.latent_dim, |_, _| rng.normal());
        let mean = self.decode(&z)?;
        Ok(match self.likelihood {
            Likelihood::Gaussian { sigma } => Mat::from_fn(n, mean.cols(), |i, j| mean[(i, j)] + sigma * rng.normal()),
            Likelihood::Bernoulli if binary => {
                Mat::from_fn(n, mean.cols(), |i, j| f64::from(u8::from(rng.uniform() < mean[(i, j)])))
            }
            Likelihood::Bernoulli => mean,
        })
    }
}

impl Parameters for VaeModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }
}
