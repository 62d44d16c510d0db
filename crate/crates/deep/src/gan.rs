//! Generative adversarial network for low-dimensional synthetic data.
//!
//! A GAN defines a sampler only; there is deliberately no likelihood method.

use latentlab_core::{Mat, RandomSource};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Mlp, Parameters, Tape, Tensor, Var};

/// Discriminator outputs are clamped to `[CLAMP, 1 - CLAMP]` before any log.
pub const CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenLoss {
    /// `-mean log D(G(z))`.
    #[default]
    NonSaturating,
    /// `mean log(1 - D(G(z)))`, the generator's side of the minimax objective.
    Minimax,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanModel {
    pub gen: Mlp,
    /// Ends in a sigmoid unit.
    pub disc: Mlp,
    pub prior_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanConfig {
    /// Generator updates.
    pub steps: usize,
    pub batch: usize,
    /// Discriminator updates per generator update.
    pub k_disc: usize,
    pub loss: GenLoss,
    pub gen_adam: AdamConfig,
    pub disc_adam: AdamConfig,
    /// Leave the generator untouched and train only the discriminator.
    pub freeze_generator: bool,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 64,
            k_disc: 1,
            loss: GenLoss::NonSaturating,
            gen_adam: AdamConfig::default(),
            disc_adam: AdamConfig::default(),
            freeze_generator: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GanTrace {
    /// Discriminator loss of the last discriminator update in each step.
    pub disc: Vec<f64>,
    pub gen: Vec<f64>,
}

impl GanModel {
    /// Generator `[prior_dim, gen_hidden.., data_dim]` (tanh hidden, linear out)
    /// and discriminator `[data_dim, disc_hidden.., 1]` (tanh hidden, sigmoid out).
    pub fn new(
        prior_dim: usize,
        data_dim: usize,
        gen_hidden: &[usize],
        disc_hidden: &[usize],
        rng: &mut RandomSource,
    ) -> Result<Self> {
        let g: Vec<usize> = [&[prior_dim][..], gen_hidden, &[data_dim]].concat();
        let d: Vec<usize> = [&[data_dim][..], disc_hidden, &[1]].concat();
        let gen = Mlp::new(&g, Activation::Tanh, Activation::Identity, rng)?;
        let disc = Mlp::new(&d, Activation::Tanh, Activation::Sigmoid, rng)?;
        Self::from_parts(gen, disc)
    }

    pub fn from_parts(gen: Mlp, disc: Mlp) -> Result<Self> {
        if gen.output_dim() != disc.input_dim() {
            return Err(shape_err(format!(
                "generator emits {} dims, discriminator reads {}",
                gen.output_dim(),
                disc.input_dim()
            )));
        }
        if disc.output_dim() != 1 || disc.layers.last().map(|l| l.act) != Some(Activation::Sigmoid) {
            return Err(Error::InvalidParameter("discriminator must end in one sigmoid unit".into()));
        }
        if gen.input_dim() == 0 {
            return Err(Error::InvalidParameter("prior dimension must be positive".into()));
        }
        Ok(Self { prior_dim: gen.input_dim(), gen, disc })
    }

    pub fn data_dim(&self) -> usize {
        self.gen.output_dim()
    }

    pub fn generate(&self, z: &Mat) -> Result<Mat> {
        self.gen.forward(&Tensor::from_mat(z))?.to_mat()
    }

    pub fn sample(&self, n: usize, rng: &mut RandomSource) -> Result<Mat> {
        self.generate(&self.prior(n, rng))
    }

    pub fn prior(&self, n: usize, rng: &mut RandomSource) -> Mat {
        Mat::from_fn(n, self.prior_dim, |_, _| rng.normal())
    }

    /// Clamped discriminator outputs.
    pub fn discriminate(&self, x: &Mat) -> Result<Vec<f64>> {
        let out = self.disc.forward(&Tensor::from_mat(x))?;
        Ok(out.as_slice().iter().map(|p| p.clamp(CLAMP, 1.0 - CLAMP)).collect())
    }

    fn check_batch(&self, x: &Mat, cols: usize, what: &str) -> Result<()> {
        if x.rows() == 0 {
            return Err(Error::InvalidData(format!("empty {what} batch")));
        }
        if x.cols() != cols {
            return Err(shape_err(format!("{what} batch has {} columns, expected {cols}", x.cols())));
        }
        Ok(())
    }

    /// `log D` and `log(1 - D)` per row, clamped.
    fn log_d(&self, tape: &mut Tape, disc_vars: &[Var], x: Var) -> (Var, Var) {
        let d = self.disc.forward_on(tape, disc_vars, x);
        let d = tape.clamp(d, CLAMP, 1.0 - CLAMP);
        let log_d = tape.log(d);
        let neg = tape.scale(d, -1.0);
        let one_minus = tape.shift(neg, 1.0);
        (log_d, tape.log(one_minus))
    }

    fn disc_loss_on(&self, tape: &mut Tape, disc_vars: &[Var], real: Var, fake: Var) -> Var {
        let (lr, _) = self.log_d(tape, disc_vars, real);
        let (_, lf) = self.log_d(tape, disc_vars, fake);
        let a = tape.mean(lr);
        let b = tape.mean(lf);
        let s = tape.add(a, b);
        tape.scale(s, -1.0)
    }

    fn gen_loss_on(&self, tape: &mut Tape, gen_vars: &[Var], disc_vars: &[Var], z: Var, kind: GenLoss) -> Var {
        let fake = self.gen.forward_on(tape, gen_vars, z);
        let (ld, l1m) = self.log_d(tape, disc_vars, fake);
        match kind {
            GenLoss::NonSaturating => {
                let m = tape.mean(ld);
                tape.scale(m, -1.0)
            }
            GenLoss::Minimax => tape.mean(l1m),
        }
    }

    /// `-(mean log D(real) + mean log(1 - D(fake)))`.
    pub fn disc_loss(&self, real: &Mat, fake: &Mat) -> Result<f64> {
        Ok(self.disc_loss_gradient(real, fake)?.0)
    }

    /// Discriminator loss and its gradient with respect to the discriminator.
    pub fn disc_loss_gradient(&self, real: &Mat, fake: &Mat) -> Result<(f64, Vec<Tensor>)> {
        self.check_batch(real, self.data_dim(), "real")?;
        self.check_batch(fake, self.data_dim(), "fake")?;
        let mut tape = Tape::new();
        let dv = self.disc.bind(&mut tape);
        let r = tape.leaf(Tensor::from_mat(real));
        let f = tape.leaf(Tensor::from_mat(fake));
        let loss = self.disc_loss_on(&mut tape, &dv, r, f);
        tape.backward(loss)?;
        Ok((tape.value(loss).item(), dv.iter().map(|&v| tape.grad_or_zeros(v)).collect()))
    }

    /// Generator loss on already generated samples.
    pub fn gen_loss(&self, fake: &Mat, kind: GenLoss) -> Result<f64> {
        self.check_batch(fake, self.data_dim(), "fake")?;
        let d = self.discriminate(fake)?;
        let n = d.len() as f64;
        Ok(match kind {
            GenLoss::NonSaturating => -d.iter().map(|p| p.ln()).sum::<f64>() / n,
            GenLoss::Minimax => d.iter().map(|p| (1.0 - p).ln()).sum::<f64>() / n,
        })
    }

    /// Generator loss at prior draws `z` and its gradient with respect to the generator.
    pub fn gen_loss_gradient(&self, z: &Mat, kind: GenLoss) -> Result<(f64, Vec<Tensor>)> {
        self.check_batch(z, self.prior_dim, "prior")?;
        let mut tape = Tape::new();
        let gv = self.gen.bind(&mut tape);
        let dv = self.disc.bind(&mut tape);
        let zv = tape.leaf(Tensor::from_mat(z));
        let loss = self.gen_loss_on(&mut tape, &gv, &dv, zv, kind);
        tape.backward(loss)?;
        Ok((tape.value(loss).item(), gv.iter().map(|&v| tape.grad_or_zeros(v)).collect()))
    }

    /// Alternating updates: `k_disc` discriminator steps, then one generator step.
    pub fn train(&mut self, data: &Mat, cfg: &GanConfig, rng: &mut RandomSource) -> Result<GanTrace> {
        if cfg.batch == 0 || cfg.k_disc == 0 {
            return Err(Error::InvalidParameter("batch and k_disc must be positive".into()));
        }
        cfg.gen_adam.validate()?;
        cfg.disc_adam.validate()?;
        self.check_batch(data, self.data_dim(), "training")?;
        let mut gopt = Adam::new(cfg.gen_adam, &self.gen.params());
        let mut dopt = Adam::new(cfg.disc_adam, &self.disc.params());
        let mut trace = GanTrace::default();
        let mut tape = Tape::new();
        for step in 0..cfg.steps {
            let mut dl = 0.0;
            for _ in 0..cfg.k_disc {
                let idx: Vec<usize> = (0..cfg.batch).map(|_| rng.below(data.rows())).collect();
                let real = Tensor::from_fn(cfg.batch, data.cols(), |i, j| data[(idx[i], j)]);
                let fake = self.gen.forward(&Tensor::from_mat(&self.prior(cfg.batch, rng)))?;
                tape.reset();
                let dv = self.disc.bind(&mut tape);
                let r = tape.leaf(real);
                let f = tape.leaf(fake);
                let loss = self.disc_loss_on(&mut tape, &dv, r, f);
                dl = tape.value(loss).item();
                if !dl.is_finite() {
                    return Err(Error::Diverged { epoch: step, what: "discriminator loss".into() });
                }
                tape.backward(loss)?;
                crate::nn::apply_grads(&mut self.disc, &mut dopt, &tape, &dv);
            }
            let z = self.prior(cfg.batch, rng);
            tape.reset();
            let gv = self.gen.bind(&mut tape);
            let dv = self.disc.bind(&mut tape);
            let zv = tape.leaf(Tensor::from_mat(&z));
            let loss = self.gen_loss_on(&mut tape, &gv, &dv, zv, cfg.loss);
            let gl = tape.value(loss).item();
            if !gl.is_finite() {
                return Err(Error::Diverged { epoch: step, what: "generator loss".into() });
            }
            if !cfg.freeze_generator {
                tape.backward(loss)?;
                crate::nn::apply_grads(&mut self.gen, &mut gopt, &tape, &gv);
            }
            trace.disc.push(dl);
            trace.gen.push(gl);
        }
        Ok(trace)
    }
}

impl Parameters for GanModel {
    fn params(&self) -> Vec<&Tensor> {
        let mut p = self.gen.params();
        p.extend(self.disc.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.gen.params_mut();
        p.extend(self.disc.params_mut());
        p
    }
}
