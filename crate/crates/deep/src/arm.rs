//! Autoregressive model over fixed-length discrete sequences, parameterized by a
//! masked feed-forward network so that position `d` only sees `x_{<d}`.

use latentlab_core::{par, RandomSource};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{minibatches, Activation, Adam, Mlp, Parameters, Tape, Tensor, TrainConfig, Var};

/// Stand-in for `-inf` in reported log-probabilities.
pub const NEG_LOG_SENTINEL: f64 = -1e30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArModel {
    pub seq_len: usize,
    pub vocab: usize,
    /// One-hot input of width `seq_len * vocab` to logits of the same width.
    pub net: Mlp,
}

/// Degree of hidden unit `h`: which prefix length it may summarize.
fn hidden_degree(h: usize, seq_len: usize) -> usize {
    if seq_len < 2 {
        seq_len
    } else {
        1 + h % (seq_len - 1)
    }
}

fn sentinel(v: f64) -> f64 {
    if v.is_nan() || v < NEG_LOG_SENTINEL {
        NEG_LOG_SENTINEL
    } else {
        v
    }
}

impl ArModel {
    /// Masked network with tanh hidden layers of the given widths.
    pub fn new(seq_len: usize, vocab: usize, hidden: &[usize], rng: &mut RandomSource) -> Result<Self> {
        if seq_len == 0 || vocab < 2 {
            return Err(Error::InvalidParameter(format!("sequence length {seq_len} and vocabulary {vocab}")));
        }
        let width = seq_len * vocab;
        let dims: Vec<usize> = [&[width][..], hidden, &[width]].concat();
        let net = Mlp::new(&dims, Activation::Tanh, Activation::Identity, rng)?;
        // degrees: input/output unit i belongs to position i / vocab + 1
        let pos = |i: usize| i / vocab + 1;
        let mut degrees: Vec<usize> = (0..width).map(pos).collect();
        let mut masks = Vec::new();
        for &h in hidden {
            let next: Vec<usize> = (0..h).map(|k| hidden_degree(k, seq_len)).collect();
            masks.push(Tensor::from_fn(degrees.len(), h, |i, k| f64::from(u8::from(next[k] >= degrees[i]))));
            degrees = next;
        }
        masks.push(Tensor::from_fn(degrees.len(), width, |i, k| f64::from(u8::from(pos(k) > degrees[i]))));
        let net = net.with_masks(masks)?;
        Self::from_parts(seq_len, vocab, net)
    }

    pub fn from_parts(seq_len: usize, vocab: usize, net: Mlp) -> Result<Self> {
        let width = seq_len * vocab;
        if net.input_dim() != width || net.output_dim() != width {
            return Err(shape_err(format!("network must map {width} -> {width}")));
        }
        Ok(Self { seq_len, vocab, net })
    }

    fn check(&self, x: &[usize]) -> Result<()> {
        if x.len() != self.seq_len {
            return Err(shape_err(format!("sequence of length {}, model expects {}", x.len(), self.seq_len)));
        }
        if let Some(d) = x.iter().position(|&v| v >= self.vocab) {
            return Err(Error::InvalidData(format!("symbol {} at position {d} outside 0..{}", x[d], self.vocab)));
        }
        Ok(())
    }

    fn one_hot(&self, seqs: &[&[usize]]) -> Tensor {
        let mut t = Tensor::zeros(seqs.len(), self.seq_len * self.vocab);
        for (i, s) in seqs.iter().enumerate() {
            for (d, &v) in s.iter().enumerate() {
                t[(i, d * self.vocab + v)] = 1.0;
            }
        }
        t
    }

    /// Raw logits, `seq_len` blocks of `vocab` values.
    pub fn logits(&self, x: &[usize]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(self.net.forward(&self.one_hot(&[x]))?.as_slice().to_vec())
    }

    /// `p(x_d = . | x_{<d})`; entries of `x` at or after `d` are ignored.
    pub fn conditional(&self, x: &[usize], d: usize) -> Result<Vec<f64>> {
        self.check(x)?;
        if d >= self.seq_len {
            return Err(Error::InvalidParameter(format!("position {d} outside 0..{}", self.seq_len)));
        }
        let logits = self.logits(x)?;
        let block = &logits[d * self.vocab..(d + 1) * self.vocab];
        let m = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = block.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        Ok(w.into_iter().map(|v| v / z).collect())
    }

    /// Exact `sum_d log p(x_d | x_{<d})`, with `-inf` reported as the sentinel.
    pub fn log_likelihood(&self, x: &[usize]) -> Result<f64> {
        let logits = self.logits(x)?;
        let mut total = 0.0;
        for (d, &v) in x.iter().enumerate() {
            let block = &logits[d * self.vocab..(d + 1) * self.vocab];
            let m = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + block.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            total += block[v] - lse;
        }
        Ok(sentinel(total))
    }

    pub fn pointwise_loglik(&self, seqs: &[Vec<usize>]) -> Result<Vec<f64>> {
        par::try_map_slice(seqs, |s| self.log_likelihood(s))
    }

    fn mean_loglik_on(&self, tape: &mut Tape, vars: &[Var], seqs: &[&[usize]]) -> Var {
        let x = tape.leaf(self.one_hot(seqs));
        let logits = self.net.forward_on(tape, vars, x);
        let lsm = tape.log_softmax(logits, self.vocab);
        let idx: Vec<usize> =
            seqs.iter().flat_map(|s| s.iter().enumerate().map(|(d, &v)| d * self.vocab + v)).collect();
        let picked = tape.gather(lsm, &idx);
        let per = tape.row_sum(picked);
        tape.mean(per)
    }

    /// Mean log-likelihood under teacher forcing and its gradient.
    pub fn loglik_gradient(&self, seqs: &[Vec<usize>]) -> Result<(f64, Vec<Tensor>)> {
        self.check_all(seqs)?;
        let refs: Vec<&[usize]> = seqs.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let ll = self.mean_loglik_on(&mut tape, &vars, &refs);
        tape.backward(ll)?;
        Ok((tape.value(ll).item(), vars.iter().map(|&v| tape.grad_or_zeros(v)).collect()))
    }

    fn check_all(&self, seqs: &[Vec<usize>]) -> Result<()> {
        if seqs.is_empty() {
            return Err(Error::InvalidData("no sequences".into()));
        }
        for (i, s) in seqs.iter().enumerate() {
            self.check(s).map_err(|e| Error::InvalidData(format!("sequence {i}: {e}")))?;
        }
        Ok(())
    }

    /// Teacher-forced maximum likelihood. Returns each epoch's mean log-likelihood.
    pub fn train(&mut self, seqs: &[Vec<usize>], cfg: &TrainConfig, rng: &mut RandomSource) -> Result<Vec<f64>> {
        cfg.validate()?;
        self.check_all(seqs)?;
        let mut opt = Adam::new(cfg.adam, &self.params());
        let mut tape = Tape::new();
        let mut trace = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let mut total = 0.0;
            for idx in minibatches(seqs.len(), cfg.batch, rng) {
                let batch: Vec<&[usize]> = idx.iter().map(|&i| seqs[i].as_slice()).collect();
                tape.reset();
                let vars = self.bind(&mut tape);
                let ll = self.mean_loglik_on(&mut tape, &vars, &batch);
                let value = tape.value(ll).item();
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, what: "log-likelihood".into() });
                }
                total += value * idx.len() as f64;
                let loss = tape.scale(ll, -1.0);
                tape.backward(loss)?;
                crate::nn::apply_grads(self, &mut opt, &tape, &vars);
            }
            trace.push(total / seqs.len() as f64);
        }
        Ok(trace)
    }

    /// Left-to-right ancestral sampling; sequences are drawn in parallel from
    /// per-sequence child streams.
    pub fn sample(&self, n: usize, rng: &mut RandomSource) -> Result<Vec<Vec<usize>>> {
        let streams = rng.split(n);
        par::try_map_slice(&streams, |r| {
            let mut r = r.clone();
            let mut x = vec![0; self.seq_len];
            for d in 0..self.seq_len {
                let p = self.conditional(&x, d)?;
                let u = r.uniform();
                let mut acc = 0.0;
                let mut pick = p.iter().rposition(|&v| v > 0.0).unwrap_or(0);
                for (v, &pv) in p.iter().enumerate() {
                    acc += pv;
                    if u < acc {
                        pick = v;
                        break;
                    }
                }
                x[d] = pick;
            }
            Ok(x)
        })
    }
}

impl Parameters for ArModel {
    fn params(&self) -> Vec<&Tensor> {
        self.net.params()
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.params_mut()
    }
}
