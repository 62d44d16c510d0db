use serde::{Deserialize, Serialize};

use super::{pooled_rows, Sequence};
use crate::em::{run_em, EmConfig, EmProblem, FitReport};
use crate::error::{shape_err, Error, Result};
use crate::linalg::{column_means, scatter, sub_vec, Mat};
use crate::mixture::{covariance_floor, farthest_point_rows, EMPTY_COMPONENT};
use crate::par;
use crate::prob::{log_sum_exp_unchecked, logpdf_with_factor, sample_categorical, sample_gaussian, Gaussian, Simplex};
use crate::rng::RandomSource;

/// Discrete emission probabilities are floored at this value and renormalized.
pub const EMISSION_FLOOR: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "states", rename_all = "lowercase")]
pub enum Emission {
    /// One distribution over symbols per state.
    Discrete(Vec<Simplex>),
    /// One Gaussian per state.
    Gaussian(Vec<Gaussian>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmissionKind {
    Discrete,
    Gaussian,
}

impl Emission {
    pub fn n_states(&self) -> usize {
        match self {
            Emission::Discrete(b) => b.len(),
            Emission::Gaussian(g) => g.len(),
        }
    }

    pub fn kind(&self) -> EmissionKind {
        match self {
            Emission::Discrete(_) => EmissionKind::Discrete,
            Emission::Gaussian(_) => EmissionKind::Gaussian,
        }
    }

    /// `T x K` matrix of `log p(x_t | z_t = k)`.
    pub fn log_likelihoods(&self, seq: &Sequence) -> Result<Mat> {
        let k = self.n_states();
        match self {
            Emission::Discrete(b) => {
                let s = seq.as_discrete()?;
                let m = b[0].len();
                if let Some((t, &x)) = s.iter().enumerate().find(|(_, &x)| x >= m) {
                    return Err(Error::InvalidData(format!("step {t}: symbol {x} outside alphabet of size {m}")));
                }
                Ok(Mat::from_fn(s.len(), k, |t, j| b[j].probs()[s[t]].ln()))
            }
            Emission::Gaussian(g) => {
                let x = seq.as_continuous()?;
                let d = g[0].dim();
                if x.cols() != d {
                    return Err(shape_err(format!("observations have {} columns, emissions are {d}-d", x.cols())));
                }
                let chols: Vec<_> = g.iter().map(|e| e.cov.cholesky()).collect::<Result<_>>()?;
                Ok(Mat::from_fn(x.rows(), k, |t, j| logpdf_with_factor(x.row(t), &g[j].mean, &chols[j])))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmmParams {
    /// Initial state distribution.
    pub pi: Simplex,
    /// `trans[(i, j)] = p(z_t = j | z_{t-1} = i)`.
    pub trans: Mat,
    pub emit: Emission,
}

impl HmmParams {
    pub fn new(pi: Simplex, trans: Mat, emit: Emission) -> Result<Self> {
        let k = pi.len();
        if trans.shape() != (k, k) || emit.n_states() != k {
            return Err(shape_err(format!(
                "{k} initial probabilities, {}x{} transitions, {} emission states",
                trans.rows(),
                trans.cols(),
                emit.n_states()
            )));
        }
        for i in 0..k {
            Simplex::new(trans.row(i).to_vec()).map_err(|e| Error::InvalidParameter(format!("transition row {i}: {e}")))?;
        }
        match &emit {
            Emission::Discrete(b) => {
                if b.iter().any(|s| s.len() != b[0].len()) {
                    return Err(shape_err("emission alphabets differ between states"));
                }
            }
            Emission::Gaussian(g) => {
                if g.iter().any(|e| e.dim() != g[0].dim()) {
                    return Err(shape_err("emission dimensions differ between states"));
                }
            }
        }
        Ok(Self { pi, trans, emit })
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    /// Relabels states: new state `i` is old state `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let pi: Vec<f64> = perm.iter().map(|&k| self.pi.probs()[k]).collect();
        let trans = Mat::from_fn(perm.len(), perm.len(), |i, j| self.trans[(perm[i], perm[j])]);
        let emit = match &self.emit {
            Emission::Discrete(b) => Emission::Discrete(perm.iter().map(|&k| b[k].clone()).collect()),
            Emission::Gaussian(g) => Emission::Gaussian(perm.iter().map(|&k| g[k].clone()).collect()),
        };
        Self { pi: Simplex::new(pi).expect("permuted pi"), trans, emit }
    }

    /// Canonical state order: ascending emission entropy (discrete) or ascending
    /// emission mean norm (Gaussian); ties keep the current order.
    pub fn canonicalize(&self) -> Self {
        let key: Vec<f64> = match &self.emit {
            Emission::Discrete(b) => b.iter().map(Simplex::entropy).collect(),
            Emission::Gaussian(g) => g.iter().map(|e| crate::linalg::norm(&e.mean)).collect(),
        };
        let mut order: Vec<usize> = (0..self.k()).collect();
        order.sort_by(|&a, &b| key[a].total_cmp(&key[b]).then(a.cmp(&b)));
        self.permuted(&order)
    }
}

/// Exact posterior over the hidden path of one sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HmmPosterior {
    /// `T x K`: `p(z_t = k | x_{1:T})`.
    pub marginals: Mat,
    /// `T - 1` matrices: `pairwise[t][(i, j)] = p(z_t = i, z_{t+1} = j | x_{1:T})`.
    pub pairwise: Vec<Mat>,
    pub loglik: f64,
}

/// Forward-backward in the log domain with per-step normalizers.
pub fn hmm_forward_backward(params: &HmmParams, obs: &Sequence) -> Result<HmmPosterior> {
    if obs.is_empty() {
        return Err(Error::Empty("empty observation sequence".into()));
    }
    let le = params.emit.log_likelihoods(obs)?;
    forward_backward_log(params, &le)
}

fn forward_backward_log(params: &HmmParams, le: &Mat) -> Result<HmmPosterior> {
    let (t_len, k) = le.shape();
    let log_pi: Vec<f64> = params.pi.probs().iter().map(|p| p.ln()).collect();
    let log_a = params.trans.map(f64::ln);

    // alpha[t] holds log p(z_t | x_{1:t}); c[t] = log p(x_t | x_{1:t-1})
    let mut alpha = Mat::zeros(t_len, k);
    let mut c = vec![0.0; t_len];
    let mut buf = vec![0.0; k];
    for t in 0..t_len {
        for j in 0..k {
            let prior = if t == 0 {
                log_pi[j]
            } else {
                for i in 0..k {
                    buf[i] = alpha[(t - 1, i)] + log_a[(i, j)];
                }
                log_sum_exp_unchecked(&buf)
            };
            alpha[(t, j)] = prior + le[(t, j)];
        }
        let ct = log_sum_exp_unchecked(alpha.row(t));
        if !ct.is_finite() {
            return Err(Error::ZeroProbability(format!("observation at step {t} is impossible under every path")));
        }
        c[t] = ct;
        alpha.row_mut(t).iter_mut().for_each(|v| *v -= ct);
    }

    // beta[t] holds log p(x_{t+1:T} | z_t) - sum_{s>t} c[s]
    let mut beta = Mat::zeros(t_len, k);
    for t in (0..t_len.saturating_sub(1)).rev() {
        for i in 0..k {
            for j in 0..k {
                buf[j] = log_a[(i, j)] + le[(t + 1, j)] + beta[(t + 1, j)];
            }
            beta[(t, i)] = log_sum_exp_unchecked(&buf) - c[t + 1];
        }
    }

    let marginals = Mat::from_fn(t_len, k, |t, j| (alpha[(t, j)] + beta[(t, j)]).exp());
    let pairwise = (0..t_len.saturating_sub(1))
        .map(|t| {
            Mat::from_fn(k, k, |i, j| {
                (alpha[(t, i)] + log_a[(i, j)] + le[(t + 1, j)] + beta[(t + 1, j)] - c[t + 1]).exp()
            })
        })
        .collect();
    Ok(HmmPosterior { marginals, pairwise, loglik: c.iter().sum() })
}

pub fn hmm_loglik(params: &HmmParams, obs_set: &[Sequence]) -> Result<f64> {
    Ok(par::try_map_slice(obs_set, |s| hmm_forward_backward(params, s).map(|p| p.loglik))?.iter().sum())
}

/// Draws a state path and observations of length `t_len`.
pub fn hmm_sample(params: &HmmParams, t_len: usize, rng: &mut RandomSource) -> Result<(Sequence, Vec<usize>)> {
    let k = params.k();
    let rows: Vec<Simplex> = (0..k).map(|i| Simplex::new(params.trans.row(i).to_vec())).collect::<Result<_>>()?;
    let mut states = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let z = if t == 0 { sample_categorical(&params.pi, rng) } else { sample_categorical(&rows[states[t - 1]], rng) };
        states.push(z);
    }
    let seq = match &params.emit {
        Emission::Discrete(b) => Sequence::Discrete(states.iter().map(|&z| sample_categorical(&b[z], rng)).collect()),
        Emission::Gaussian(g) => {
            let d = g[0].dim();
            let mut data = Vec::with_capacity(t_len * d);
            for &z in &states {
                data.extend(sample_gaussian(&g[z], rng)?);
            }
            Sequence::Continuous(Mat::from_vec(t_len, d, data)?)
        }
    };
    Ok((seq, states))
}

struct HmmEm<'a> {
    seqs: &'a [Sequence],
    /// Gaussian case: eigenvalue floor and pooled covariance for rescues.
    floor: f64,
    pooled_cov: Option<Mat>,
}

impl HmmEm<'_> {
    fn posteriors(&self, p: &HmmParams) -> Result<Vec<HmmPosterior>> {
        par::try_map_slice(self.seqs, |s| hmm_forward_backward(p, s))
    }
}

impl EmProblem for HmmEm<'_> {
    type Params = HmmParams;
    type Stats = Vec<HmmPosterior>;

    fn e_step(&self, p: &HmmParams) -> Result<Vec<HmmPosterior>> {
        self.posteriors(p)
    }

    fn objective(&self, p: &HmmParams) -> Result<f64> {
        hmm_loglik(p, self.seqs)
    }

    fn e_step_with_objective(&self, p: &HmmParams) -> Result<(Vec<HmmPosterior>, f64)> {
        let post = self.posteriors(p)?;
        let ll = post.iter().map(|q| q.loglik).sum();
        Ok((post, ll))
    }

    fn m_step(&self, post: &Vec<HmmPosterior>, cur: &HmmParams, rescued: &mut Vec<usize>) -> Result<HmmParams> {
        hmm_m_step(self.seqs, post, cur, self.floor, self.pooled_cov.as_ref(), rescued)
    }
}

/// Baum-Welch update from the posteriors of every sequence.
fn hmm_m_step(
    seqs: &[Sequence],
    post: &[HmmPosterior],
    cur: &HmmParams,
    floor: f64,
    pooled_cov: Option<&Mat>,
    rescued: &mut Vec<usize>,
) -> Result<HmmParams> {
    let k = cur.k();
    let mut pi = vec![0.0; k];
    let mut trans_counts = Mat::zeros(k, k);
    let mut occupancy = vec![0.0; k];
    for p in post {
        for (acc, g) in pi.iter_mut().zip(p.marginals.row(0)) {
            *acc += g;
        }
        for xi in &p.pairwise {
            trans_counts.add_assign(xi);
        }
        for t in 0..p.marginals.rows() {
            for (o, g) in occupancy.iter_mut().zip(p.marginals.row(t)) {
                *o += g;
            }
        }
    }
    let pi = Simplex::from_weights(&pi)?;
    let mut trans = Mat::zeros(k, k);
    for i in 0..k {
        let total: f64 = trans_counts.row(i).iter().sum();
        if total > 0.0 {
            for j in 0..k {
                trans[(i, j)] = trans_counts[(i, j)] / total;
            }
            let s = Simplex::from_weights(trans.row(i))?;
            trans.row_mut(i).copy_from_slice(s.probs());
        } else {
            // the state is never left within the data; the row does not affect the likelihood
            trans.row_mut(i).copy_from_slice(cur.trans.row(i));
        }
    }

    let emit = match &cur.emit {
        Emission::Discrete(b) => {
            let m = b[0].len();
            let mut counts = vec![vec![0.0; m]; k];
            for (s, p) in seqs.iter().zip(post) {
                for (t, &x) in s.as_discrete()?.iter().enumerate() {
                    for (j, g) in p.marginals.row(t).iter().enumerate() {
                        counts[j][x] += g;
                    }
                }
            }
            let pooled: Vec<f64> = (0..m).map(|v| counts.iter().map(|c| c[v]).sum()).collect();
            let mut out = Vec::with_capacity(k);
            for j in 0..k {
                if occupancy[j] < EMPTY_COMPONENT {
                    rescued.push(j);
                    out.push(Simplex::from_weights(&pooled)?.floored(EMISSION_FLOOR));
                } else {
                    out.push(Simplex::from_weights(&counts[j])?.floored(EMISSION_FLOOR));
                }
            }
            Emission::Discrete(out)
        }
        Emission::Gaussian(g) => {
            let d = g[0].dim();
            let mats: Vec<&Mat> = seqs.iter().map(Sequence::as_continuous).collect::<Result<_>>()?;
            let mut out = Vec::with_capacity(k);
            for j in 0..k {
                if occupancy[j] < EMPTY_COMPONENT {
                    rescued.push(j);
                    let (si, t) = least_explained(post);
                    let cov = pooled_cov.cloned().unwrap_or_else(|| Mat::identity(d));
                    out.push(Gaussian { mean: mats[si].row(t).to_vec(), cov });
                    continue;
                }
                let mut mean = vec![0.0; d];
                for (x, p) in mats.iter().zip(post) {
                    for t in 0..x.rows() {
                        crate::linalg::axpy(&mut mean, p.marginals[(t, j)], x.row(t));
                    }
                }
                mean.iter_mut().for_each(|v| *v /= occupancy[j]);
                let mut cov = Mat::zeros(d, d);
                for (x, p) in mats.iter().zip(post) {
                    for t in 0..x.rows() {
                        let diff = sub_vec(x.row(t), &mean);
                        cov.add_outer(p.marginals[(t, j)], &diff, &diff);
                    }
                }
                let cov = cov.scale(1.0 / occupancy[j]).clamp_eigenvalues(floor)?;
                out.push(Gaussian { mean, cov });
            }
            Emission::Gaussian(out)
        }
    };
    Ok(HmmParams { pi, trans, emit })
}

/// `(sequence, step)` whose most likely state is least certain.
fn least_explained(post: &[HmmPosterior]) -> (usize, usize) {
    let mut best = (0, 0);
    let mut best_score = f64::INFINITY;
    for (s, p) in post.iter().enumerate() {
        for t in 0..p.marginals.rows() {
            let score = p.marginals.row(t).iter().copied().fold(0.0, f64::max);
            if score < best_score {
                best_score = score;
                best = (s, t);
            }
        }
    }
    best
}

fn check_sequences(seqs: &[Sequence]) -> Result<()> {
    if seqs.is_empty() {
        return Err(Error::Empty("no sequences".into()));
    }
    if let Some(i) = seqs.iter().position(Sequence::is_empty) {
        return Err(Error::InvalidData(format!("sequence {i} is empty")));
    }
    Ok(())
}

/// Transition matrix with `stay` on the diagonal and the rest spread evenly.
fn sticky_transitions(k: usize, stay: f64) -> Mat {
    if k == 1 {
        return Mat::identity(1);
    }
    Mat::from_fn(k, k, |i, j| if i == j { stay } else { (1.0 - stay) / (k - 1) as f64 })
}

/// Default starting point for [`hmm_fit`].
///
/// Discrete: pooled symbol frequencies perturbed by seeded noise of up to 30%
/// per state. Gaussian: farthest-point means over the pooled observations with
/// the pooled covariance. Both use a uniform initial distribution and
/// transitions staying put with probability 0.5 (for `K > 1`).
pub fn hmm_init(seqs: &[Sequence], k: usize, kind: EmissionKind, seed: u64) -> Result<HmmParams> {
    check_sequences(seqs)?;
    if k == 0 {
        return Err(Error::InvalidParameter("need at least one state".into()));
    }
    let mut rng = RandomSource::new(seed);
    let emit = match kind {
        EmissionKind::Discrete => {
            let syms: Vec<&[usize]> = seqs.iter().map(Sequence::as_discrete).collect::<Result<_>>()?;
            let m = syms.iter().flat_map(|s| s.iter()).max().map_or(1, |&x| x + 1);
            let mut freq = vec![0.0; m];
            for s in &syms {
                for &x in s.iter() {
                    freq[x] += 1.0;
                }
            }
            let states = (0..k)
                .map(|_| {
                    let w: Vec<f64> = freq.iter().map(|&f| (f + 1e-3) * (1.0 + 0.3 * (2.0 * rng.uniform() - 1.0))).collect();
                    Simplex::from_weights(&w)
                })
                .collect::<Result<Vec<_>>>()?;
            Emission::Discrete(states)
        }
        EmissionKind::Gaussian => {
            let mats: Vec<&Mat> = seqs.iter().map(Sequence::as_continuous).collect::<Result<_>>()?;
            let pooled = pooled_rows(&mats);
            if pooled.rows() < k {
                return Err(Error::InvalidData(format!("{} observations for {k} states", pooled.rows())));
            }
            let floor = covariance_floor(&pooled);
            let mu = column_means(&pooled);
            let cov = scatter(&pooled, &mu).clamp_eigenvalues(floor)?;
            let rows = farthest_point_rows(&pooled, k, &mut rng);
            Emission::Gaussian(rows.iter().map(|&i| Gaussian { mean: pooled.row(i).to_vec(), cov: cov.clone() }).collect())
        }
    };
    HmmParams::new(Simplex::uniform(k), sticky_transitions(k, 0.5), emit)
}

/// Baum-Welch from the default initialization; the result is canonicalized.
pub fn hmm_fit(seqs: &[Sequence], k: usize, kind: EmissionKind, cfg: &EmConfig) -> Result<(HmmParams, FitReport)> {
    let init = hmm_init(seqs, k, kind, cfg.seed)?;
    hmm_fit_from(seqs, init, cfg)
}

/// Baum-Welch from given parameters; the result is canonicalized.
pub fn hmm_fit_from(seqs: &[Sequence], init: HmmParams, cfg: &EmConfig) -> Result<(HmmParams, FitReport)> {
    check_sequences(seqs)?;
    let (floor, pooled_cov) = match init.emit.kind() {
        EmissionKind::Discrete => (0.0, None),
        EmissionKind::Gaussian => {
            let mats: Vec<&Mat> = seqs.iter().map(Sequence::as_continuous).collect::<Result<_>>()?;
            let pooled = pooled_rows(&mats);
            let floor = covariance_floor(&pooled);
            let mu = column_means(&pooled);
            (floor, Some(scatter(&pooled, &mu).clamp_eigenvalues(floor)?))
        }
    };
    let (p, rep) = run_em(&HmmEm { seqs, floor, pooled_cov }, init, cfg)?;
    Ok((p.canonicalize(), rep))
}
