//! Time-series latent variable models: hidden Markov models with discrete or
//! Gaussian emissions, and linear dynamical systems.
//!
//! Inference is exact in both cases (forward-backward; Kalman filter and RTS
//! smoother), and parameters are estimated by EM over one or more sequences.

mod hmm;
mod lds;

pub use hmm::*;
pub use lds::*;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;

/// One observed sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "values", rename_all = "lowercase")]
pub enum Sequence {
    /// Symbol indices.
    Discrete(Vec<usize>),
    /// `T x d` matrix, one observation per row.
    Continuous(Mat),
}

impl Sequence {
    pub fn len(&self) -> usize {
        match self {
            Sequence::Discrete(s) => s.len(),
            Sequence::Continuous(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_discrete(&self) -> Result<&[usize]> {
        match self {
            Sequence::Discrete(s) => Ok(s),
            Sequence::Continuous(_) => Err(Error::InvalidData("expected a discrete sequence".into())),
        }
    }

    pub fn as_continuous(&self) -> Result<&Mat> {
        match self {
            Sequence::Continuous(m) => Ok(m),
            Sequence::Discrete(_) => Err(Error::InvalidData("expected a continuous sequence".into())),
        }
    }
}

/// Stacks the rows of several continuous sequences.
pub(crate) fn pooled_rows(seqs: &[&Mat]) -> Mat {
    let d = seqs.first().map_or(0, |m| m.cols());
    let mut data = Vec::new();
    for m in seqs {
        data.extend_from_slice(m.as_slice());
    }
    let n = data.len() / d.max(1);
    Mat::from_vec(n, d, data).expect("consistent widths")
}
