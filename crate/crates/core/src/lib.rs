//! Probabilistic latent variable models with exact or approximate inference.
//!
//! Flat models ([`ppca`], [`mixture`], [`irt`]), the hierarchical topic model
//! ([`lda`]) and sequential models ([`sequential`]) share the numerical
//! primitives in [`linalg`], [`prob`] and [`rng`], and are fitted through the
//! generic EM driver in [`em`]. Synthetic generators with known ground truth and
//! file formats live in [`datasets`].
//!
//! Which inference route each model uses:
//!
//! | posterior                      | models                         | method                    |
//! |--------------------------------|--------------------------------|---------------------------|
//! | closed-form Gaussian           | PPCA, LDS                      | exact EM / Kalman         |
//! | finite discrete                | GMM, LCA, HMM                  | exact EM / forward-backward |
//! | 1-d continuous, no closed form | 2PL IRT                        | quadrature EM             |
//! | intractable, conjugate-exp.    | LDA                            | mean-field VI             |
//! | intractable, neural            | VAE, flows, diffusion, AR, GAN | see `latentlab-deep`      |

pub mod datasets;
pub mod em;
pub mod error;
pub mod irt;
pub mod lda;
pub mod linalg;
pub mod mixture;
pub mod par;
pub mod ppca;
pub mod prob;
pub mod rng;
pub mod sequential;

pub use em::{run_em, EmConfig, EmProblem, FitReport};
pub use error::{Error, Result};
pub use linalg::Mat;
pub use prob::{Gaussian, Simplex};
pub use rng::RandomSource;
