//! Desk-scale probabilistic modeling toolkit.
//!
//! Three model families over small signal spaces, each with the learning
//! algorithms that make them tractable at desk scale:
//!
//! - **descriptive** (energy-based) models: linear exponential families with
//!   exact and Langevin-based maximum likelihood, projection pursuit, and
//!   deep energy models trained by contrastive divergence, persistent chains,
//!   or multi-grid sampling;
//! - **generative** (latent-variable) models: factor analysis, ICA, sparse
//!   coding, NMF, masked matrix factorization, RBMs, and deep generator
//!   networks trained by alternating back-propagation;
//! - **discriminative** models: logistic regression and softmax networks,
//!   with the exact Bayes-rule correspondence to per-class energy models.
//!
//! The `bridges` module couples the families: introspective learning, VAEs,
//! adversarial contrastive divergence, the divergence triangle, and
//! cooperative (sampler + teacher) training.
//!
//! Everything is validated against brute-force oracles (`oracle`) on
//! enumerable domains: exact normalizers, exact KL divergences, and central
//! finite differences for every gradient path.

pub mod bridges;
pub mod checkpoint;
pub mod descriptive;
pub mod discriminative;
pub mod generative;
pub mod mcmc;
pub mod metrics;
pub mod oracle;
pub mod rng;
pub mod tensor;

pub use tensor::{Tensor, TensorError};
