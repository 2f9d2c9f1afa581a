//! Generalized Bayesian additive regression trees.
//!
//! The response follows an exponential-family distribution whose natural
//! parameter is modelled by a sum of tree-structured step functions. The crate
//! provides the model pieces (likelihoods, tree and leaf priors, forests), a
//! Metropolis-within-Gibbs backfitting sampler, divergence metrics, synthetic
//! ground truths, and a harness that measures how fast the posterior
//! concentrates around the truth as the sample size grows.
//!
//! | module | contents |
//! |--------|----------|
//! | [`likelihoods`] | exponential-family response models and link functions |
//! | [`tree`] | tree partitions of `[0,1]^q` and the two partition priors |
//! | [`leafprior`] | step-height priors and tail certificates |
//! | [`forest`] | additive ensembles and their joint prior |
//! | [`sampler`] | backfitting MCMC |
//! | [`truth`] | synthetic step / monotone / Hölder truths |
//! | [`metrics`] | averaged Hellinger, KL and KL-variation |
//! | [`harness`] | concentration-rate experiments and reports |

// `!(x > 0.0)` is used on purpose so that NaN fails validation
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod forest;
pub mod harness;
pub mod leafprior;
pub mod likelihoods;
pub mod metrics;
pub mod numerics;
pub mod rng;
pub mod sampler;
pub mod stats;
pub mod tree;
pub mod truth;

pub use data::{Dataset, Matrix};
pub use error::{Error, Result};
pub use forest::{Forest, ForestMember, LeafValues};
pub use leafprior::LeafPrior;
pub use likelihoods::{LinkFunction, Likelihood};
pub use sampler::{PosteriorDraws, SamplerConfig};
pub use tree::{TreePartition, TreePriorSpec};
