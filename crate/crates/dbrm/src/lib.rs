//! Deep Bayesian regression: a generalized linear model over an automatically
//! engineered space of nonlinear features, fitted by mode-jumping MCMC over
//! evolving feature populations.
//!
//! The crate is organised around the life cycle of a run:
//!
//! * [`feature`] — the recursive feature grammar (transform / product /
//!   projection nodes), evaluation on data, depth and width accounting,
//!   canonical keys and the feature-generating operators.
//! * [`glm`] — exponential-family likelihoods, IRLS fitting, and log marginal
//!   likelihoods (closed form for the Gaussian path, Laplace for logistic).
//! * [`scoring`] — the complexity-penalising model prior, combined model
//!   scores, and the registry of every model visited during search.
//! * [`mjmcmc`] — the mode-jumping Metropolis–Hastings kernel on a fixed
//!   feature population: large jumps, greedy local optimization,
//!   randomization, and the composite acceptance rule.
//! * [`gmjmcmc`] — population initialization, filtration and transition
//!   operators, the genetically modified outer loop, and the reversible
//!   variant with delayed acceptance.
//! * [`inference`] — renormalized and frequency posterior estimates, marginal
//!   inclusion probabilities, multi-chain merging, model-averaged prediction
//!   and evaluation metrics.
//! * [`data`] — dataset ingestion, splits, simulation generators and run
//!   configuration.
//! * [`experiments`] — reproducible end-to-end protocols used by the CLI and
//!   the acceptance suite.

pub mod data;
pub mod experiments;
pub mod feature;
pub mod glm;
pub mod gmjmcmc;
pub mod inference;
pub mod mjmcmc;
pub mod scoring;

pub use data::{Dataset, RunConfig};
pub use feature::{Feature, Transformation, TransformationSet};
pub use glm::Family;
pub use scoring::{ModelRegistry, ModelScore, Scorer};
