//! Counterfactually-invariant relevance prediction for boundedly-rational,
//! causally-perceiving users.
//!
//! * [`scm`]: exact discrete structural causal models, sampling, Bayes
//!   oracles, conditional-independence tests and the believer-from-skeptic
//!   construction.
//! * [`choice`]: perceived value and deterministic choice.
//! * [`divergence`]: squared MMD and CORAL with analytic gradients.
//! * [`model`]: linear and multilayer predictors with a representation tap.
//! * [`trainer`]: penalized risk minimization across environments.
//! * [`experiments`]: the synthetic experiment generators and orchestrations.
//! * [`gradcheck`]: finite-difference checks of every analytic gradient.

pub mod choice;
pub mod data;
pub mod divergence;
pub mod error;
pub mod experiments;
pub mod gradcheck;
pub mod model;
pub mod rng;
pub mod scm;
pub mod trainer;

pub use data::{Dataset, Record};
pub use divergence::{Bandwidth, Divergence, KernelSpec, SampleMatrix};
pub use error::{Error, Result};
pub use model::{Architecture, ForwardRecord, Predictor, Tap};
pub use scm::{DiscreteScm, GraphTag, JointTable};
pub use trainer::{LambdaSchedule, Optimizer, PenaltyKind, TrainConfig, TrainHistory};
