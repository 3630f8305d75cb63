//! Signed-root likelihood ratio asymptotics and probability-matching priors.
//!
//! The crate evaluates the frequentist and Bayesian means and variances of the
//! signed root statistic `R(psi)`, checks first-order, second-order and
//! conditional matching conditions on priors, and verifies the claims with
//! quadrature oracles and Monte Carlo coverage experiments.

pub mod bayes;
pub mod conditional;
pub mod contract;
pub mod coverage;
pub mod error;
pub mod fd;
pub mod jet;
pub mod lambda;
pub mod matching;
pub mod likelihood;
pub mod model;
pub mod quadrature;
pub mod rng;
pub mod special;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{family, prior, ModelFamily, ParameterPoint, Prior, Sample};
pub use rng::Stream;
pub use tensor::{Matrix, Tensor};
