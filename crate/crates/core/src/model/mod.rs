//! Statistical model families.
//!
//! A family supplies the log-likelihood of an i.i.d. sample, its derivative
//! tensors, a sampler and a parameter domain. Slot 0 of every parameter
//! vector is the scalar interest parameter; the remaining slots are nuisance.
//!
//! Families are addressed by registry keys: `normal-ls`, `cauchy-ls`,
//! `gumbel-ls` (optionally suffixed `:loc` or `:scale` to choose which
//! physical parameter is of interest) and `gamma` (`:shape` or `:rate`).

mod custom;
mod gamma;
mod location_scale;
mod prior;

use std::fmt::Debug;
use std::sync::Arc;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jet::DerivTensors;
use crate::rng::Stream;

pub use custom::CustomFamily;
pub use gamma::{GammaFamily, GammaInterest};
pub use location_scale::{Kernel, LocationScale, Role};
pub use prior::{prior, FlatPrior, FnPrior, LocFactor, LocationScalePrior, Prior};

/// A point in the parameter space, interest parameter first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterPoint {
    theta: Vec<f64>,
}

impl ParameterPoint {
    pub fn new(family: &dyn ModelFamily, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != family.dim() {
            return Err(Error::Dimension(format!(
                "{} expects {} parameters, got {}",
                family.key(),
                family.dim(),
                theta.len()
            )));
        }
        if !theta.iter().all(|t| t.is_finite()) || !family.in_domain(&theta) {
            return Err(Error::Domain {
                family: family.key(),
                theta,
            });
        }
        Ok(ParameterPoint { theta })
    }

    pub fn psi(&self) -> f64 {
        self.theta[0]
    }

    pub fn nuisance(&self) -> &[f64] {
        &self.theta[1..]
    }

    pub fn q(&self) -> usize {
        self.theta.len() - 1
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.theta
    }
}

/// Observed data `y_1..y_n`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    y: Vec<f64>,
}

impl Sample {
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if y.is_empty() {
            return Err(Error::SampleSize {
                n: 0,
                dim: 0,
                needed: 1,
            });
        }
        if let Some(bad) = y.iter().find(|v| !v.is_finite()) {
            return Err(Error::Config(format!("non-finite observation {bad}")));
        }
        Ok(Sample { y })
    }

    /// A sample checked to be large enough for `family` (`n >= q + 2`).
    pub fn for_family(family: &dyn ModelFamily, y: Vec<f64>) -> Result<Self> {
        let s = Sample::new(y)?;
        let needed = family.dim() + 1;
        if s.n() < needed {
            return Err(Error::SampleSize {
                n: s.n(),
                dim: family.dim(),
                needed,
            });
        }
        Ok(s)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.y
    }

    pub fn mean(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.y.len() as f64
    }
}

/// Location and scale slots of a location-scale family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocationScaleView {
    pub kernel: Kernel,
    pub loc_slot: usize,
    pub scale_slot: usize,
}

impl LocationScaleView {
    pub fn role(&self) -> Role {
        if self.loc_slot == 0 {
            Role::Location
        } else {
            Role::Scale
        }
    }

    /// `(mu, sigma)` from a slot-ordered parameter vector.
    pub fn physical(&self, theta: &[f64]) -> (f64, f64) {
        (theta[self.loc_slot], theta[self.scale_slot])
    }

    /// Slot-ordered vector from `(mu, sigma)`.
    pub fn slots(&self, mu: f64, sigma: f64) -> Vec<f64> {
        let mut t = vec![0.0; 2];
        t[self.loc_slot] = mu;
        t[self.scale_slot] = sigma;
        t
    }
}

pub trait ModelFamily: Send + Sync + Debug {
    /// Registry key, including the interest suffix.
    fn key(&self) -> String;

    fn dim(&self) -> usize;

    fn param_names(&self) -> Vec<&'static str>;

    fn in_domain(&self, theta: &[f64]) -> bool;

    /// Coordinates that must stay strictly positive.
    fn positive(&self) -> Vec<bool>;

    /// Log-likelihood of the whole sample; no domain checks.
    fn loglik(&self, theta: &[f64], y: &[f64]) -> f64;

    /// Derivative tensors of [`ModelFamily::loglik`] up to `order`.
    ///
    /// The default is nested central differences; built-in families override
    /// it with exact derivatives.
    fn loglik_derivs_unchecked(&self, theta: &[f64], y: &[f64], order: usize) -> DerivTensors {
        crate::fd::deriv_tensors(&|t: &[f64]| self.loglik(t, y), theta, order)
    }

    /// Exact per-observation derivative tensors, when available.
    fn obs_derivs(&self, _theta: &[f64], _y: f64, _order: usize) -> Option<DerivTensors> {
        None
    }

    /// Nodes and probability weights for expectations over one observation
    /// drawn at `theta`, when the family can integrate analytically.
    fn obs_expectation_rule(&self, _theta: &[f64]) -> Option<Vec<(f64, f64)>> {
        None
    }

    fn draw(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<f64>;

    /// Starting points for maximisation, most trusted first.
    fn starts(&self, y: &[f64]) -> Vec<Vec<f64>>;

    fn location_scale(&self) -> Option<LocationScaleView> {
        None
    }
}

/// Checked derivative tensors of the log-likelihood.
pub fn loglik_derivs(
    family: &dyn ModelFamily,
    theta: &ParameterPoint,
    sample: &Sample,
    order: usize,
) -> Result<DerivTensors> {
    if !(1..=4).contains(&order) {
        return Err(Error::Order(order));
    }
    let t = theta.as_slice();
    if !family.in_domain(t) {
        return Err(Error::Domain {
            family: family.key(),
            theta: t.to_vec(),
        });
    }
    let d = family.loglik_derivs_unchecked(t, sample.values(), order);
    if !d.value.is_finite() {
        return Err(Error::Evaluation { theta: t.to_vec() });
    }
    Ok(d)
}

/// Draw an i.i.d. sample of size `n` at `theta` from `stream`.
pub fn sample(
    family: &dyn ModelFamily,
    theta: &ParameterPoint,
    n: usize,
    stream: Stream,
) -> Result<Sample> {
    if !family.in_domain(theta.as_slice()) {
        return Err(Error::Domain {
            family: family.key(),
            theta: theta.as_slice().to_vec(),
        });
    }
    let mut rng = stream.rng();
    Sample::new(family.draw(theta.as_slice(), n.max(1), &mut rng))
}

/// Look up a built-in family by registry key.
pub fn family(key: &str) -> Result<Arc<dyn ModelFamily>> {
    let (base, suffix) = match key.split_once(':') {
        Some((b, s)) => (b, Some(s)),
        None => (key, None),
    };
    let kernel = match base {
        "normal-ls" => Some(Kernel::Normal),
        "cauchy-ls" => Some(Kernel::Cauchy),
        "gumbel-ls" => Some(Kernel::Gumbel),
        _ => None,
    };
    if let Some(kernel) = kernel {
        let role = match suffix {
            None | Some("loc") => Role::Location,
            Some("scale") => Role::Scale,
            Some(_) => return Err(Error::UnknownKey(key.to_string())),
        };
        return Ok(Arc::new(LocationScale::new(kernel, role)));
    }
    if base == "gamma" {
        let interest = match suffix {
            None | Some("shape") => GammaInterest::Shape,
            Some("rate") => GammaInterest::Rate,
            Some(_) => return Err(Error::UnknownKey(key.to_string())),
        };
        return Ok(Arc::new(GammaFamily::new(interest)));
    }
    Err(Error::UnknownKey(key.to_string()))
}
