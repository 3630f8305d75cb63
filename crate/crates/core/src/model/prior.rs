use std::fmt;
use std::sync::Arc;

use super::{LocationScaleView, ModelFamily};
use crate::error::{Error, Result};
use crate::fd;
use crate::tensor::Matrix;

/// A prior density known up to a constant.
///
/// `ratio1` and `ratio2` are `Pi_r = pi_r / pi` and `Pi_rs = pi_rs / pi`.
pub trait Prior: Send + Sync + fmt::Debug {
    fn label(&self) -> String;

    fn log_pi(&self, theta: &[f64]) -> f64;

    fn ratio1(&self, theta: &[f64]) -> Vec<f64> {
        (0..theta.len())
            .map(|r| fd::partial(&|t: &[f64]| self.log_pi(t), theta, &[r]))
            .collect()
    }

    fn ratio2(&self, theta: &[f64]) -> Matrix {
        let d = theta.len();
        let g = self.ratio1(theta);
        let mut m = Matrix::zeros(d, d);
        for r in 0..d {
            for s in r..d {
                let h = fd::partial(&|t: &[f64]| self.log_pi(t), theta, &[r, s]);
                m[(r, s)] = h + g[r] * g[s];
                m[(s, r)] = m[(r, s)];
            }
        }
        m
    }

    /// `Some(k)` when the prior is `sigma^-k` on a location-scale family, so
    /// posterior quantiles are equivariant under the location-scale group.
    fn scale_power(&self) -> Option<f64> {
        None
    }
}

/// `pi = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlatPrior;

impl Prior for FlatPrior {
    fn label(&self) -> String {
        "flat".into()
    }

    fn log_pi(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn ratio1(&self, theta: &[f64]) -> Vec<f64> {
        vec![0.0; theta.len()]
    }

    fn ratio2(&self, theta: &[f64]) -> Matrix {
        Matrix::zeros(theta.len(), theta.len())
    }

    /// `sigma^0` when used with a location-scale family.
    fn scale_power(&self) -> Option<f64> {
        Some(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LocFactor {
    One,
    /// `d(mu) = exp(mu)`.
    Exp,
}

/// `pi(mu, sigma) = d(mu) sigma^-k` in the slot order of a location-scale
/// family.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocationScalePrior {
    pub loc: LocFactor,
    pub power: f64,
    pub view: LocationScaleView,
}

impl Prior for LocationScalePrior {
    fn label(&self) -> String {
        let scale = if self.power == 1.0 {
            "1/sigma".to_string()
        } else if self.power == 0.0 {
            "1".to_string()
        } else {
            format!("1/sigma^{}", self.power)
        };
        match self.loc {
            LocFactor::One => scale,
            LocFactor::Exp if self.power == 0.0 => "exp(mu)".into(),
            LocFactor::Exp => format!("exp(mu){}", scale.trim_start_matches('1')),
        }
    }

    fn log_pi(&self, theta: &[f64]) -> f64 {
        let (mu, sigma) = self.view.physical(theta);
        let d = match self.loc {
            LocFactor::One => 0.0,
            LocFactor::Exp => mu,
        };
        d - self.power * sigma.ln()
    }

    fn ratio1(&self, theta: &[f64]) -> Vec<f64> {
        let (_, sigma) = self.view.physical(theta);
        let mut g = vec![0.0; 2];
        g[self.view.loc_slot] = match self.loc {
            LocFactor::One => 0.0,
            LocFactor::Exp => 1.0,
        };
        g[self.view.scale_slot] = -self.power / sigma;
        g
    }

    fn ratio2(&self, theta: &[f64]) -> Matrix {
        let (_, sigma) = self.view.physical(theta);
        let g = self.ratio1(theta);
        let mut h = Matrix::zeros(2, 2);
        let s = self.view.scale_slot;
        h[(s, s)] = self.power / (sigma * sigma);
        for r in 0..2 {
            for c in 0..2 {
                h[(r, c)] += g[r] * g[c];
            }
        }
        h
    }

    fn scale_power(&self) -> Option<f64> {
        match self.loc {
            LocFactor::One => Some(self.power),
            LocFactor::Exp => None,
        }
    }
}

type LogPi = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// A prior given by its log density; ratios come from finite differences.
#[derive(Clone)]
pub struct FnPrior {
    label: String,
    log_pi: Arc<LogPi>,
}

impl FnPrior {
    pub fn new(label: impl Into<String>, log_pi: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        FnPrior {
            label: label.into(),
            log_pi: Arc::new(log_pi),
        }
    }
}

impl fmt::Debug for FnPrior {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnPrior").field("label", &self.label).finish()
    }
}

impl Prior for FnPrior {
    fn label(&self) -> String {
        self.label.clone()
    }

    fn log_pi(&self, theta: &[f64]) -> f64 {
        (self.log_pi)(theta)
    }
}

/// Look up a prior by key for a given family.
///
/// Location-scale keys: `flat`, `1/sigma`, `1/sigma^2`, `exp(mu)/sigma`,
/// `exp(mu)`, or `sigma^-k` for a numeric `k`. Gamma keys: `flat`,
/// `jeffreys`.
pub fn prior(key: &str, family: &dyn ModelFamily) -> Result<Arc<dyn Prior>> {
    let key = key.trim();
    if key == "flat" {
        return Ok(Arc::new(FlatPrior));
    }
    if let Some(view) = family.location_scale() {
        let make = |loc, power| -> Result<Arc<dyn Prior>> {
            Ok(Arc::new(LocationScalePrior { loc, power, view }))
        };
        return match key {
            "1/sigma" => make(LocFactor::One, 1.0),
            "1/sigma^2" => make(LocFactor::One, 2.0),
            "exp(mu)/sigma" => make(LocFactor::Exp, 1.0),
            "exp(mu)" => make(LocFactor::Exp, 0.0),
            _ => match key.strip_prefix("sigma^-").map(str::parse::<f64>) {
                Some(Ok(k)) => make(LocFactor::One, k),
                _ => Err(Error::UnknownKey(key.to_string())),
            },
        };
    }
    if family.key().starts_with("gamma") && key == "jeffreys" {
        let shape_slot = if family.key() == "gamma:rate" { 1 } else { 0 };
        return Ok(Arc::new(FnPrior::new("jeffreys", move |t: &[f64]| {
            let k = t[shape_slot];
            let b = t[1 - shape_slot];
            0.5 * (k * crate::special::polygamma(1, k) - 1.0).ln() - b.ln()
        })));
    }
    Err(Error::UnknownKey(key.to_string()))
}
