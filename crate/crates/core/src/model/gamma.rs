use std::sync::OnceLock;

use rand::RngCore;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::ModelFamily;
use crate::jet::{self, DerivTensors, Jet};
use crate::quadrature;
use crate::special::{digamma, ln_gamma, polygamma};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GammaInterest {
    Shape,
    Rate,
}

/// Gamma family with density `rate^shape y^(shape-1) exp(-rate y) / Gamma(shape)`.
///
/// Not a location-scale model; it exercises the unconditional code paths.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GammaFamily {
    interest: GammaInterest,
}

impl GammaFamily {
    pub fn new(interest: GammaInterest) -> Self {
        GammaFamily { interest }
    }

    fn slots(&self) -> (usize, usize) {
        match self.interest {
            GammaInterest::Shape => (0, 1),
            GammaInterest::Rate => (1, 0),
        }
    }

    /// `(shape, rate)` from slot order.
    pub fn physical(&self, theta: &[f64]) -> (f64, f64) {
        let (k, b) = self.slots();
        (theta[k], theta[b])
    }

    fn to_slots(&self, shape: f64, rate: f64) -> Vec<f64> {
        let (k, b) = self.slots();
        let mut t = vec![0.0; 2];
        t[k] = shape;
        t[b] = rate;
        t
    }

    fn derivs_from_stats(&self, theta: &[f64], n: f64, sum_log: f64, sum: f64, order: usize) -> DerivTensors {
        let (ks, bs) = self.slots();
        let s = jet::space(2, order);
        let k = Jet::variable(s, ks, theta[ks]);
        let b = Jet::variable(s, bs, theta[bs]);
        let kv = k.value();
        let lg = k.compose(&[
            ln_gamma(kv),
            digamma(kv),
            polygamma(1, kv),
            polygamma(2, kv),
            polygamma(3, kv),
        ]);
        let per = k.mul(&b.ln()).sub(&lg).scale(n);
        let total = per
            .add(&k.add_scalar(-1.0).scale(sum_log))
            .sub(&b.scale(sum));
        DerivTensors::from_jet(&total)
    }
}

impl ModelFamily for GammaFamily {
    fn key(&self) -> String {
        match self.interest {
            GammaInterest::Shape => "gamma:shape".into(),
            GammaInterest::Rate => "gamma:rate".into(),
        }
    }

    fn dim(&self) -> usize {
        2
    }

    fn param_names(&self) -> Vec<&'static str> {
        match self.interest {
            GammaInterest::Shape => vec!["shape", "rate"],
            GammaInterest::Rate => vec!["rate", "shape"],
        }
    }

    fn in_domain(&self, theta: &[f64]) -> bool {
        theta.len() == 2 && theta.iter().all(|t| t.is_finite() && *t > 0.0)
    }

    fn positive(&self) -> Vec<bool> {
        vec![true, true]
    }

    fn loglik(&self, theta: &[f64], y: &[f64]) -> f64 {
        let (k, b) = self.physical(theta);
        if k <= 0.0 || b <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let n = y.len() as f64;
        let sum_log: f64 = y.iter().map(|v| v.ln()).sum();
        let sum: f64 = y.iter().sum();
        n * (k * b.ln() - ln_gamma(k)) + (k - 1.0) * sum_log - b * sum
    }

    fn loglik_derivs_unchecked(&self, theta: &[f64], y: &[f64], order: usize) -> DerivTensors {
        let sum_log: f64 = y.iter().map(|v| v.ln()).sum();
        let sum: f64 = y.iter().sum();
        self.derivs_from_stats(theta, y.len() as f64, sum_log, sum, order)
    }

    fn obs_derivs(&self, theta: &[f64], y: f64, order: usize) -> Option<DerivTensors> {
        Some(self.derivs_from_stats(theta, 1.0, y.ln(), y, order))
    }

    fn obs_expectation_rule(&self, theta: &[f64]) -> Option<Vec<(f64, f64)>> {
        static RULE: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
        let base = RULE.get_or_init(|| quadrature::exp_sinh(1.0 / 64.0, 4.0));
        let (k, b) = self.physical(theta);
        let lg = ln_gamma(k);
        let raw: Vec<(f64, f64)> = base
            .iter()
            .map(|&(x, w)| (x / b, w * ((k - 1.0) * x.ln() - x - lg).exp()))
            .filter(|(y, p)| p.is_finite() && *p > 1e-300 && *y > 0.0 && y.is_finite())
            .collect();
        let total: f64 = raw.iter().map(|(_, p)| p).sum();
        Some(raw.into_iter().map(|(y, p)| (y, p / total)).collect())
    }

    fn draw(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let (k, b) = self.physical(theta);
        let d = Gamma::new(k, 1.0 / b).expect("gamma parameters validated by caller");
        (0..n).map(|_| d.sample(rng)).collect()
    }

    fn starts(&self, y: &[f64]) -> Vec<Vec<f64>> {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let mean_log = y.iter().map(|v| v.ln()).sum::<f64>() / n;
        // Minka's closed-form approximation to the shape MLE.
        let s = (mean.ln() - mean_log).max(1e-8);
        let k_approx = (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s);
        let mut out = vec![self.to_slots(k_approx, k_approx / mean)];
        if var > 0.0 {
            out.push(self.to_slots(mean * mean / var, mean / var));
        }
        out
    }
}
