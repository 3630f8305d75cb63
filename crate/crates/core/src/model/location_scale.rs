use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::distributions::Open01;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{LocationScaleView, ModelFamily};
use crate::jet::{self, DerivTensors, Jet};
use crate::quadrature;

/// Which physical parameter occupies the interest slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    #[serde(alias = "loc", alias = "mu")]
    Location,
    #[serde(alias = "sigma")]
    Scale,
}

impl Role {
    pub fn suffix(self) -> &'static str {
        match self {
            Role::Location => "loc",
            Role::Scale => "scale",
        }
    }
}

/// Standardised density `g` of a location-scale family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    Normal,
    Cauchy,
    /// Largest-extreme-value (Gumbel) density `exp(-z - exp(-z))`.
    Gumbel,
}

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

impl Kernel {
    pub fn key(self) -> &'static str {
        match self {
            Kernel::Normal => "normal-ls",
            Kernel::Cauchy => "cauchy-ls",
            Kernel::Gumbel => "gumbel-ls",
        }
    }

    /// `h(z) = log g(z)`.
    #[inline]
    pub fn h(self, z: f64) -> f64 {
        match self {
            Kernel::Normal => -0.5 * z * z - LN_SQRT_2PI,
            Kernel::Cauchy => -(PI * (1.0 + z * z)).ln(),
            Kernel::Gumbel => -z - (-z).exp(),
        }
    }

    /// `h` and its first four derivatives.
    pub fn h_derivs(self, z: f64) -> [f64; 5] {
        match self {
            Kernel::Normal => [self.h(z), -z, -1.0, 0.0, 0.0],
            Kernel::Cauchy => {
                let q = 1.0 + z * z;
                let z2 = z * z;
                [
                    self.h(z),
                    -2.0 * z / q,
                    2.0 * (z2 - 1.0) / (q * q),
                    -4.0 * z * (z2 - 3.0) / (q * q * q),
                    12.0 * (z2 * z2 - 6.0 * z2 + 1.0) / (q * q * q * q),
                ]
            }
            Kernel::Gumbel => {
                let e = (-z).exp();
                [-z - e, e - 1.0, -e, e, -e]
            }
        }
    }

    pub fn draw(self, rng: &mut dyn RngCore) -> f64 {
        match self {
            Kernel::Normal => rng.sample(StandardNormal),
            Kernel::Cauchy => {
                let u: f64 = rng.sample(Open01);
                (PI * (u - 0.5)).tan()
            }
            Kernel::Gumbel => {
                let u: f64 = rng.sample(Open01);
                -(-u.ln()).ln()
            }
        }
    }

    pub fn median(self) -> f64 {
        match self {
            Kernel::Normal | Kernel::Cauchy => 0.0,
            Kernel::Gumbel => -(std::f64::consts::LN_2).ln(),
        }
    }

    pub fn symmetric(self) -> bool {
        !matches!(self, Kernel::Gumbel)
    }

    /// `(z, p)` with `sum p f(z) ~ E_g f(Z)`, accurate to near machine
    /// precision for the smooth integrands produced by likelihood derivatives.
    pub fn expectation_rule(self) -> &'static [(f64, f64)] {
        static NORMAL: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
        static CAUCHY: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
        static GUMBEL: OnceLock<Vec<(f64, f64)>> = OnceLock::new();
        match self {
            Kernel::Normal => NORMAL.get_or_init(|| density_rule(self)),
            Kernel::Gumbel => GUMBEL.get_or_init(|| density_rule(self)),
            // z = tan(t) maps the Cauchy law to the uniform law on
            // (-pi/2, pi/2); the transformed integrands are smooth and
            // periodic, so the midpoint rule converges geometrically.
            Kernel::Cauchy => CAUCHY.get_or_init(|| {
                let m = 512;
                (0..m)
                    .map(|j| {
                        let t = -0.5 * PI + (j as f64 + 0.5) * PI / m as f64;
                        (t.tan(), 1.0 / m as f64)
                    })
                    .collect()
            }),
        }
    }
}

fn density_rule(k: Kernel) -> Vec<(f64, f64)> {
    let raw: Vec<(f64, f64)> = quadrature::sinh_sinh(1.0 / 64.0, 4.0)
        .into_iter()
        .map(|(z, w)| (z, w * k.h(z).exp()))
        .filter(|(z, p)| p.is_finite() && *p > 1e-300 && k.h_derivs(*z).iter().all(|d| d.is_finite()))
        .collect();
    let total: f64 = raw.iter().map(|(_, p)| p).sum();
    raw.into_iter().map(|(z, p)| (z, p / total)).collect()
}

/// Location-scale family `f(y; mu, sigma) = g((y - mu) / sigma) / sigma`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocationScale {
    kernel: Kernel,
    role: Role,
}

impl LocationScale {
    pub fn new(kernel: Kernel, role: Role) -> Self {
        LocationScale { kernel, role }
    }

    pub fn kernel(&self) -> Kernel {
        self.kernel
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn view(&self) -> LocationScaleView {
        match self.role {
            Role::Location => LocationScaleView {
                kernel: self.kernel,
                loc_slot: 0,
                scale_slot: 1,
            },
            Role::Scale => LocationScaleView {
                kernel: self.kernel,
                loc_slot: 1,
                scale_slot: 0,
            },
        }
    }

    fn jets(&self, theta: &[f64], order: usize) -> (Jet, Jet) {
        let v = self.view();
        let s = jet::space(2, order);
        (
            Jet::variable(s, v.loc_slot, theta[v.loc_slot]),
            Jet::variable(s, v.scale_slot, theta[v.scale_slot]),
        )
    }

    fn derivs_over(&self, theta: &[f64], y: &[f64], order: usize) -> DerivTensors {
        let (mu, sigma) = self.jets(theta, order);
        let inv = sigma.recip();
        let mut total = sigma.ln().scale(-(y.len() as f64));
        for &yi in y {
            let z = mu.scale(-1.0).add_scalar(yi).mul(&inv);
            total = total.add(&z.compose(&self.kernel.h_derivs(z.value())));
        }
        DerivTensors::from_jet(&total)
    }
}

impl ModelFamily for LocationScale {
    fn key(&self) -> String {
        format!("{}:{}", self.kernel.key(), self.role.suffix())
    }

    fn dim(&self) -> usize {
        2
    }

    fn param_names(&self) -> Vec<&'static str> {
        match self.role {
            Role::Location => vec!["mu", "sigma"],
            Role::Scale => vec!["sigma", "mu"],
        }
    }

    fn in_domain(&self, theta: &[f64]) -> bool {
        let v = self.view();
        theta.len() == 2 && theta.iter().all(|t| t.is_finite()) && theta[v.scale_slot] > 0.0
    }

    fn positive(&self) -> Vec<bool> {
        let v = self.view();
        (0..2).map(|i| i == v.scale_slot).collect()
    }

    fn loglik(&self, theta: &[f64], y: &[f64]) -> f64 {
        let (mu, sigma) = self.view().physical(theta);
        if sigma <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let inv = 1.0 / sigma;
        let k = self.kernel;
        let s: f64 = match k {
            Kernel::Normal => {
                let ss: f64 = y.iter().map(|yi| (yi - mu) * (yi - mu)).sum();
                -0.5 * ss * inv * inv - y.len() as f64 * LN_SQRT_2PI
            }
            _ => y.iter().map(|yi| k.h((yi - mu) * inv)).sum(),
        };
        s - y.len() as f64 * sigma.ln()
    }

    fn loglik_derivs_unchecked(&self, theta: &[f64], y: &[f64], order: usize) -> DerivTensors {
        self.derivs_over(theta, y, order)
    }

    fn obs_derivs(&self, theta: &[f64], y: f64, order: usize) -> Option<DerivTensors> {
        Some(self.derivs_over(theta, &[y], order))
    }

    fn obs_expectation_rule(&self, theta: &[f64]) -> Option<Vec<(f64, f64)>> {
        let (mu, sigma) = self.view().physical(theta);
        Some(
            self.kernel
                .expectation_rule()
                .iter()
                .map(|&(z, p)| (mu + sigma * z, p))
                .collect(),
        )
    }

    fn draw(&self, theta: &[f64], n: usize, rng: &mut dyn RngCore) -> Vec<f64> {
        let (mu, sigma) = self.view().physical(theta);
        (0..n).map(|_| mu + sigma * self.kernel.draw(rng)).collect()
    }

    fn starts(&self, y: &[f64]) -> Vec<Vec<f64>> {
        let n = y.len() as f64;
        let mean = y.iter().sum::<f64>() / n;
        let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let med = median(y);
        let mad = 1.4826 * median(&y.iter().map(|v| (v - med).abs()).collect::<Vec<_>>());
        let scale_med = if mad > 0.0 { mad } else { sd.max(1e-3) };
        // Shift the robust location so it targets mu rather than the
        // kernel's median.
        let loc_med = med - scale_med * self.kernel.median();
        let v = self.view();
        let mut out = vec![v.slots(loc_med, scale_med)];
        if sd > 0.0 && self.kernel != Kernel::Cauchy {
            out.insert(0, v.slots(mean, sd));
        } else if sd > 0.0 {
            out.push(v.slots(mean, sd));
        }
        out
    }

    fn location_scale(&self) -> Option<LocationScaleView> {
        Some(self.view())
    }
}

pub(crate) fn median(y: &[f64]) -> f64 {
    let mut v = y.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
