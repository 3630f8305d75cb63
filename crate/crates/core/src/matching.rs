//! Frequentist moments of `R(psi)` and the matching conditions on priors.

use rayon::prelude::*;
use serde::Serialize;

use crate::bayes::mu_b;
use crate::contract::{col, pair_a, pair_b, quad, t3_v_m, t3_vvv};
use crate::error::{Error, Result};
use crate::lambda::{analytic_lambda, monte_carlo_lambda, HatArrays, LambdaArrays};
use crate::model::{loglik_derivs, ModelFamily, ParameterPoint, Prior, Sample};
use crate::rng::Stream;
use crate::tensor::{Matrix, Tensor};

/// λ arrays as a function of `theta` at a fixed sample size.
pub trait LambdaField: Sync {
    fn family(&self) -> &dyn ModelFamily;
    fn at(&self, theta: &[f64]) -> Result<LambdaArrays>;
    /// True when the field carries sampling noise.
    fn noisy(&self) -> bool {
        false
    }
    /// An independent copy of a noisy field, for spread estimates.
    fn independent(&self, _k: u64) -> Option<Box<dyn LambdaField + '_>> {
        None
    }
}

pub struct AnalyticField<'a> {
    pub family: &'a dyn ModelFamily,
    pub n: usize,
}

impl LambdaField for AnalyticField<'_> {
    fn family(&self) -> &dyn ModelFamily {
        self.family
    }

    fn at(&self, theta: &[f64]) -> Result<LambdaArrays> {
        analytic_lambda(self.family, theta, self.n)
    }
}

/// Monte Carlo field; every `theta` reuses the same stream, so differences
/// across a stencil are common-random-number differences.
pub struct MonteCarloField<'a> {
    pub family: &'a dyn ModelFamily,
    pub n: usize,
    pub reps: usize,
    pub stream: Stream,
}

impl LambdaField for MonteCarloField<'_> {
    fn family(&self) -> &dyn ModelFamily {
        self.family
    }

    fn at(&self, theta: &[f64]) -> Result<LambdaArrays> {
        let p = ParameterPoint::new(self.family, theta.to_vec())?;
        monte_carlo_lambda(self.family, &p, self.n, self.reps, self.stream)
    }

    fn noisy(&self) -> bool {
        true
    }

    fn independent(&self, k: u64) -> Option<Box<dyn LambdaField + '_>> {
        Some(Box::new(MonteCarloField {
            family: self.family,
            n: self.n,
            reps: self.reps,
            stream: self.stream.fork(&format!("independent-{k}")),
        }))
    }
}

/// Frequentist mean of `R(psi)` to error `O(n^-3/2)`.
pub fn mu_f(a: &LambdaArrays) -> f64 {
    let c = col(&a.lambda_up_rs);
    let e = a.eta;
    let s = &a.lambda_rs_slash_t;
    -0.5 * e * t3_v_m(&a.lambda_rst, &c, &a.lambda_up_rs) - e.powi(3) * t3_vvv(&a.lambda_rst, &c) / 6.0
        + e * t3_v_m(s, &c, &a.lambda_up_rs)
        + 0.5 * e.powi(3) * t3_vvv(s, &c)
}

/// Frequentist expectation of `R(psi)^2` minus one.
pub fn a_f(a: &LambdaArrays) -> Result<f64> {
    let rst_u = a.lambda_rst_slash_u.as_ref().ok_or(Error::Missing("lambda_{rst/u}"))?;
    let rt_su = a.lambda_rt_slash_su.as_ref().ok_or(Error::Missing("lambda_{rt/su}"))?;
    let d = a.dim();
    let mut q = Tensor::zeros(d, 4);
    for r in 0..d {
        for s in 0..d {
            for t in 0..d {
                for u in 0..d {
                    let v = 0.25 * a.lambda_rstu.at4(r, s, t, u) - rst_u.at4(r, s, t, u) + rt_su.at4(r, t, s, u);
                    q.set(&[r, s, t, u], v);
                }
            }
        }
    }
    let (l, v) = (&a.lambda_up_rs, &a.nu_up_rs);
    let (x, sl) = (&a.lambda_rst, &a.lambda_rs_slash_t);
    let t1 = quad(l, l, &q) - quad(v, v, &q);
    let pa = |m: &Matrix| 0.25 * pair_a(m, m, m, x, x) - pair_a(m, m, m, x, sl) + pair_a(m, m, m, sl, sl);
    let pb = |m: &Matrix| pair_b(m, m, m, x, x) / 6.0 - pair_b(m, m, m, x, sl) + pair_b(m, m, m, sl, sl);
    Ok(t1 - (pa(l) - pa(v)) - (pb(l) - pb(v)))
}

/// Step for differencing a smooth field along coordinate `k`: the
/// `max(|x|, 1) * c` rule, relative to `|x|` for positive coordinates
/// below one.
fn field_step(family: &dyn ModelFamily, k: usize, x: f64, c: f64) -> f64 {
    if family.positive()[k] {
        x.abs().min(x.abs().max(1.0)) * c
    } else {
        x.abs().max(1.0) * c
    }
}

fn shifted(theta: &[f64], k: usize, h: f64) -> Vec<f64> {
    let mut t = theta.to_vec();
    t[k] += h;
    t
}

fn require_domain(family: &dyn ModelFamily, points: &[Vec<f64>]) -> Result<()> {
    match points.iter().find(|p| !family.in_domain(p)) {
        Some(p) => Err(Error::Stencil { theta: p.clone() }),
        None => Ok(()),
    }
}

/// Gradient of `mu_F` by central differences of the field.
pub fn mu_f_gradient(field: &dyn LambdaField, theta: &[f64]) -> Result<Vec<f64>> {
    let family = field.family();
    let c = central_step(field);
    (0..theta.len())
        .map(|k| {
            let h = field_step(family, k, theta[k], c);
            let (up, dn) = (shifted(theta, k, h), shifted(theta, k, -h));
            require_domain(family, &[up.clone(), dn.clone()])?;
            Ok((mu_f(&field.at(&up)?) - mu_f(&field.at(&dn)?)) / (2.0 * h))
        })
        .collect()
}

fn central_step(field: &dyn LambdaField) -> f64 {
    if field.noisy() {
        1e-3
    } else {
        f64::EPSILON.powf(1.0 / 3.0)
    }
}

/// `1 + a_F + 2 eta mu_{F/r} lambda^r1 - mu_F^2`.
pub fn sigma2_f(a: &LambdaArrays, mu_f_grad: &[f64]) -> Result<f64> {
    let c = col(&a.lambda_up_rs);
    let g: f64 = mu_f_grad.iter().zip(&c).map(|(x, y)| x * y).sum();
    let m = mu_f(a);
    Ok(1.0 + a_f(a)? + 2.0 * a.eta * g - m * m)
}

/// Both sides of the first-order condition at one point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WelchPeers {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// `eta d log pi / d theta^r lambda^r1 + sum_r d(eta lambda^r1) / d theta^r`.
pub fn welch_peers_residual(field: &dyn LambdaField, prior: &dyn Prior, theta: &[f64]) -> Result<WelchPeers> {
    let family = field.family();
    let a = field.at(theta)?;
    let p = prior.ratio1(theta);
    let c = col(&a.lambda_up_rs);
    let lhs = a.eta * p.iter().zip(&c).map(|(x, y)| x * y).sum::<f64>();
    let step = central_step(field);
    let mut div = 0.0;
    for r in 0..theta.len() {
        let h = field_step(family, r, theta[r], step);
        let (up, dn) = (shifted(theta, r, h), shifted(theta, r, -h));
        require_domain(family, &[up.clone(), dn.clone()])?;
        let (au, ad) = (field.at(&up)?, field.at(&dn)?);
        div += (au.eta * au.lambda_up_rs[(r, 0)] - ad.eta * ad.lambda_up_rs[(r, 0)]) / (2.0 * h);
    }
    let rhs = -div;
    Ok(WelchPeers {
        lhs,
        rhs,
        residual: lhs - rhs,
    })
}

/// Left side of the second-order condition divided by `pi(theta)`.
///
/// First derivatives use five-point stencils; second derivatives use the
/// five-point rule on the diagonal and nested five-point first differences
/// off it.
pub fn second_order_residual(field: &dyn LambdaField, prior: &dyn Prior, theta: &[f64]) -> Result<f64> {
    let family = field.family();
    let d = theta.len();
    let lp0 = prior.log_pi(theta);
    // pi-weighted vector V^r and matrix P^rs at a point
    let parts = |t: &[f64]| -> Result<(Vec<f64>, Matrix)> {
        let a = field.at(t)?;
        let w = (prior.log_pi(t) - lp0).exp();
        let (tau, nu) = (&a.tau_up_rs, &a.nu_up_rs);
        let mut v = vec![0.0; d];
        for (r, vr) in v.iter_mut().enumerate() {
            let mut s_sum = 0.0;
            for s in 0..d {
                let coef = nu[(r, s)] + tau[(r, s)] / 3.0;
                if coef == 0.0 {
                    continue;
                }
                let mut inner = 0.0;
                for tt in 0..d {
                    for u in 0..d {
                        inner += tau[(tt, u)] * a.lambda_rst.at3(s, tt, u);
                    }
                }
                s_sum += coef * inner;
            }
            *vr = w * s_sum;
        }
        Ok((v, tau * w))
    };
    let c1 = if field.noisy() { 1e-2 } else { f64::EPSILON.powf(1.0 / 5.0) };
    let c2 = if field.noisy() { 2e-2 } else { 1e-3 };
    let mut total = 0.0;
    for r in 0..d {
        let h = field_step(family, r, theta[r], c1);
        let pts: Vec<Vec<f64>> = [-2.0, -1.0, 1.0, 2.0].iter().map(|m| shifted(theta, r, m * h)).collect();
        require_domain(family, &pts)?;
        let vals: Vec<f64> = pts.iter().map(|p| parts(p).map(|x| x.0[r])).collect::<Result<_>>()?;
        total += (vals[0] - 8.0 * vals[1] + 8.0 * vals[2] - vals[3]) / (12.0 * h);
    }
    let five = [(-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0)];
    for r in 0..d {
        let hr = field_step(family, r, theta[r], c2);
        for s in 0..d {
            let hs = field_step(family, s, theta[s], c2);
            if r == s {
                let pts: Vec<Vec<f64>> = [-2.0, -1.0, 1.0, 2.0].iter().map(|m| shifted(theta, r, m * hr)).collect();
                require_domain(family, &pts)?;
                let f = |p: &[f64]| parts(p).map(|x| x.1[(r, r)]);
                let (m2, m1, p1, p2, c) = (f(&pts[0])?, f(&pts[1])?, f(&pts[2])?, f(&pts[3])?, f(theta)?);
                total += (-m2 + 16.0 * m1 - 30.0 * c + 16.0 * p1 - p2) / (12.0 * hr * hr);
            } else {
                let mut acc = 0.0;
                for &(a, wa) in &five {
                    for &(b, wb) in &five {
                        let p = shifted(&shifted(theta, r, a * hr), s, b * hs);
                        require_domain(family, std::slice::from_ref(&p))?;
                        acc += wa * wb * parts(&p)?.1[(r, s)];
                    }
                }
                total += acc / (144.0 * hr * hs);
            }
        }
    }
    Ok(total)
}

/// `f(theta)`: the observed-array formula for `mu_B` evaluated at an
/// arbitrary `theta` for a fixed sample.
pub fn eval_f_theta(family: &dyn ModelFamily, sample: &Sample, prior: &dyn Prior, theta: &[f64]) -> Result<f64> {
    let t = ParameterPoint::new(family, theta.to_vec())?;
    let d = loglik_derivs(family, &t, sample, 4)?;
    let hat = HatArrays::new(&d, Some(prior), theta)?;
    mu_b(&hat)
}

pub const ANALYTIC_TOL: f64 = 1e-5;
const SPREAD_COPIES: u64 = 5;

fn spread(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}
/// Absolute tolerance for the first-order residual with analytic fields.
pub const WP_TOL: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchingReport {
    pub theta: Vec<f64>,
    pub wp_residual: f64,
    pub wp_lhs: f64,
    pub wp_rhs: f64,
    /// `None` when only the first-order condition was requested.
    pub so_residual: Option<f64>,
    #[serde(rename = "mu_F")]
    pub mu_f: f64,
    #[serde(rename = "a_F")]
    pub a_f: f64,
    #[serde(rename = "sigma2_F")]
    pub sigma2_f: f64,
    /// Spread of the residuals over independent copies of a Monte Carlo field.
    pub wp_se: Option<f64>,
    pub so_se: Option<f64>,
    /// Set when the second-order residual was evaluated at a point where
    /// the first-order condition fails.
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MatchingSummary {
    pub family: String,
    pub prior: String,
    pub n: usize,
    pub order: u8,
    pub rows: Vec<MatchingReport>,
    pub passes_first_order: bool,
    pub passes_second_order: Option<bool>,
}

/// Default 3x3 grid: factors {1/2, 1, 2} on positive coordinates and
/// offsets {-1, 0, 1} on the others, around `reference`.
pub fn default_grid(family: &dyn ModelFamily, reference: &[f64]) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = reference
        .iter()
        .zip(family.positive())
        .map(|(&x, pos)| if pos { vec![x / 2.0, x, 2.0 * x] } else { vec![x - 1.0, x, x + 1.0] })
        .collect();
    let mut grid = vec![vec![]];
    for axis in axes {
        grid = grid
            .into_iter()
            .flat_map(|g| {
                axis.iter().map(move |&x| {
                    let mut h = g.clone();
                    h.push(x);
                    h
                })
            })
            .collect();
    }
    grid
}

/// One report row per grid point; a prior passes an order only when every
/// point passes.
pub fn match_check(
    field: &dyn LambdaField,
    n: usize,
    prior: &dyn Prior,
    grid: &[Vec<f64>],
    order: u8,
) -> Result<MatchingSummary> {
    if !(order == 1 || order == 2) {
        return Err(Error::Config(format!("matching order must be 1 or 2, got {order}")));
    }
    let rows: Vec<MatchingReport> = grid
        .par_iter()
        .map(|theta| -> Result<MatchingReport> {
            let a = field.at(theta)?;
            let wp = welch_peers_residual(field, prior, theta)?;
            let grad = mu_f_gradient(field, theta)?;
            let so = if order == 2 {
                Some(second_order_residual(field, prior, theta)?)
            } else {
                None
            };
            let (wp_se, so_se) = if field.noisy() {
                let mut wps = Vec::new();
                let mut sos = Vec::new();
                for k in 0..SPREAD_COPIES {
                    let f = field.independent(k).ok_or(Error::Missing("independent Monte Carlo field"))?;
                    wps.push(welch_peers_residual(f.as_ref(), prior, theta)?.residual);
                    if order == 2 {
                        sos.push(second_order_residual(f.as_ref(), prior, theta)?);
                    }
                }
                (Some(spread(&wps)), (order == 2).then(|| spread(&sos)))
            } else {
                (None, None)
            };
            let wp_tol = wp_se.map_or(WP_TOL, |s| 4.0 * s);
            let warning = (order == 2 && wp.residual.abs() > wp_tol)
                .then(|| format!("first-order residual {:.3e} exceeds {wp_tol:.3e}", wp.residual));
            Ok(MatchingReport {
                theta: theta.clone(),
                wp_residual: wp.residual,
                wp_lhs: wp.lhs,
                wp_rhs: wp.rhs,
                so_residual: so,
                mu_f: mu_f(&a),
                a_f: a_f(&a)?,
                sigma2_f: sigma2_f(&a, &grad)?,
                wp_se,
                so_se,
                warning,
            })
        })
        .collect::<Result<_>>()?;
    let passes_first_order = rows
        .iter()
        .all(|r| r.wp_residual.abs() <= r.wp_se.map_or(WP_TOL, |s| 4.0 * s));
    let passes_second_order = (order == 2).then(|| {
        rows.iter().all(|r| {
            let tol = r.so_se.map_or(ANALYTIC_TOL, |s| 4.0 * s);
            r.so_residual.map_or(false, |v| v.abs() <= tol)
        })
    });
    Ok(MatchingSummary {
        family: field.family().key(),
        prior: prior.label(),
        n,
        order,
        rows,
        passes_first_order,
        passes_second_order,
    })
}

#[cfg(test)]
mod tests;
