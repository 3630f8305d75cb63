//! Marginal posterior of the interest parameter: the Laplace approximation,
//! the Bayesian moments of `R(psi)`, signed-root quantiles and a quadrature
//! oracle for the exact posterior.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contract::{col, m_m, pair_a, pair_b, quad, t3_mm_p, t3_v_m, t3_vvv};
use crate::error::{Error, Result};
use crate::lambda::{negdef_inverse, HatArrays};
use crate::likelihood::{fit_constrained, Profile};
use crate::model::{ModelFamily, Prior};
use crate::quadrature::{chebyshev_points, gauss_legendre, solve_increasing, Chebyshev};
use crate::special::normal_quantile;
use crate::tensor::Matrix;

/// `log det(-L_phi_phi)` of the nuisance block at `theta`.
fn nuisance_logdet(family: &dyn ModelFamily, y: &[f64], theta: &[f64]) -> Result<f64> {
    let q = theta.len() - 1;
    if q == 0 {
        return Ok(0.0);
    }
    let d = family.loglik_derivs_unchecked(theta, y, 2);
    let block = d.second.view((1, 1), (q, q)).into_owned();
    negdef_inverse(&block).map_err(|_| Error::Curvature { psi: theta[0] })?;
    Ok((-block).determinant().ln())
}

/// Unnormalised Laplace log marginal posterior `B(psi) + M(psi) - M(psi_hat)`.
pub fn laplace_log_posterior(profile: &Profile, prior: &dyn Prior, psi: f64) -> Result<f64> {
    let (phi, m) = profile.constrained(psi)?;
    let mut theta = vec![psi];
    theta.extend_from_slice(&phi);
    let hat = &profile.fit.theta_hat;
    if theta == *hat {
        return Ok(0.0);
    }
    let y = profile.sample.values();
    let ld = nuisance_logdet(profile.family, y, &theta)?;
    let ld_hat = nuisance_logdet(profile.family, y, hat)?;
    let b = -0.5 * (ld - ld_hat) + prior.log_pi(&theta) - prior.log_pi(hat);
    Ok(b + m - profile.fit.loglik_at_hat)
}

fn prior_first(hat: &HatArrays) -> Result<&[f64]> {
    hat.pi_r.as_deref().ok_or(Error::Missing("prior first derivatives"))
}

/// Posterior mean of `R(psi)` to error `O(n^-1)`.
///
/// The middle index pair of the first term is contracted with `L^st`.
pub fn mu_b(hat: &HatArrays) -> Result<f64> {
    let p = prior_first(hat)?;
    let c = col(&hat.l_up_rs);
    let h = hat.h;
    let pc: f64 = p.iter().zip(&c).map(|(a, b)| a * b).sum();
    Ok(-0.5 * h * t3_v_m(&hat.l_rst, &c, &hat.l_up_rs) - h.powi(3) * t3_vvv(&hat.l_rst, &c) / 6.0 + h * pc)
}

/// Posterior expectation of `R(psi)^2` minus one, to error `O(n^-3/2)`.
pub fn a_b(hat: &HatArrays) -> Result<f64> {
    let p = prior_first(hat)?;
    let p2 = hat.pi_rs.as_ref().ok_or(Error::Missing("prior second derivatives"))?;
    let (l, v) = (&hat.l_up_rs, &hat.v_up_rs);
    let (x3, x4) = (&hat.l_rst, &hat.l_rstu);
    let t1 = 0.25 * (quad(l, l, x4) - quad(v, v, x4));
    let t2 = -0.25 * (pair_a(l, l, l, x3, x3) - pair_a(v, v, v, x3, x3));
    let t3 = -(pair_b(l, l, l, x3, x3) - pair_b(v, v, v, x3, x3)) / 6.0;
    let t4 = t3_mm_p(l, l, x3, p) - t3_mm_p(v, v, x3, p);
    let t5 = -(m_m(l, p2) - m_m(v, p2));
    Ok(t1 + t2 + t3 + t4 + t5)
}

pub fn sigma2_b(mu_b: f64, a_b: f64) -> f64 {
    1.0 + a_b - mu_b * mu_b
}

/// Interest value with `R(psi) = mu_b + z_{1-level}`, i.e. the approximate
/// posterior quantile at probability `level`.
pub fn refined_quantile(profile: &Profile, mu_b: f64, level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Config(format!("quantile level {level} outside (0, 1)")));
    }
    let target = mu_b - normal_quantile(level);
    let psi_hat = profile.psi_hat();
    if target == 0.0 {
        return Ok(psi_hat);
    }
    let log = profile.family.positive()[0];
    let se = profile.se_psi()?;
    let (x0, sx) = if log { (psi_hat.ln(), se / psi_hat) } else { (psi_hat, se) };
    let map = |x: f64| if log { x.exp() } else { x };
    // R decreases in psi, so a negative target lies above psi_hat.
    let dir = if target < 0.0 { 1.0 } else { -1.0 };
    let r_at = |x: f64| profile.signed_root(map(x)).map(|p| p.r);
    let mut near = x0;
    let mut far = None;
    let mut step = sx * target.abs().max(0.5);
    for _ in 0..60 {
        let x = x0 + dir * step;
        let ok = profile.family.in_domain(&{
            let mut t = vec![map(x)];
            t.extend_from_slice(profile.phi_hat());
            t
        });
        if !ok {
            break;
        }
        match r_at(x) {
            Ok(r) if (r - target) * dir <= 0.0 => {
                far = Some(x);
                break;
            }
            Ok(_) => near = x,
            Err(_) => break,
        }
        step *= 1.6;
    }
    let far = far.ok_or_else(|| {
        Error::Bracket(format!("R(psi) does not reach {target:.6} beyond psi = {:.6}", map(near)))
    })?;
    let (lo, hi) = if dir > 0.0 { (near, far) } else { (far, near) };
    let mut failure = None;
    let x = solve_increasing(
        |x| match r_at(x) {
            Ok(r) => -r,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        -target,
        lo,
        hi,
        0.0,
        1e-10,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let x = x.ok_or_else(|| Error::Bracket("signed root not monotone on the bracket".into()))?;
    let r = r_at(x)?;
    if (r - target).abs() > 1e-9 {
        // R jumps across the target when the constrained maximiser switches
        // between modes; the quantile of the monotone approximate posterior
        // cdf is then the jump itself.
        let d = 1e-9 * sx.max(x.abs());
        let (below, above) = (r_at(x - d)?, r_at(x + d)?);
        if !(below > target && above < target) {
            return Err(Error::Bracket(format!("|R - target| = {:.3e} at the root", (r - target).abs())));
        }
    }
    Ok(map(x))
}

/// How a single posterior quantile is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum QuantileMethod {
    /// Exact marginal posterior by quadrature.
    Quadrature,
    /// Signed-root quantile shifted by the Laplace `mu_B`.
    Refined,
}

/// Posterior quantile of the interest parameter at probability `level`.
pub fn posterior_quantile(profile: &Profile, prior: &dyn Prior, level: f64, method: QuantileMethod) -> Result<f64> {
    match method {
        QuantileMethod::Refined => {
            let mu = mu_b(&profile.hat(Some(prior))?)?;
            refined_quantile(profile, mu, level)
        }
        QuantileMethod::Quadrature => {
            let opts = QuadOptions {
                check: false,
                with_r: false,
                ..QuadOptions::default()
            };
            marginal_posterior(profile, prior, opts)?.quantile(level)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PosteriorMethod {
    #[serde(rename = "laplace-expansion")]
    LaplaceExpansion,
    #[serde(rename = "quadrature-oracle")]
    QuadratureOracle,
}

/// Moments of `R(psi)` under the posterior and quantiles of `psi`.
///
/// Quantiles are keyed by probability level; the oracle answers any level.
#[derive(Clone, Debug, Serialize)]
pub struct PosteriorSummary {
    pub method: PosteriorMethod,
    #[serde(rename = "mu_B")]
    pub mu_b: f64,
    #[serde(rename = "a_B")]
    pub a_b: f64,
    #[serde(rename = "sigma2_B")]
    pub sigma2_b: f64,
    pub quantiles: Vec<(f64, f64)>,
    #[serde(skip)]
    oracle: Option<Arc<MarginalPosterior>>,
}

impl PosteriorSummary {
    pub fn quantile(&self, level: f64) -> Option<f64> {
        if let Some(o) = &self.oracle {
            return o.quantile(level).ok();
        }
        self.quantiles.iter().find(|(l, _)| (l - level).abs() < 1e-12).map(|q| q.1)
    }

    pub fn oracle(&self) -> Option<&MarginalPosterior> {
        self.oracle.as_deref()
    }
}

/// Laplace-expansion summary: closed-form moments and signed-root quantiles.
pub fn laplace_summary(profile: &Profile, prior: &dyn Prior, levels: &[f64]) -> Result<PosteriorSummary> {
    let hat = profile.hat(Some(prior))?;
    let mu = mu_b(&hat)?;
    let a = a_b(&hat)?;
    let quantiles = levels
        .iter()
        .map(|&l| refined_quantile(profile, mu, l).map(|q| (l, q)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSummary {
        method: PosteriorMethod::LaplaceExpansion,
        mu_b: mu,
        a_b: a,
        sigma2_b: sigma2_b(mu, a),
        quantiles,
        oracle: None,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct QuadOptions {
    /// Gauss-Legendre nodes per nuisance axis; the interest axis uses this
    /// many Chebyshev intervals.
    pub nodes: usize,
    /// Recompute with doubled node counts and require agreement.
    pub check: bool,
    /// Track `R(psi)` for its posterior moments.
    pub with_r: bool,
    /// Half-width of the initial box in observed-information SDs.
    pub width: f64,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions {
            nodes: 120,
            check: true,
            with_r: true,
            width: 10.0,
        }
    }
}

const CHECK_TOL: f64 = 1e-6;
const EDGE_TOL: f64 = 1e-14;
const NUISANCE_WIDTH: f64 = 20.0;

/// Exact marginal posterior of the interest parameter on a Chebyshev grid.
///
/// The interest axis is `u = u_hat + s sinh(t)`, with `u = log psi` for
/// positive parameters; `density` and `cdf` are series in `t`.
#[derive(Debug, Clone)]
pub struct MarginalPosterior {
    log: bool,
    center: f64,
    scale: f64,
    t_max: f64,
    density: Chebyshev,
    cdf: Chebyshev,
    pub mean_r: Option<f64>,
    pub var_r: Option<f64>,
    pub nodes: usize,
}

impl MarginalPosterior {
    fn psi_of(&self, t: f64) -> f64 {
        let u = self.center + self.scale * t.sinh();
        if self.log {
            u.exp()
        } else {
            u
        }
    }

    fn t_of(&self, psi: f64) -> f64 {
        let u = if self.log { psi.ln() } else { psi };
        ((u - self.center) / self.scale).asinh()
    }

    /// Posterior probability of `(-inf, psi]`.
    pub fn cdf(&self, psi: f64) -> f64 {
        if self.log && psi <= 0.0 {
            return 0.0;
        }
        let t = self.t_of(psi);
        if t <= -self.t_max {
            0.0
        } else if t >= self.t_max {
            1.0
        } else {
            self.cdf.eval(t).clamp(0.0, 1.0)
        }
    }

    /// Posterior density of `psi`.
    pub fn density(&self, psi: f64) -> f64 {
        let t = self.t_of(psi);
        if t.abs() >= self.t_max {
            return 0.0;
        }
        let du = self.scale * t.cosh();
        let dpsi = if self.log { du * psi } else { du };
        self.density.eval(t).max(0.0) / dpsi
    }

    pub fn quantile(&self, level: f64) -> Result<f64> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::Config(format!("quantile level {level} outside (0, 1)")));
        }
        let t = solve_increasing(|t| self.cdf.eval(t), level, -self.t_max, self.t_max, 1e-14, 1e-15)
            .ok_or_else(|| Error::Quadrature(format!("level {level} not bracketed by the marginal cdf")))?;
        Ok(self.psi_of(t))
    }
}

struct Coords {
    positive: Vec<bool>,
}

impl Coords {
    fn to_u(&self, theta: &[f64]) -> Vec<f64> {
        theta.iter().zip(&self.positive).map(|(x, &p)| if p { x.ln() } else { *x }).collect()
    }

    fn jac(&self, k: usize, x: f64) -> f64 {
        if self.positive[k] {
            x
        } else {
            1.0
        }
    }
}

struct Node {
    psi: f64,
    phi: Vec<f64>,
    m: f64,
    /// Constrained fit failed where the profile had already dropped below
    /// `TAIL_DROP`; the node carries no mass.
    tail: bool,
}

/// Drop in profile log-likelihood beyond which a failed constrained fit is
/// treated as an empty tail node. The profile is unimodal, so the missing
/// value lies below its inward neighbour.
const TAIL_DROP: f64 = 40.0;

/// Constrained fits along the grid, walking outwards from the node nearest
/// the centre with warm starts.
fn walk_constrained(profile: &Profile, psis: &[f64]) -> Result<Vec<Node>> {
    let n = psis.len();
    let psi_hat = profile.psi_hat();
    let mid = (0..n)
        .min_by(|&a, &b| (psis[a] - psi_hat).abs().partial_cmp(&(psis[b] - psi_hat).abs()).unwrap())
        .unwrap();
    let mut out: Vec<Option<Node>> = (0..n).map(|_| None).collect();
    let lhat = profile.fit.loglik_at_hat;
    let fit = |psi: f64, inward: Option<&Node>| -> Result<Node> {
        if psi == psi_hat {
            return Ok(Node {
                psi,
                phi: profile.phi_hat().to_vec(),
                m: lhat,
                tail: false,
            });
        }
        let start = inward.map_or(profile.phi_hat(), |n| &n.phi);
        match fit_constrained(profile.family, profile.sample, psi, start)
            .or_else(|_| fit_constrained(profile.family, profile.sample, psi, profile.phi_hat()))
        {
            Ok((phi, m)) => Ok(Node {
                psi,
                phi,
                m,
                tail: false,
            }),
            Err(e) => match inward {
                Some(n) if n.m - lhat < -TAIL_DROP => Ok(Node {
                    psi,
                    phi: n.phi.clone(),
                    m: n.m,
                    tail: true,
                }),
                _ => Err(e),
            },
        }
    };
    out[mid] = Some(fit(psis[mid], None)?);
    for i in (0..mid).rev() {
        let node = fit(psis[i], out[i + 1].as_ref())?;
        out[i] = Some(node);
    }
    for i in mid + 1..n {
        let node = fit(psis[i], out[i - 1].as_ref())?;
        out[i] = Some(node);
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

struct GridValues {
    g: Vec<f64>,
    r: Vec<f64>,
}

struct Setup<'p, 'a> {
    profile: &'p Profile<'a>,
    prior: &'p dyn Prior,
    coords: Coords,
    center: f64,
    scale: f64,
    log_norm: f64,
}

impl Setup<'_, '_> {
    fn psi_of(&self, t: f64) -> f64 {
        let u = self.center + self.scale * t.sinh();
        if self.coords.positive[0] {
            u.exp()
        } else {
            u
        }
    }

    fn evaluate(&self, ts: &[f64], nuis_nodes: usize, with_r: bool) -> Result<GridValues> {
        let family = self.profile.family;
        let y = self.profile.sample.values();
        let psis: Vec<f64> = ts.iter().map(|&t| self.psi_of(t)).collect();
        if psis.iter().any(|p| !p.is_finite() || (self.coords.positive[0] && *p <= 0.0)) {
            return Err(Error::Quadrature("interest grid left the parameter domain".into()));
        }
        let nodes = walk_constrained(self.profile, &psis)?;
        let q = family.dim() - 1;
        let rule = gauss_legendre(nuis_nodes);
        let a = NUISANCE_WIDTH.asinh();
        let taus = rule.mapped(-a, a);
        let lhat = self.profile.fit.loglik_at_hat;
        let g: Vec<f64> = nodes
            .par_iter()
            .zip(ts.par_iter())
            .map(|(node, &t)| -> Result<f64> {
                if node.tail {
                    return Ok(0.0);
                }
                let mut theta = vec![node.psi];
                theta.extend_from_slice(&node.phi);
                // nuisance scales in working coordinates at the conditional mode
                let scales: Vec<f64> = if q == 0 {
                    vec![]
                } else {
                    let d = family.loglik_derivs_unchecked(&theta, y, 2);
                    let hu = Matrix::from_fn(q, q, |i, j| {
                        d.second[(i + 1, j + 1)]
                            * self.coords.jac(i + 1, theta[i + 1])
                            * self.coords.jac(j + 1, theta[j + 1])
                    });
                    let cov = negdef_inverse(&hu).map_err(|_| Error::Curvature { psi: node.psi })?;
                    (0..q).map(|i| (-cov[(i, i)]).sqrt()).collect()
                };
                let centre = self.coords.to_u(&theta);
                let total = q as u32;
                let count = taus.len().pow(total);
                let mut sum = 0.0;
                let mut th = theta.clone();
                for idx in 0..count {
                    let mut w = 1.0;
                    let mut rest = idx;
                    for k in 0..q {
                        let (tau, wt) = taus[rest % taus.len()];
                        rest /= taus.len();
                        let u = centre[k + 1] + scales[k] * tau.sinh();
                        let x = if self.coords.positive[k + 1] { u.exp() } else { u };
                        th[k + 1] = x;
                        w *= wt * scales[k] * tau.cosh() * self.coords.jac(k + 1, x);
                    }
                    if !family.in_domain(&th) {
                        continue;
                    }
                    let lp = family.loglik(&th, y) + self.prior.log_pi(&th) - self.log_norm;
                    let v = lp.exp();
                    if v.is_finite() {
                        sum += w * v;
                    }
                }
                let du = self.scale * t.cosh();
                let dpsi = if self.coords.positive[0] { du * node.psi } else { du };
                Ok(sum * dpsi)
            })
            .collect::<Result<Vec<f64>>>()?;
        let r = if with_r {
            let psi_hat = self.profile.psi_hat();
            nodes
                .iter()
                .map(|node| {
                    let w = (2.0 * (lhat - node.m)).max(0.0);
                    if node.psi > psi_hat {
                        -w.sqrt()
                    } else {
                        w.sqrt()
                    }
                })
                .collect()
        } else {
            vec![]
        };
        Ok(GridValues { g, r })
    }
}

fn assemble(setup: &Setup, t_max: f64, vals: &GridValues, nodes: usize) -> Result<MarginalPosterior> {
    let dens = Chebyshev::interpolate(-t_max, t_max, &vals.g);
    let z = dens.total();
    if !(z.is_finite() && z > 0.0) {
        return Err(Error::Quadrature(format!("posterior mass {z} is not positive and finite")));
    }
    let normed: Vec<f64> = vals.g.iter().map(|v| v / z).collect();
    let density = Chebyshev::interpolate(-t_max, t_max, &normed);
    let cdf = density.integral();
    let (mean_r, var_r) = if vals.r.is_empty() {
        (None, None)
    } else {
        let gr: Vec<f64> = normed.iter().zip(&vals.r).map(|(g, r)| g * r).collect();
        let gr2: Vec<f64> = normed.iter().zip(&vals.r).map(|(g, r)| g * r * r).collect();
        let m = Chebyshev::interpolate(-t_max, t_max, &gr).total();
        let m2 = Chebyshev::interpolate(-t_max, t_max, &gr2).total();
        (Some(m), Some(m2 - m * m))
    };
    Ok(MarginalPosterior {
        log: setup.coords.positive[0],
        center: setup.center,
        scale: setup.scale,
        t_max,
        density,
        cdf,
        mean_r,
        var_r,
        nodes,
    })
}

/// Exact posterior by quadrature of `exp{L(theta)} pi(theta)`.
pub fn marginal_posterior(profile: &Profile, prior: &dyn Prior, opts: QuadOptions) -> Result<MarginalPosterior> {
    let family = profile.family;
    if family.dim() > 3 {
        return Err(Error::Dimension(format!("quadrature oracle needs at most 3 parameters, got {}", family.dim())));
    }
    let coords = Coords {
        positive: family.positive(),
    };
    let hat = &profile.fit.theta_hat;
    let se = profile.se_psi()?;
    let (center, scale) = if coords.positive[0] {
        (hat[0].ln(), se / hat[0])
    } else {
        (hat[0], se)
    };
    let log_norm = profile.fit.loglik_at_hat + prior.log_pi(hat);
    let setup = Setup {
        profile,
        prior,
        coords,
        center,
        scale,
        log_norm,
    };
    let mut t_max = opts.width.asinh();
    let n = opts.nodes;
    let vals = loop {
        let ts = chebyshev_points(n, -t_max, t_max);
        let vals = setup.evaluate(&ts, n, opts.with_r)?;
        let peak = vals.g.iter().cloned().fold(0.0, f64::max);
        let edge = vals.g[0].max(vals.g[n]);
        if edge <= EDGE_TOL * peak {
            break vals;
        }
        if t_max > 14.0 {
            return Err(Error::Quadrature(format!(
                "posterior mass does not decay: edge/peak = {:.3e} at {} SDs",
                edge / peak,
                t_max.sinh()
            )));
        }
        t_max += 0.75;
    };
    let coarse = assemble(&setup, t_max, &vals, n)?;
    if !opts.check {
        return Ok(coarse);
    }
    let ts = chebyshev_points(2 * n, -t_max, t_max);
    let fine_vals = setup.evaluate(&ts, 2 * n, opts.with_r)?;
    let fine = assemble(&setup, t_max, &fine_vals, 2 * n)?;
    let mut trace = Vec::new();
    for level in [0.025, 0.05, 0.5, 0.95, 0.975] {
        let (a, b) = (coarse.quantile(level)?, fine.quantile(level)?);
        let post_se = se.max(f64::MIN_POSITIVE);
        if (a - b).abs() > CHECK_TOL * post_se {
            trace.push(format!("quantile({level}): {a} -> {b}"));
        }
    }
    if let (Some(a), Some(b)) = (coarse.mean_r, fine.mean_r) {
        if (a - b).abs() > CHECK_TOL {
            trace.push(format!("E[R]: {a} -> {b}"));
        }
    }
    if let (Some(a), Some(b)) = (coarse.var_r, fine.var_r) {
        if (a - b).abs() > CHECK_TOL {
            trace.push(format!("Var[R]: {a} -> {b}"));
        }
    }
    if !trace.is_empty() {
        return Err(Error::Quadrature(format!(
            "doubling {n} -> {} nodes changed the result: {}",
            2 * n,
            trace.join("; ")
        )));
    }
    Ok(fine)
}

/// Oracle summary: `mu_B` and `sigma2_B` are the exact posterior mean and
/// variance of `R(psi)`, and `a_B = E[R^2] - 1`.
pub fn quadrature_posterior(
    profile: &Profile,
    prior: &dyn Prior,
    levels: &[f64],
    opts: QuadOptions,
) -> Result<PosteriorSummary> {
    let opts = QuadOptions { with_r: true, ..opts };
    let post = marginal_posterior(profile, prior, opts)?;
    let (m, v) = (post.mean_r.unwrap(), post.var_r.unwrap());
    let quantiles = levels
        .iter()
        .map(|&l| post.quantile(l).map(|q| (l, q)))
        .collect::<Result<Vec<_>>>()?;
    Ok(PosteriorSummary {
        method: PosteriorMethod::QuadratureOracle,
        mu_b: m,
        a_b: v + m * m - 1.0,
        sigma2_b: v,
        quantiles,
        oracle: Some(Arc::new(post)),
    })
}

#[cfg(test)]
mod tests;
