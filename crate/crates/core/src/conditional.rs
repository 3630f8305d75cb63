//! Exact inference for location-scale families given the configuration.
//!
//! With `u = (mu_hat - mu) / sigma`, `v = sigma_hat / sigma` and `w = log v`,
//! the law of `(u, w)` given `a` has density proportional to
//! `v^(n-1) prod g(u + v a_i)`. Everything is computed at the reference point
//! `(mu, sigma) = (0, 1)`, where the data are `y = u + v a`, and carried to
//! other points by equivariance.

use rand::Rng;
use rand_distr::{ChiSquared, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use crate::bayes::{posterior_quantile, QuantileMethod};
use crate::contract::{col, t3_v_m, t3_vvv};
use crate::error::{Error, Result};
use crate::lambda::{derive, Accumulator, LambdaArrays, Provenance, RawLambda};
use crate::likelihood::{FitResult, Profile};
use crate::matching::{mu_f, sigma2_f};
use crate::model::{Kernel, LocationScaleView, ModelFamily, Prior, Role, Sample};
use crate::quadrature::{adaptive_rule, gauss_legendre, solve_increasing};

const INVARIANT_TOL: f64 = 1e-8;
const CHECK_TOL: f64 = 1e-5;
const EDGE_TOL: f64 = 1e-11;
const MAX_WIDEN: usize = 8;
/// Relative error target of the adaptive inner integrals; the doubled-node
/// self-check tightens it a hundredfold.
const INNER_TOL: f64 = 1e-10;
/// Share of probability mass whose posterior may fail before coverage is
/// declared unreliable.
const FAILED_MASS_TOL: f64 = 1e-3;

/// Standardised residuals `a_i = (y_i - mu_hat) / sigma_hat`.
#[derive(Clone, Debug, Serialize)]
pub struct Configuration {
    pub a: Vec<f64>,
    pub kernel: Kernel,
    #[serde(skip)]
    pub sample: Option<Sample>,
}

impl Configuration {
    /// Checks the likelihood equations at `(0, 1)`, polishing `a` by a few
    /// Newton steps first.
    pub fn new(kernel: Kernel, a: Vec<f64>) -> Result<Self> {
        if a.len() < 3 {
            return Err(Error::SampleSize {
                n: a.len(),
                dim: 2,
                needed: 3,
            });
        }
        if a.iter().any(|x| !x.is_finite()) {
            return Err(Error::Config("non-finite configuration entry".into()));
        }
        let a = polish(kernel, a);
        let (s1, s2) = score_defects(kernel, &a);
        if s1.abs() > INVARIANT_TOL || s2.abs() > INVARIANT_TOL {
            return Err(Error::FitQuality(format!(
                "sum h'(a) = {s1:.3e}, n + sum a h'(a) = {s2:.3e}"
            )));
        }
        Ok(Configuration {
            a,
            kernel,
            sample: None,
        })
    }

    pub fn from_fit(view: LocationScaleView, sample: &Sample, fit: &FitResult) -> Result<Self> {
        let (mu, sigma) = view.physical(&fit.theta_hat);
        let a = sample.values().iter().map(|y| (y - mu) / sigma).collect();
        let mut c = Configuration::new(view.kernel, a)?;
        c.sample = Some(sample.clone());
        Ok(c)
    }

    pub fn from_sample(family: &dyn ModelFamily, sample: &Sample) -> Result<Self> {
        let view = location_scale(family)?;
        let fit = crate::likelihood::fit_mle(family, sample, None)?;
        Configuration::from_fit(view, sample, &fit)
    }

    pub fn n(&self) -> usize {
        self.a.len()
    }

    /// The sample `u + v a` with MLE `(u, v)`.
    pub fn dataset(&self, u: f64, v: f64) -> Vec<f64> {
        self.a.iter().map(|ai| u + v * ai).collect()
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        let mut s = self.a.clone();
        s.sort_by(|x, y| x.partial_cmp(y).unwrap());
        s.iter().zip(s.iter().rev()).all(|(x, y)| (x + y).abs() <= tol)
    }
}

fn location_scale(family: &dyn ModelFamily) -> Result<LocationScaleView> {
    family
        .location_scale()
        .ok_or_else(|| Error::Config(format!("{} is not a location-scale family", family.key())))
}

fn score_defects(kernel: Kernel, a: &[f64]) -> (f64, f64) {
    let mut s1 = 0.0;
    let mut s2 = a.len() as f64;
    for &x in a {
        let h1 = kernel.h_derivs(x)[1];
        s1 += h1;
        s2 += x * h1;
    }
    (s1, s2)
}

/// Newton steps on `(mu, sigma)` for the standardised sample, re-standardising
/// after each step.
fn polish(kernel: Kernel, mut a: Vec<f64>) -> Vec<f64> {
    let n = a.len() as f64;
    for _ in 0..6 {
        let (s1, s2) = score_defects(kernel, &a);
        if s1.abs().max(s2.abs()) <= 1e-13 * n {
            break;
        }
        let (mut hmm, mut hms, mut hss) = (0.0, 0.0, n);
        for &x in &a {
            let d = kernel.h_derivs(x);
            hmm += d[2];
            hms += d[2] * x + d[1];
            hss += d[2] * x * x + 2.0 * d[1] * x;
        }
        // gradient at (0, 1) is (-s1, -s2)
        let det = hmm * hss - hms * hms;
        if !(det > 0.0 && hmm < 0.0) {
            break;
        }
        let dm = (hss * s1 - hms * s2) / det;
        let ds = (hmm * s2 - hms * s1) / det;
        if !(1.0 + ds > 0.0) {
            break;
        }
        let next: Vec<f64> = a.iter().map(|x| (x - dm) / (1.0 + ds)).collect();
        let (t1, t2) = score_defects(kernel, &next);
        if t1.abs().max(t2.abs()) >= s1.abs().max(s2.abs()) {
            break;
        }
        a = next;
    }
    a
}

#[derive(Clone, Copy, Debug)]
pub struct ConditionalOptions {
    /// Gauss-Legendre nodes per axis.
    pub nodes: usize,
    /// Half-width of the box in conditional SDs.
    pub width: f64,
    /// Recompute with doubled node counts and require agreement.
    pub check: bool,
}

impl Default for ConditionalOptions {
    fn default() -> Self {
        ConditionalOptions {
            nodes: 160,
            width: 12.0,
            check: true,
        }
    }
}

/// Which coordinate the outer integral runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Outer {
    W,
    U,
}

/// The conditional law of `(u, w)` given the configuration.
///
/// Integrals are iterated, each axis on Gauss-Legendre nodes in `t` with
/// `x = centre + sd sinh(t)`, so the polynomial tails of `u` under heavy
/// tailed kernels are reached without wasting nodes near the mode.
#[derive(Clone, Debug)]
pub struct ConditionalLaw {
    pub config: Configuration,
    mode: [f64; 2],
    cov: [[f64; 2]; 2],
    log_peak: f64,
    log_norm: f64,
    /// Box half-widths in SDs: outer `w`, outer `u`, inner slice.
    width: [f64; 3],
    nodes: usize,
}

/// A sinh-mapped box `centre + sd sinh(t)`, `|t| <= half`.
///
/// `breaks` are the inner coordinates where some `u + v a_i` vanishes. Under
/// heavy-tailed kernels and large `v` the slice density has a separate bump
/// at each, so inner rules start with panels split there.
#[derive(Clone, Debug)]
struct Slice {
    centre: f64,
    sd: f64,
    half: f64,
    breaks: Vec<f64>,
}

impl Slice {
    fn at(&self, t: f64) -> f64 {
        self.centre + self.sd * t.sinh()
    }

    fn lo(&self) -> f64 {
        self.at(-self.half)
    }

    fn hi(&self) -> f64 {
        self.at(self.half)
    }

    fn t_of(&self, x: f64) -> f64 {
        ((x - self.centre) / self.sd).asinh()
    }

    fn start(&self, from: f64) -> Option<f64> {
        let t0 = if from == f64::NEG_INFINITY {
            -self.half
        } else {
            self.t_of(from).max(-self.half)
        };
        (t0 < self.half).then_some(t0)
    }

    /// Gauss-Legendre nodes `(x, weight)` on the part of the box above `from`.
    fn rule(&self, nodes: usize, from: f64) -> Vec<(f64, f64)> {
        let Some(t0) = self.start(from) else {
            return Vec::new();
        };
        gauss_legendre(nodes)
            .mapped(t0, self.half)
            .into_iter()
            .map(|(t, wt)| (self.at(t), wt * self.sd * t.cosh()))
            .collect()
    }

    /// Adaptive nodes `(x, weight)` for the density `f` above `from`.
    fn adaptive<F: Fn(f64) -> f64>(&self, f: F, from: f64, tol: f64) -> Vec<(f64, f64)> {
        let Some(t0) = self.start(from) else {
            return Vec::new();
        };
        let mut breaks: Vec<f64> = self.breaks.iter().map(|&b| self.t_of(b)).collect();
        breaks.push(0.0);
        adaptive_rule(|t| f(self.at(t)) * t.cosh(), t0, self.half, &breaks, tol)
            .into_iter()
            .map(|(t, wt)| (self.at(t), wt * self.sd * t.cosh()))
            .collect()
    }
}

impl Outer {
    fn index(self) -> usize {
        match self {
            Outer::W => 0,
            Outer::U => 1,
        }
    }
}

impl ConditionalLaw {
    pub fn new(config: Configuration, opts: ConditionalOptions) -> Result<Self> {
        let mut law = ConditionalLaw {
            config,
            mode: [0.0, 0.0],
            cov: [[1.0, 0.0], [0.0, 1.0]],
            log_peak: 0.0,
            log_norm: 0.0,
            width: [opts.width; 3],
            nodes: opts.nodes,
        };
        law.find_mode()?;
        for axis in 0..3 {
            let mut widened = 0;
            while law.edge_ratio(axis) > EDGE_TOL {
                widened += 1;
                if widened > MAX_WIDEN {
                    return Err(Error::Quadrature(format!(
                        "conditional density not negligible at {:.1} SDs",
                        law.width[axis]
                    )));
                }
                law.width[axis] *= 1.5;
            }
        }
        let full = law.nodes_outer(Outer::W, law.nodes);
        law.log_norm = full.iter().map(|x| x.2).sum::<f64>().ln();
        if opts.check {
            let a = law.moments(law.nodes);
            let b = law.moments(2 * law.nodes);
            for (x, y) in a.iter().zip(&b) {
                if (x - y).abs() > CHECK_TOL * y.abs().max(1.0) {
                    return Err(Error::Quadrature(format!(
                        "conditional moments {a:?} vs {b:?} with doubled nodes"
                    )));
                }
            }
        }
        Ok(law)
    }

    pub fn n(&self) -> usize {
        self.config.n()
    }

    /// Log of the unnormalised density in `(u, w)`.
    fn ell(&self, u: f64, w: f64) -> f64 {
        let v = w.exp();
        let k = self.config.kernel;
        let s: f64 = self.config.a.iter().map(|ai| k.h(u + v * ai)).sum();
        let l = (self.n() as f64 - 1.0) * w + s;
        if l.is_nan() {
            f64::NEG_INFINITY
        } else {
            l
        }
    }

    fn grad_hess(&self, u: f64, w: f64) -> ([f64; 2], [[f64; 2]; 2]) {
        let v = w.exp();
        let k = self.config.kernel;
        let mut g = [0.0, self.n() as f64 - 1.0];
        let mut h = [[0.0; 2]; 2];
        for &ai in &self.config.a {
            let d = k.h_derivs(u + v * ai);
            let va = v * ai;
            g[0] += d[1];
            g[1] += d[1] * va;
            h[0][0] += d[2];
            h[0][1] += d[2] * va;
            h[1][1] += d[2] * va * va + d[1] * va;
        }
        h[1][0] = h[0][1];
        (g, h)
    }

    fn find_mode(&mut self) -> Result<()> {
        let mut x = [0.0, 0.0];
        let mut f = self.ell(x[0], x[1]);
        for _ in 0..200 {
            let (g, h) = self.grad_hess(x[0], x[1]);
            if g[0].abs().max(g[1].abs()) < 1e-11 {
                break;
            }
            let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
            let mut step = if h[0][0] < 0.0 && det > 0.0 {
                [
                    -(h[1][1] * g[0] - h[0][1] * g[1]) / det,
                    -(h[0][0] * g[1] - h[0][1] * g[0]) / det,
                ]
            } else {
                [0.1 * g[0], 0.1 * g[1]]
            };
            let mut improved = false;
            for _ in 0..50 {
                let y = [x[0] + step[0], x[1] + step[1]];
                let fy = self.ell(y[0], y[1]);
                if fy.is_finite() && fy >= f {
                    x = y;
                    f = fy;
                    improved = true;
                    break;
                }
                step = [0.5 * step[0], 0.5 * step[1]];
            }
            if !improved {
                break;
            }
        }
        let (_, h) = self.grad_hess(x[0], x[1]);
        let det = h[0][0] * h[1][1] - h[0][1] * h[0][1];
        if !(h[0][0] < 0.0 && det > 0.0) {
            return Err(Error::Quadrature(format!("conditional density has no regular mode near {x:?}")));
        }
        self.mode = x;
        self.cov = [[-h[1][1] / det, h[0][1] / det], [h[0][1] / det, -h[0][0] / det]];
        self.log_peak = f;
        Ok(())
    }

    fn outer_box(&self, outer: Outer) -> Slice {
        let i = 1 - outer.index();
        Slice {
            centre: self.mode[i],
            sd: self.cov[i][i].sqrt(),
            half: self.width[outer.index()].asinh(),
            breaks: Vec::new(),
        }
    }

    /// Inner box at outer coordinate `x`, centred on the conditional mode.
    fn slice(&self, outer: Outer, x: f64) -> Slice {
        let (i, o) = match outer {
            Outer::W => (0, 1),
            Outer::U => (1, 0),
        };
        let pt = |c: f64| Self::point(outer, x, c);
        let beta = self.cov[i][o] / self.cov[o][o];
        let cond_sd = (self.cov[i][i] - beta * self.cov[i][o]).max(1e-300).sqrt();
        let fallback = match outer {
            Outer::W => cond_sd * (x - self.mode[1]).exp(),
            Outer::U => cond_sd,
        };
        let f = |c: f64| {
            let (u, w) = pt(c);
            self.ell(u, w)
        };
        // coarse search, then Newton
        let start = self.mode[i] + beta * (x - self.mode[o]);
        let mut c = start;
        let mut best = f(c);
        for k in -40..=40 {
            let y = start + 0.5 * k as f64 * fallback;
            let fy = f(y);
            if fy > best {
                best = fy;
                c = y;
            }
        }
        let mut sd = fallback;
        for _ in 0..30 {
            let (u, w) = pt(c);
            let (g, h) = self.grad_hess(u, w);
            if !(h[i][i] < 0.0) {
                break;
            }
            sd = 1.0 / (-h[i][i]).sqrt();
            let step = (-g[i] / h[i][i]).clamp(-3.0 * sd, 3.0 * sd);
            c += step;
            if step.abs() < 1e-12 * sd {
                break;
            }
        }
        if !(sd.is_finite() && sd > 0.0) {
            sd = fallback;
        }
        let breaks: Vec<f64> = self
            .config
            .a
            .iter()
            .filter_map(|&ai| match outer {
                Outer::W => Some(-x.exp() * ai),
                Outer::U => (-x / ai > 0.0).then(|| (-x / ai).ln()),
            })
            .filter(|b| b.is_finite())
            .collect();
        // the box reaches past the furthest bump by the usual margin
        let reach = breaks.iter().map(|b| ((b - c) / sd).abs()).fold(0.0, f64::max);
        Slice {
            centre: c,
            sd,
            half: self.width[2].asinh() + reach.asinh(),
            breaks,
        }
    }

    fn inner_tol(&self, nodes: usize) -> f64 {
        if nodes > self.nodes {
            INNER_TOL * 1e-2
        } else {
            INNER_TOL
        }
    }

    /// Unnormalised density relative to the peak, at inner coordinate `y`.
    fn relative(&self, outer: Outer, x: f64, y: f64) -> f64 {
        let (u, w) = Self::point(outer, x, y);
        (self.ell(u, w) - self.log_peak).exp()
    }

    fn point(outer: Outer, x: f64, y: f64) -> (f64, f64) {
        match outer {
            Outer::W => (y, x),
            Outer::U => (x, y),
        }
    }

    /// Inner integral at outer `x` over the slice above `from`.
    fn inner_mass(&self, outer: Outer, x: f64, s: &Slice, from: f64, nodes: usize) -> f64 {
        let f = |y: f64| self.relative(outer, x, y);
        s.adaptive(f, from, self.inner_tol(nodes))
            .iter()
            .map(|&(y, wy)| wy * f(y))
            .sum()
    }

    /// Edge-to-peak ratio of the outer marginal (`axis` 0 or 1) or of the
    /// inner slices near the mode (`axis` 2).
    fn edge_ratio(&self, axis: usize) -> f64 {
        if axis < 2 {
            let outer = if axis == 0 { Outer::W } else { Outer::U };
            let b = self.outer_box(outer);
            let m = |x: f64| {
                let s = self.slice(outer, x);
                self.inner_mass(outer, x, &s, f64::NEG_INFINITY, self.nodes)
            };
            let peak = m(b.centre);
            return (m(b.lo()) / peak).max(m(b.hi()) / peak);
        }
        let mut worst: f64 = 0.0;
        for outer in [Outer::W, Outer::U] {
            let b = self.outer_box(outer);
            for k in [-2.0, 0.0, 2.0] {
                let x = b.centre + k * b.sd;
                let s = self.slice(outer, x);
                let d = |y: f64| {
                    let (u, w) = Self::point(outer, x, y);
                    self.ell(u, w)
                };
                let peak = d(s.centre);
                worst = worst.max((d(s.lo()) - peak).exp()).max((d(s.hi()) - peak).exp());
            }
        }
        worst
    }

    /// Product nodes `(u, w, weight)` with unnormalised weights.
    fn nodes_outer(&self, outer: Outer, nodes: usize) -> Vec<(f64, f64, f64)> {
        self.outer_box(outer)
            .rule(nodes, f64::NEG_INFINITY)
            .into_iter()
            .flat_map(|(x, wx)| {
                let tol = self.inner_tol(nodes);
                self.slice(outer, x)
                    .adaptive(|y| self.relative(outer, x, y), f64::NEG_INFINITY, tol)
                    .into_iter()
                    .map(move |(y, wy)| {
                        let (u, w) = Self::point(outer, x, y);
                        (u, w, wx * wy)
                    })
            })
            .map(|(u, w, wt)| (u, w, wt * (self.ell(u, w) - self.log_peak).exp()))
            .filter(|x| x.2 > 0.0)
            .collect()
    }

    /// Nodes `(u, w, weight)` with weights summing to one.
    pub fn grid(&self) -> Vec<(f64, f64, f64)> {
        let mut g = self.nodes_outer(Outer::W, self.nodes);
        let z: f64 = g.iter().map(|x| x.2).sum();
        for x in &mut g {
            x.2 /= z;
        }
        g
    }

    /// Normalising mass, `B`, `C`, `D` on a rule with `nodes` per axis.
    fn moments(&self, nodes: usize) -> [f64; 4] {
        let g = self.nodes_outer(Outer::W, nodes);
        let k = self.config.kernel;
        let n = self.n() as f64;
        let mut m = [0.0; 4];
        for &(u, w, wt) in &g {
            let v = w.exp();
            let (mut b, mut c, mut d) = (0.0, 0.0, n);
            for &ai in &self.config.a {
                let z = u + v * ai;
                let h = k.h_derivs(z);
                b += h[2];
                c += h[2] * z + h[1];
                d += h[2] * z * z + 2.0 * h[1] * z;
            }
            m[0] += wt;
            m[1] += wt * b;
            m[2] += wt * c;
            m[3] += wt * d;
        }
        [m[0], m[1] / m[0], m[2] / m[0], m[3] / m[0]]
    }

    /// Normalised density of `(u, v)`.
    pub fn density(&self, u: f64, v: f64) -> f64 {
        if !(v > 0.0) {
            return 0.0;
        }
        (self.ell(u, v.ln()) - self.log_peak - self.log_norm).exp() / v
    }

    /// Conditional mode and covariance of `(u, log v)` from the curvature.
    pub fn mode(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        (self.mode, self.cov)
    }

    /// Per outer node, the mass of the slice and of its part above
    /// `bound(x)`, and whether the bound failed.
    fn split_mass<F>(&self, outer: Outer, nodes: usize, bound: F) -> Vec<(f64, f64, bool)>
    where
        F: Fn(f64, &Slice) -> Result<f64> + Sync,
    {
        self.outer_box(outer)
            .rule(nodes, f64::NEG_INFINITY)
            .par_iter()
            .map(|&(x, wx)| {
                let s = self.slice(outer, x);
                let full = wx * self.inner_mass(outer, x, &s, f64::NEG_INFINITY, nodes);
                match bound(x, &s) {
                    Ok(b) => (full, wx * self.inner_mass(outer, x, &s, b, nodes), false),
                    Err(_) => (full, 0.0, true),
                }
            })
            .collect()
    }

    /// Mass of `w >= c`.
    fn upper_w_mass(&self, nodes: usize, c: f64) -> (f64, f64) {
        let b = self.outer_box(Outer::W);
        let part = |from: f64| -> f64 {
            b.rule(nodes, from)
                .par_iter()
                .map(|&(x, wx)| {
                    let s = self.slice(Outer::W, x);
                    wx * self.inner_mass(Outer::W, x, &s, f64::NEG_INFINITY, nodes)
                })
                .collect::<Vec<_>>()
                .iter()
                .sum()
        };
        (part(f64::NEG_INFINITY), part(c))
    }

    /// Rejection sampler with a bivariate-t envelope over `(u, log v)`.
    pub fn sampler(&self) -> ConditionalSampler<'_> {
        let c = self.cov;
        let l00 = (ENVELOPE_INFLATE * c[0][0]).sqrt();
        let l10 = ENVELOPE_INFLATE * c[1][0] / l00;
        let l11 = (ENVELOPE_INFLATE * c[1][1] - l10 * l10).max(1e-300).sqrt();
        let mut s = ConditionalSampler {
            law: self,
            chol: [[l00, 0.0], [l10, l11]],
            log_bound: 0.0,
        };
        let mut bound = s.log_ratio(self.mode[0], self.mode[1]);
        for (u, w, _) in self.nodes_outer(Outer::W, self.nodes / 2) {
            bound = bound.max(s.log_ratio(u, w));
        }
        s.log_bound = bound + ENVELOPE_MARGIN.ln();
        s
    }
}

const ENVELOPE_DF: f64 = 4.0;
const ENVELOPE_INFLATE: f64 = 1.5;
const ENVELOPE_MARGIN: f64 = 1.25;

pub struct ConditionalSampler<'a> {
    law: &'a ConditionalLaw,
    chol: [[f64; 2]; 2],
    log_bound: f64,
}

impl ConditionalSampler<'_> {
    fn whiten(&self, u: f64, w: f64) -> (f64, f64) {
        let l = self.chol;
        let z0 = (u - self.law.mode[0]) / l[0][0];
        let z1 = (w - self.law.mode[1] - l[1][0] * z0) / l[1][1];
        (z0, z1)
    }

    fn log_ratio(&self, u: f64, w: f64) -> f64 {
        let (z0, z1) = self.whiten(u, w);
        let q = z0 * z0 + z1 * z1;
        let log_t = -0.5 * (ENVELOPE_DF + 2.0) * (1.0 + q / ENVELOPE_DF).ln();
        self.law.ell(u, w) - self.law.log_peak - log_t
    }

    /// One draw of `(u, v)`.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let chi = ChiSquared::new(ENVELOPE_DF).unwrap();
        loop {
            let z0: f64 = rng.sample(StandardNormal);
            let z1: f64 = rng.sample(StandardNormal);
            let s = (ENVELOPE_DF / rng.sample(chi)).sqrt();
            let (z0, z1) = (z0 * s, z1 * s);
            let l = self.chol;
            let u = self.law.mode[0] + l[0][0] * z0;
            let w = self.law.mode[1] + l[1][0] * z0 + l[1][1] * z1;
            let accept: f64 = rng.gen();
            if accept.ln() < self.log_ratio(u, w) - self.log_bound {
                return (u, w.exp());
            }
        }
    }
}

/// Conditional information constants and the conditional λ arrays at
/// `(mu, sigma) = (0, 1)`.
#[derive(Clone, Debug, Serialize)]
pub struct ConditionalContext {
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "C")]
    pub c: f64,
    #[serde(rename = "D")]
    pub d: f64,
    #[serde(rename = "E")]
    pub e: f64,
    pub eta_ring: f64,
    #[serde(skip)]
    pub view: LocationScaleView,
    #[serde(skip)]
    pub lambda_ring: LambdaArrays,
    #[serde(skip)]
    raw: RawLambda,
}

impl ConditionalContext {
    /// λ̊ arrays at `theta`; each array of `k` indices scales as `sigma^-k`.
    pub fn lambda_ring_at(&self, theta: &[f64]) -> Result<LambdaArrays> {
        let (_, sigma) = self.view.physical(theta);
        if !(sigma > 0.0) {
            return Err(Error::Domain {
                family: self.view.kernel.key().into(),
                theta: theta.to_vec(),
            });
        }
        derive(self.raw.rescaled(1.0 / sigma), Provenance::Conditional)
    }
}

const CHUNK: usize = 512;

/// `B`, `C`, `D` and the full λ̊ arrays by quadrature over the conditional law.
pub fn bcd_constants(law: &ConditionalLaw, family: &dyn ModelFamily) -> Result<ConditionalContext> {
    let view = location_scale(family)?;
    if view.kernel != law.config.kernel {
        return Err(Error::Config(format!(
            "configuration kernel {} does not match {}",
            law.config.kernel.key(),
            family.key()
        )));
    }
    let m = law.moments(law.nodes);
    let (b, c, d) = (m[1], m[2], m[3]);
    let e = b * d - c * c;
    if !(e > 0.0 && b < 0.0 && d < 0.0) {
        return Err(Error::Quadrature(format!(
            "conditional information not negative definite: B = {b}, C = {c}, D = {d}"
        )));
    }
    let grid = law.grid();
    let theta = view.slots(0.0, 1.0);
    let parts: Vec<Accumulator> = grid
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = Accumulator::new(2);
            for &(u, w, wt) in chunk {
                let y = law.config.dataset(u, w.exp());
                acc.add(&family.loglik_derivs_unchecked(&theta, &y, 4), wt);
            }
            acc
        })
        .collect();
    let mut acc = Accumulator::new(2);
    for p in &parts {
        acc.merge(p);
    }
    let raw = acc.raw(law.n() as f64);
    let lambda_ring = derive(raw.clone(), Provenance::Conditional)?;
    Ok(ConditionalContext {
        b,
        c,
        d,
        e,
        eta_ring: lambda_ring.eta,
        view,
        lambda_ring,
        raw,
    })
}

/// Both sides of the conditional condition at one point.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionalResidual {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
    /// The same sides contracted from the quadrature λ̊ arrays.
    pub lhs_direct: f64,
    pub rhs_direct: f64,
}

/// `pi_r λ̊^r1 - λ̊_{rs/t} λ̊^r1 λ̊^st - ½ η̊² λ̊_{rs/t} λ̊^r1 λ̊^s1 λ̊^t1`.
///
/// The closed forms use `λ̊_rs = [[B, C], [C, D]] / sigma^2` in `(mu, sigma)`
/// order, so `λ̊_{rs/sigma} = -2 λ̊_rs / sigma` and `λ̊_{rs/mu} = 0`.
pub fn conditional_matching_residual(
    ctx: &ConditionalContext,
    prior: &dyn Prior,
    theta: &[f64],
) -> Result<ConditionalResidual> {
    let view = ctx.view;
    let (_, sigma) = view.physical(theta);
    let p = prior.ratio1(theta);
    let (pm, ps) = (p[view.loc_slot], p[view.scale_slot]);
    let (b, c, d, e) = (ctx.b, ctx.c, ctx.d, ctx.e);
    let s2 = sigma * sigma;
    let (lhs, rhs) = match view.role() {
        Role::Location => (s2 / e * (d * pm - c * ps), sigma * c / e),
        Role::Scale => (s2 / e * (b * ps - c * pm), -sigma * b / e),
    };
    let a = ctx.lambda_ring_at(theta)?;
    let up = col(&a.lambda_up_rs);
    let lhs_direct = p.iter().zip(&up).map(|(x, y)| x * y).sum();
    let slash = &a.lambda_rs_slash_t;
    let rhs_direct =
        t3_v_m(slash, &up, &a.lambda_up_rs) + 0.5 * a.eta * a.eta * t3_vvv(slash, &up);
    Ok(ConditionalResidual {
        lhs,
        rhs,
        residual: lhs - rhs,
        lhs_direct,
        rhs_direct,
    })
}

/// μ̊_F: the unconditional formula with every λ replaced by its λ̊.
pub fn mu_ring_f(ctx: &ConditionalContext) -> f64 {
    mu_f(&ctx.lambda_ring)
}

/// σ̊²_F. μ̊_F does not depend on `(mu, sigma)`, so its gradient term drops.
pub fn sigma2_ring_f(ctx: &ConditionalContext) -> Result<f64> {
    sigma2_f(&ctx.lambda_ring, &[0.0, 0.0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CoveragePath {
    /// `sigma^-k` priors: one quantile from `a` fixes the covered region.
    Equivariant,
    /// Boundary of the covered region found by root search per outer node.
    Boundary,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConditionalCoverage {
    pub coverage: f64,
    pub path: CoveragePath,
    /// Coverage recomputed with doubled nodes, when checked.
    pub doubled: Option<f64>,
    /// Probability mass at nodes whose posterior quantile failed.
    pub failed_mass: f64,
}

/// `pr(psi <= psi_l | A = a)` at `(mu, sigma) = (0, 1)`, `psi_l` the posterior
/// `1 - alpha` quantile.
pub fn conditional_coverage(
    law: &ConditionalLaw,
    family: &dyn ModelFamily,
    prior: &dyn Prior,
    alpha: f64,
    method: QuantileMethod,
    check: bool,
) -> Result<ConditionalCoverage> {
    let path = if prior.scale_power().is_some() {
        CoveragePath::Equivariant
    } else {
        CoveragePath::Boundary
    };
    coverage_via(law, family, prior, alpha, method, check, path)
}

fn coverage_via(
    law: &ConditionalLaw,
    family: &dyn ModelFamily,
    prior: &dyn Prior,
    alpha: f64,
    method: QuantileMethod,
    check: bool,
    path: CoveragePath,
) -> Result<ConditionalCoverage> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("alpha {alpha} outside (0, 1)")));
    }
    let view = location_scale(family)?;
    let level = 1.0 - alpha;
    let role = view.role();
    let quantile = |u: f64, v: f64| -> Result<f64> {
        let y = Sample::new(law.config.dataset(u, v))?;
        let profile = Profile::new(family, &y)?;
        posterior_quantile(&profile, prior, level, method)
    };
    if path == CoveragePath::Equivariant {
        let q = quantile(0.0, 1.0)?;
        let run = |nodes: usize| -> Result<f64> {
            let parts = match role {
                // covered iff u + v q >= 0
                Role::Location => law.split_mass(Outer::W, nodes, |w, _| Ok(-w.exp() * q)),
                // covered iff v q >= 1
                Role::Scale => {
                    if !(q > 0.0) {
                        return Err(Error::Quadrature(format!("non-positive scale quantile {q}")));
                    }
                    let (full, covered) = law.upper_w_mass(nodes, -q.ln());
                    return Ok(covered / full);
                }
            };
            ratio(&parts).map(|(c, _)| c)
        };
        let coverage = run(law.nodes)?;
        let doubled = if check { Some(run(2 * law.nodes)?) } else { None };
        if let Some(d) = doubled {
            if (d - coverage).abs() > CHECK_TOL {
                return Err(Error::Quadrature(format!("coverage {coverage} vs {d} with doubled nodes")));
            }
        }
        return Ok(ConditionalCoverage {
            coverage,
            path: CoveragePath::Equivariant,
            doubled,
            failed_mass: 0.0,
        });
    }
    let parts = match role {
        Role::Location => law.split_mass(Outer::W, law.nodes, |w, s| {
            let v = w.exp();
            boundary(|u| quantile(u, v), 0.0, s)
        }),
        Role::Scale => law.split_mass(Outer::U, law.nodes, |u, s| {
            boundary(|w| quantile(u, w.exp()).map(f64::ln), 0.0, s)
        }),
    };
    let (coverage, failed_mass) = ratio(&parts)?;
    Ok(ConditionalCoverage {
        coverage,
        path: CoveragePath::Boundary,
        doubled: None,
        failed_mass,
    })
}

fn ratio(parts: &[(f64, f64, bool)]) -> Result<(f64, f64)> {
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let failed: f64 = parts.iter().filter(|p| p.2).map(|p| p.0).sum::<f64>() + 0.0;
    let share = failed / total;
    if share > FAILED_MASS_TOL {
        return Err(Error::Integrity(format!(
            "posterior quantile failed on {:.3}% of the conditional mass",
            100.0 * share
        )));
    }
    let covered: f64 = parts.iter().filter(|p| !p.2).map(|p| p.1).sum();
    Ok((covered / (total - failed), share))
}

/// The root search for the covered region starts at the slice ends and
/// retreats towards the centre while the posterior fails there, down to this
/// mapped half-width (about 8 SDs). Beyond the evaluated ends the indicator is
/// taken from the nearest end.
const MIN_BOUNDARY_T: f64 = 2.78;

/// Smallest inner coordinate at which `q` reaches `target`, for `q`
/// increasing along the slice; `+inf` when it never does.
fn boundary<F: Fn(f64) -> Result<f64>>(q: F, target: f64, s: &Slice) -> Result<f64> {
    // Ends whose posterior fails are pulled towards the centre.
    let end = |dir: f64| -> Result<(f64, f64)> {
        let mut t = s.half;
        loop {
            let x = s.at(dir * t);
            match q(x) {
                Ok(v) => return Ok((x, v)),
                Err(e) if t <= MIN_BOUNDARY_T => return Err(e),
                Err(_) => t *= 0.75,
            }
        }
    };
    let (a, qa) = end(-1.0)?;
    if qa >= target {
        return Ok(f64::NEG_INFINITY);
    }
    let (b, qb) = end(1.0)?;
    if qb < target {
        return Ok(f64::INFINITY);
    }
    let mut failure = None;
    let root = solve_increasing(
        |x| match q(x) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        target,
        a,
        b,
        1e-10 * s.sd,
        0.0,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    root.ok_or_else(|| Error::Bracket("posterior quantile not monotone along the slice".into()))
}
