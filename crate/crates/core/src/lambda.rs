//! Expected log-likelihood derivative arrays (the λ's) and their observed
//! counterparts at the MLE.
//!
//! Index conventions: `lambda_rs_t[r][s][t] = E{L_rs L_t}`,
//! `lambda_rs_slash_t[r][s][t] = d lambda_rs / d theta^t`,
//! `lambda_rst_slash_u[r][s][t][u] = d lambda_rst / d theta^u` and
//! `lambda_rt_slash_su[r][t][s][u] = d^2 lambda_rt / d theta^s d theta^u`.
//! Slot 0 is the interest parameter.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::jet::DerivTensors;
use crate::model::{ModelFamily, ParameterPoint, Prior};
use crate::rng::Stream;
use crate::tensor::{Matrix, Tensor};

/// Where a set of λ arrays came from.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Provenance {
    Analytic,
    MonteCarlo { reps: usize },
    Conditional,
}

/// Raw expectations before inversion.
#[derive(Clone, Debug, PartialEq)]
pub struct RawLambda {
    pub n: f64,
    pub lambda_rs: Matrix,
    pub lambda_rst: Tensor,
    pub lambda_rstu: Tensor,
    pub lambda_r_s: Matrix,
    pub lambda_rs_t: Tensor,
    pub lambda_r_s_t: Tensor,
    /// Filled through the identity route when absent.
    pub lambda_rs_slash_t: Option<Tensor>,
    pub lambda_rst_slash_u: Option<Tensor>,
    pub lambda_rt_slash_su: Option<Tensor>,
}

/// Monte Carlo standard errors, entry by entry.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LambdaSe {
    pub score_mean: Vec<f64>,
    pub score: Vec<f64>,
    pub lambda_rs: Matrix,
    pub lambda_rst: Tensor,
    pub lambda_rstu: Tensor,
    pub lambda_r_s: Matrix,
    pub lambda_rs_t: Tensor,
    pub lambda_r_s_t: Tensor,
    pub lambda_rs_slash_t: Tensor,
    /// SEs of the entrywise Bartlett residuals, which are correlated sums.
    pub bartlett2: Matrix,
    pub bartlett3: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaArrays {
    pub n: f64,
    pub lambda_rs: Matrix,
    pub lambda_rst: Tensor,
    pub lambda_rstu: Tensor,
    pub lambda_r_s: Matrix,
    pub lambda_rs_t: Tensor,
    pub lambda_r_s_t: Tensor,
    pub lambda_rs_slash_t: Tensor,
    pub lambda_rst_slash_u: Option<Tensor>,
    pub lambda_rt_slash_su: Option<Tensor>,
    pub lambda_up_rs: Matrix,
    pub tau_up_rs: Matrix,
    pub nu_up_rs: Matrix,
    pub eta: f64,
    pub provenance: Provenance,
    pub se: Option<LambdaSe>,
}

impl LambdaArrays {
    pub fn dim(&self) -> usize {
        self.lambda_rs.nrows()
    }
}

/// Observed arrays at the MLE.
#[derive(Clone, Debug, PartialEq)]
pub struct HatArrays {
    pub l_rs: Matrix,
    pub l_rst: Tensor,
    pub l_rstu: Tensor,
    pub l_up_rs: Matrix,
    pub t_up_rs: Matrix,
    pub v_up_rs: Matrix,
    pub h: f64,
    pub pi_r: Option<Vec<f64>>,
    pub pi_rs: Option<Matrix>,
}

impl HatArrays {
    /// Builds the arrays from derivative tensors (order 4) at `theta`, which
    /// is normally the MLE.
    pub fn new(derivs: &DerivTensors, prior: Option<&dyn Prior>, theta: &[f64]) -> Result<Self> {
        if derivs.order < 4 {
            return Err(Error::Missing("fourth-order observed derivatives"));
        }
        let inv = negdef_inverse(&derivs.second)?;
        let (t, v, h) = split_inverse(&inv);
        Ok(HatArrays {
            l_rs: derivs.second.clone(),
            l_rst: derivs.third.clone(),
            l_rstu: derivs.fourth.clone(),
            l_up_rs: inv,
            t_up_rs: t,
            v_up_rs: v,
            h,
            pi_r: prior.map(|p| p.ratio1(theta)),
            pi_rs: prior.map(|p| p.ratio2(theta)),
        })
    }

    pub fn dim(&self) -> usize {
        self.l_rs.nrows()
    }
}

/// Inverse of a negative definite matrix, with the first leading principal
/// minor that fails named in the error.
pub fn negdef_inverse(m: &Matrix) -> Result<Matrix> {
    let d = m.nrows();
    if m.ncols() != d || d == 0 {
        return Err(Error::Dimension(format!("{}x{} matrix", m.nrows(), m.ncols())));
    }
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    for k in 1..=d {
        let block = (-m).view((0, 0), (k, k)).into_owned() / scale;
        let det = block.determinant();
        if !(det > 1e-13) {
            return Err(Error::Singular { minor: k });
        }
    }
    m.clone()
        .try_inverse()
        .ok_or(Error::Singular { minor: d })
}

/// `(tau, nu, eta)` from an inverse matrix; `nu` has its interest row and
/// column set to zero exactly.
pub fn split_inverse(inv: &Matrix) -> (Matrix, Matrix, f64) {
    let d = inv.nrows();
    let l11 = inv[(0, 0)];
    let tau = Matrix::from_fn(d, d, |r, s| inv[(r, 0)] * inv[(s, 0)] / l11);
    let mut nu = inv - &tau;
    for r in 0..d {
        nu[(r, 0)] = 0.0;
        nu[(0, r)] = 0.0;
    }
    (tau, nu, (-l11).powf(-0.5))
}

/// Inverts `lambda_rs` and fills τ, ν and η.
pub fn derive(raw: RawLambda, provenance: Provenance) -> Result<LambdaArrays> {
    let d = raw.lambda_rs.nrows();
    let checks = [
        raw.lambda_r_s.nrows() == d,
        raw.lambda_rst.dim() == d && raw.lambda_rst.order() == 3,
        raw.lambda_rstu.dim() == d && raw.lambda_rstu.order() == 4,
        raw.lambda_rs_t.dim() == d,
        raw.lambda_r_s_t.dim() == d,
    ];
    if checks.iter().any(|ok| !ok) {
        return Err(Error::Dimension("λ arrays disagree in dimension".into()));
    }
    let inv = negdef_inverse(&raw.lambda_rs)?;
    let (tau, nu, eta) = split_inverse(&inv);
    let slash = match raw.lambda_rs_slash_t {
        Some(s) => s,
        None => slash_via_identity(&raw.lambda_rst, &raw.lambda_rs_t)?,
    };
    Ok(LambdaArrays {
        n: raw.n,
        lambda_rs: raw.lambda_rs,
        lambda_rst: raw.lambda_rst,
        lambda_rstu: raw.lambda_rstu,
        lambda_r_s: raw.lambda_r_s,
        lambda_rs_t: raw.lambda_rs_t,
        lambda_r_s_t: raw.lambda_r_s_t,
        lambda_rs_slash_t: slash,
        lambda_rst_slash_u: raw.lambda_rst_slash_u,
        lambda_rt_slash_su: raw.lambda_rt_slash_su,
        lambda_up_rs: inv,
        tau_up_rs: tau,
        nu_up_rs: nu,
        eta,
        provenance,
        se: None,
    })
}

/// `lambda_{rs/t} = lambda_rst + lambda_{rs,t}`.
pub fn slash_via_identity(lambda_rst: &Tensor, lambda_rs_t: &Tensor) -> Result<Tensor> {
    if lambda_rst.dim() != lambda_rs_t.dim() || lambda_rst.order() != 3 || lambda_rs_t.order() != 3 {
        return Err(Error::Dimension(format!(
            "λ_rst has dim {} order {}, λ_rs,t has dim {} order {}",
            lambda_rst.dim(),
            lambda_rst.order(),
            lambda_rs_t.dim(),
            lambda_rs_t.order()
        )));
    }
    let mut out = lambda_rst.clone();
    out.add_scaled(lambda_rs_t, 1.0);
    Ok(out)
}

impl RawLambda {
    /// Every array multiplied by `c^k`, `k` its number of indices: the
    /// arrays at scale `sigma` from those at scale one when `c = 1 / sigma`.
    pub fn rescaled(&self, c: f64) -> RawLambda {
        let t = |x: &Tensor| x.scaled(c.powi(x.order() as i32));
        let o = |x: &Option<Tensor>| x.as_ref().map(t);
        RawLambda {
            n: self.n,
            lambda_rs: self.lambda_rs.scale(c * c),
            lambda_rst: t(&self.lambda_rst),
            lambda_rstu: t(&self.lambda_rstu),
            lambda_r_s: self.lambda_r_s.scale(c * c),
            lambda_rs_t: t(&self.lambda_rs_t),
            lambda_r_s_t: t(&self.lambda_r_s_t),
            lambda_rs_slash_t: o(&self.lambda_rs_slash_t),
            lambda_rst_slash_u: o(&self.lambda_rst_slash_u),
            lambda_rt_slash_su: o(&self.lambda_rt_slash_su),
        }
    }
}

/// Per-entry layout of the statistics accumulated for one sample (or one
/// observation). Every λ is a linear functional of these means.
#[derive(Clone, Debug)]
struct Layout {
    d: usize,
}

impl Layout {
    const BLOCKS: [usize; 12] = [1, 2, 3, 4, 2, 3, 3, 4, 4, 2, 3, 3];

    fn offset(&self, block: usize) -> usize {
        Self::BLOCKS[..block].iter().map(|&o| self.d.pow(o as u32)).sum()
    }

    fn len(&self) -> usize {
        self.offset(Self::BLOCKS.len())
    }

    fn tensor(&self, means: &[f64], block: usize, scale: f64) -> Tensor {
        let order = Self::BLOCKS[block];
        let mut t = Tensor::zeros(self.d, order);
        let o = self.offset(block);
        for (dst, src) in t.data_mut().iter_mut().zip(&means[o..]) {
            *dst = scale * src;
        }
        t
    }

    fn vector(&self, means: &[f64], block: usize, scale: f64) -> Vec<f64> {
        let o = self.offset(block);
        means[o..o + self.d].iter().map(|v| scale * v).collect()
    }

    /// Adds `w` times the feature vector of `x` into `acc`.
    fn accumulate(&self, x: &DerivTensors, w: f64, acc: &mut [f64]) {
        let d = self.d;
        let l1 = &x.first;
        let l2 = &x.second;
        let l3 = &x.third;
        let l4 = &x.fourth;
        let mut k = 0;
        let mut put = |v: f64| {
            acc[k] += w * v;
            k += 1;
        };
        for r in 0..d {
            put(l1[r]);
        }
        for r in 0..d {
            for s in 0..d {
                put(l2[(r, s)]);
            }
        }
        for v in l3.data() {
            put(*v);
        }
        for v in l4.data() {
            put(*v);
        }
        for r in 0..d {
            for s in 0..d {
                put(l1[r] * l1[s]);
            }
        }
        for r in 0..d {
            for s in 0..d {
                for t in 0..d {
                    put(l2[(r, s)] * l1[t]);
                }
            }
        }
        for r in 0..d {
            for s in 0..d {
                for t in 0..d {
                    put(l1[r] * l1[s] * l1[t]);
                }
            }
        }
        for r in 0..d {
            for s in 0..d {
                for t in 0..d {
                    for u in 0..d {
                        put(l3.at3(r, s, t) * l1[u]);
                    }
                }
            }
        }
        // d^2/ds du of E{L_rt}: L_rtsu + L_rts L_u + L_rtu L_s + L_rt L_su + L_rt L_s L_u
        for r in 0..d {
            for t in 0..d {
                for s in 0..d {
                    for u in 0..d {
                        put(l4.at4(r, t, s, u)
                            + l3.at3(r, t, s) * l1[u]
                            + l3.at3(r, t, u) * l1[s]
                            + l2[(r, t)] * l2[(s, u)]
                            + l2[(r, t)] * l1[s] * l1[u]);
                    }
                }
            }
        }
        for r in 0..d {
            for s in 0..d {
                put(l2[(r, s)] + l1[r] * l1[s]);
            }
        }
        for r in 0..d {
            for s in 0..d {
                for t in 0..d {
                    put(l3.at3(r, s, t)
                        + l2[(r, s)] * l1[t]
                        + l2[(r, t)] * l1[s]
                        + l2[(s, t)] * l1[r]
                        + l1[r] * l1[s] * l1[t]);
                }
            }
        }
        for r in 0..d {
            for s in 0..d {
                for t in 0..d {
                    put(l3.at3(r, s, t) + l2[(r, s)] * l1[t]);
                }
            }
        }
        debug_assert_eq!(k, self.len());
    }

    fn raw(&self, means: &[f64], scale: f64, n: f64) -> RawLambda {
        let m = |b: usize| self.tensor(means, b, scale);
        let mut rst_u = m(3);
        rst_u.add_scaled(&m(7), 1.0);
        RawLambda {
            n,
            lambda_rs: m(1).to_matrix(),
            lambda_rst: m(2),
            lambda_rstu: m(3),
            lambda_r_s: m(4).to_matrix(),
            lambda_rs_t: m(5),
            lambda_r_s_t: m(6),
            lambda_rs_slash_t: Some(m(11)),
            lambda_rst_slash_u: Some(rst_u),
            lambda_rt_slash_su: Some(m(8)),
        }
    }
}

/// Weighted sums of sample-level features, for expectations computed by
/// quadrature over whole samples.
#[derive(Clone, Debug)]
pub(crate) struct Accumulator {
    layout: Layout,
    acc: Vec<f64>,
}

impl Accumulator {
    pub(crate) fn new(d: usize) -> Self {
        let layout = Layout { d };
        let acc = vec![0.0; layout.len()];
        Accumulator { layout, acc }
    }

    pub(crate) fn add(&mut self, x: &DerivTensors, w: f64) {
        self.layout.accumulate(x, w, &mut self.acc);
    }

    pub(crate) fn merge(&mut self, other: &Accumulator) {
        for (a, b) in self.acc.iter_mut().zip(&other.acc) {
            *a += b;
        }
    }

    /// Raw arrays from the sums, which must carry weights summing to one.
    pub(crate) fn raw(&self, n: f64) -> RawLambda {
        self.layout.raw(&self.acc, 1.0, n)
    }
}

/// Analytic λ arrays for a sample of size `n` at `theta`.
///
/// Expectations over one observation use the family's quadrature rule; the
/// sample arrays are `n` times the per-observation ones, which holds for all
/// entries here because the per-observation score has mean zero.
pub fn analytic_lambda(family: &dyn ModelFamily, theta: &[f64], n: usize) -> Result<LambdaArrays> {
    if !family.in_domain(theta) {
        return Err(Error::Domain {
            family: family.key(),
            theta: theta.to_vec(),
        });
    }
    let rule = family
        .obs_expectation_rule(theta)
        .ok_or(Error::Missing("analytic expectation rule for this family"))?;
    let layout = Layout { d: theta.len() };
    let mut acc = vec![0.0; layout.len()];
    for (y, p) in rule {
        let x = family
            .obs_derivs(theta, y, 4)
            .ok_or(Error::Missing("per-observation derivatives"))?;
        layout.accumulate(&x, p, &mut acc);
    }
    derive(layout.raw(&acc, n as f64, n as f64), Provenance::Analytic)
}

const JACKKNIFE_BLOCKS: usize = 50;

/// Sample means and jackknife SEs of per-replicate feature vectors.
///
/// Replicate `i` uses `stream.at(i)`; blocks are reduced in index order, so
/// the result does not depend on thread scheduling.
fn replicate_means<F>(reps: usize, len: usize, feature: F) -> Result<(Vec<f64>, Vec<f64>)>
where
    F: Fn(usize, &mut [f64]) -> Result<()> + Sync,
{
    let blocks = JACKKNIFE_BLOCKS.min(reps);
    let bounds: Vec<(usize, usize)> = (0..blocks)
        .map(|b| (b * reps / blocks, (b + 1) * reps / blocks))
        .collect();
    let sums: Vec<Vec<f64>> = bounds
        .par_iter()
        .map(|&(lo, hi)| {
            let mut acc = vec![0.0; len];
            let mut one = vec![0.0; len];
            for i in lo..hi {
                one.iter_mut().for_each(|v| *v = 0.0);
                feature(i, &mut one)?;
                for (a, v) in acc.iter_mut().zip(&one) {
                    *a += v;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;
    let mut total = vec![0.0; len];
    for s in &sums {
        for (t, v) in total.iter_mut().zip(s) {
            *t += v;
        }
    }
    let nf = reps as f64;
    let mean: Vec<f64> = total.iter().map(|t| t / nf).collect();
    let mut var = vec![0.0; len];
    for (s, &(lo, hi)) in sums.iter().zip(&bounds) {
        let m = (hi - lo) as f64;
        for j in 0..len {
            let loo = (total[j] - s[j]) / (nf - m);
            var[j] += (loo - mean[j]).powi(2);
        }
    }
    let kf = blocks as f64;
    let se = var.iter().map(|v| ((kf - 1.0) / kf * v).sqrt()).collect();
    Ok((mean, se))
}

/// Monte Carlo λ arrays from `reps` samples of size `n` drawn at `theta`.
///
/// The slash arrays come from the identity route applied replicate by
/// replicate, so their SEs are available too.
pub fn monte_carlo_lambda(
    family: &dyn ModelFamily,
    theta: &ParameterPoint,
    n: usize,
    reps: usize,
    stream: Stream,
) -> Result<LambdaArrays> {
    if reps < 1000 {
        return Err(Error::Config(format!("Monte Carlo λ needs at least 1000 replicates, got {reps}")));
    }
    let th = theta.as_slice();
    let layout = Layout { d: th.len() };
    let (mean, se) = replicate_means(reps, layout.len(), |i, out| {
        let y = crate::model::sample(family, theta, n, stream.at(i as u64))?;
        let x = family.loglik_derivs_unchecked(th, y.values(), 4);
        layout.accumulate(&x, 1.0, out);
        Ok(())
    })?;
    let mut arrays = derive(layout.raw(&mean, 1.0, n as f64), Provenance::MonteCarlo { reps })?;
    let s = |b: usize| layout.tensor(&se, b, 1.0);
    arrays.se = Some(LambdaSe {
        score_mean: layout.vector(&mean, 0, 1.0),
        score: layout.vector(&se, 0, 1.0),
        lambda_rs: s(1).to_matrix(),
        lambda_rst: s(2),
        lambda_rstu: s(3),
        lambda_r_s: s(4).to_matrix(),
        lambda_rs_t: s(5),
        lambda_r_s_t: s(6),
        lambda_rs_slash_t: s(11),
        bartlett2: s(9).to_matrix(),
        bartlett3: s(10),
    });
    Ok(arrays)
}

/// Both sides of `lambda_{rs/t} = lambda_rst + lambda_{rs,t}` by Monte Carlo.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SlashCheck {
    /// `d lambda_rs / d theta^t` by common-random-number central differences.
    pub differenced: Tensor,
    pub identity: Tensor,
    /// SE of the entrywise difference of the two sides.
    pub se_diff: Tensor,
    /// Largest `|differenced - identity| / se_diff`.
    pub max_z: f64,
}

/// Estimates `lambda_{rs/t}` by differencing `E{L_rs}` over samples drawn at
/// `theta +- h e_t` from the same random numbers, alongside the identity
/// route at `theta`. Replicate `i` uses one stream for all three draws.
pub fn slash_check_mc(
    family: &dyn ModelFamily,
    theta: &ParameterPoint,
    n: usize,
    reps: usize,
    stream: Stream,
) -> Result<SlashCheck> {
    let th = theta.as_slice().to_vec();
    let d = th.len();
    let d3 = d * d * d;
    let steps: Vec<f64> = th.iter().map(|&x| crate::fd::step(x, 2)).collect();
    for t in 0..d {
        for sign in [-1.0, 1.0] {
            let mut p = th.clone();
            p[t] += sign * steps[t];
            if !family.in_domain(&p) {
                return Err(Error::Stencil { theta: p });
            }
        }
    }
    let (mean, se) = replicate_means(reps, 3 * d3, |i, out| {
        let s = stream.at(i as u64);
        let y = crate::model::sample(family, theta, n, s)?;
        let x = family.loglik_derivs_unchecked(&th, y.values(), 3);
        for t in 0..d {
            let mut shifted = [0.0; 2].map(|_| Matrix::zeros(d, d));
            for (k, sign) in [1.0, -1.0].into_iter().enumerate() {
                let mut p = th.clone();
                p[t] += sign * steps[t];
                let pt = ParameterPoint::new(family, p.clone())?;
                let yp = crate::model::sample(family, &pt, n, s)?;
                shifted[k] = family.loglik_derivs_unchecked(&p, yp.values(), 2).second;
            }
            for r in 0..d {
                for q in 0..d {
                    let idx = (r * d + q) * d + t;
                    let diff = (shifted[0][(r, q)] - shifted[1][(r, q)]) / (2.0 * steps[t]);
                    let ident = x.third.at3(r, q, t) + x.second[(r, q)] * x.first[t];
                    out[idx] = diff;
                    out[d3 + idx] = ident;
                    out[2 * d3 + idx] = diff - ident;
                }
            }
        }
        Ok(())
    })?;
    let tensor = |o: usize, v: &[f64]| {
        let mut t = Tensor::zeros(d, 3);
        t.data_mut().copy_from_slice(&v[o..o + d3]);
        t
    };
    let differenced = tensor(0, &mean);
    let identity = tensor(d3, &mean);
    let se_diff = tensor(2 * d3, &se);
    let max_z = (0..d3)
        .map(|j| (mean[2 * d3 + j]).abs() / se_diff.data()[j].max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max);
    Ok(SlashCheck {
        differenced,
        identity,
        se_diff,
        max_z,
    })
}

/// Bartlett identity residuals, normalized by `n`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentityReport {
    pub provenance: Provenance,
    pub n: f64,
    /// `max |lambda_rs + lambda_{r,s}| / n`.
    pub bartlett2: f64,
    /// `max |lambda_rst + lambda_{rs,t} + lambda_{rt,s} + lambda_{st,r} + lambda_{r,s,t}| / n`.
    pub bartlett3: f64,
    /// Largest entrywise residual in SE units, for Monte Carlo arrays.
    pub bartlett2_z: Option<f64>,
    pub bartlett3_z: Option<f64>,
    /// `max |lambda_{rs/t} - lambda_rst - lambda_{rs,t}| / n`.
    pub slash: f64,
    pub tolerance: f64,
    pub flagged: bool,
}

/// Residual tolerance for arrays computed by quadrature.
pub const IDENTITY_TOL: f64 = 1e-8;

pub fn check_identities(a: &LambdaArrays) -> IdentityReport {
    let d = a.dim();
    let mut r2 = Matrix::zeros(d, d);
    let mut r3 = Tensor::zeros(d, 3);
    for r in 0..d {
        for s in 0..d {
            r2[(r, s)] = a.lambda_rs[(r, s)] + a.lambda_r_s[(r, s)];
            for t in 0..d {
                let v = a.lambda_rst.at3(r, s, t)
                    + a.lambda_rs_t.at3(r, s, t)
                    + a.lambda_rs_t.at3(r, t, s)
                    + a.lambda_rs_t.at3(s, t, r)
                    + a.lambda_r_s_t.at3(r, s, t);
                r3.set(&[r, s, t], v);
            }
        }
    }
    let ident = slash_via_identity(&a.lambda_rst, &a.lambda_rs_t).expect("dimensions checked at derive");
    let slash = ident.max_abs_diff(&a.lambda_rs_slash_t) / a.n;
    let bartlett2 = r2.iter().fold(0.0f64, |m, v| m.max(v.abs())) / a.n;
    let bartlett3 = r3.max_abs() / a.n;
    let z = |res: &[f64], se: &[f64]| {
        res.iter()
            .zip(se)
            .map(|(r, s)| r.abs() / s.max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    };
    let (z2, z3) = match &a.se {
        Some(se) => (
            Some(z(r2.as_slice(), se.bartlett2.as_slice())),
            Some(z(r3.data(), se.bartlett3.data())),
        ),
        None => (None, None),
    };
    let flagged = match (z2, z3) {
        (Some(a), Some(b)) => a > 4.0 || b > 4.0,
        _ => bartlett2 > IDENTITY_TOL || bartlett3 > IDENTITY_TOL || slash > IDENTITY_TOL,
    };
    IdentityReport {
        provenance: a.provenance.clone(),
        n: a.n,
        bartlett2,
        bartlett3,
        bartlett2_z: z2,
        bartlett3_z: z3,
        slash,
        tolerance: IDENTITY_TOL,
        flagged,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::family;
    use proptest::prelude::*;

    fn normal_raw(n: f64) -> RawLambda {
        let d = 2;
        let mut rst = Tensor::zeros(d, 3);
        // (mu, sigma) at (0, 1): lambda_{mu mu sigma} = 2n, lambda_{sigma sigma sigma} = 10n
        for p in crate::tensor::permutations(&[0, 0, 1]) {
            rst.set(&p, 2.0 * n);
        }
        rst.set(&[1, 1, 1], 10.0 * n);
        RawLambda {
            n,
            lambda_rs: Matrix::from_row_slice(2, 2, &[-n, 0.0, 0.0, -2.0 * n]),
            lambda_rst: rst,
            lambda_rstu: Tensor::zeros(d, 4),
            lambda_r_s: Matrix::from_row_slice(2, 2, &[n, 0.0, 0.0, 2.0 * n]),
            lambda_rs_t: Tensor::zeros(d, 3),
            lambda_r_s_t: Tensor::zeros(d, 3),
            lambda_rs_slash_t: None,
            lambda_rst_slash_u: None,
            lambda_rt_slash_su: None,
        }
    }

    #[test]
    fn normal_information_by_hand() {
        let n = 7.0;
        let a = derive(normal_raw(n), Provenance::Analytic).unwrap();
        assert!((a.lambda_up_rs[(0, 0)] + 1.0 / n).abs() < 1e-15);
        assert!((a.eta - n.sqrt()).abs() < 1e-12);
        assert!((a.tau_up_rs[(0, 0)] + 1.0 / n).abs() < 1e-15);
        assert!((a.nu_up_rs[(1, 1)] + 0.5 / n).abs() < 1e-15);
        assert_eq!(a.nu_up_rs[(0, 0)], 0.0);
        assert_eq!(a.nu_up_rs[(0, 1)], 0.0);
    }

    #[test]
    fn identity_input() {
        let mut raw = normal_raw(1.0);
        raw.lambda_rs = -Matrix::identity(2, 2);
        let a = derive(raw, Provenance::Analytic).unwrap();
        assert_eq!(a.lambda_up_rs, -Matrix::identity(2, 2));
        assert_eq!(a.eta, 1.0);
    }

    #[test]
    fn singular_minor_is_named() {
        let mut raw = normal_raw(1.0);
        raw.lambda_rs = Matrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        assert_eq!(derive(raw.clone(), Provenance::Analytic), Err(Error::Singular { minor: 2 }));
        raw.lambda_rs[(0, 0)] = 0.0;
        assert_eq!(derive(raw, Provenance::Analytic), Err(Error::Singular { minor: 1 }));
    }

    #[test]
    fn slash_identity_examples() {
        let z = Tensor::zeros(2, 3);
        assert_eq!(slash_via_identity(&z, &z).unwrap(), z);
        assert!(slash_via_identity(&z, &Tensor::zeros(3, 3)).is_err());
        let n = 6;
        let f = family("normal-ls").unwrap();
        let a = analytic_lambda(f.as_ref(), &[0.0, 1.0], n).unwrap();
        assert!((a.lambda_rs_slash_t.at3(0, 0, 1) - 2.0 * n as f64).abs() < 1e-10);
        // against a direct derivative of lambda_{mu mu} = -n / sigma^2
        let h = 1e-5;
        let up = analytic_lambda(f.as_ref(), &[0.0, 1.0 + h], n).unwrap();
        let dn = analytic_lambda(f.as_ref(), &[0.0, 1.0 - h], n).unwrap();
        let num = (up.lambda_rs[(0, 0)] - dn.lambda_rs[(0, 0)]) / (2.0 * h);
        assert!((num - 2.0 * n as f64).abs() < 1e-6);
    }

    #[test]
    fn analytic_normal_satisfies_identities() {
        let f = family("normal-ls").unwrap();
        let a = analytic_lambda(f.as_ref(), &[0.0, 1.0], 9).unwrap();
        let r = check_identities(&a);
        assert!(r.bartlett2 <= 1e-10 && r.bartlett3 <= 1e-10, "{r:?}");
        assert!(!r.flagged);
        assert!((a.lambda_rs[(0, 0)] + 9.0).abs() < 1e-10);
        assert!((a.lambda_rs[(1, 1)] + 18.0).abs() < 1e-10);
    }

    #[test]
    fn negated_cross_products_are_flagged() {
        let f = family("normal-ls").unwrap();
        let mut a = analytic_lambda(f.as_ref(), &[0.0, 1.0], 4).unwrap();
        a.lambda_r_s = -a.lambda_r_s.clone();
        let r = check_identities(&a);
        assert!(r.flagged);
        let expected = 2.0 * a.lambda_rs.iter().fold(0.0f64, |m, v| m.max(v.abs())) / 4.0;
        assert!((r.bartlett2 - expected).abs() < 1e-10);
    }

    #[test]
    fn all_builtin_families_satisfy_identities() {
        for key in ["normal-ls:scale", "cauchy-ls", "cauchy-ls:scale", "gumbel-ls", "gumbel-ls:scale", "gamma", "gamma:rate"] {
            let f = family(key).unwrap();
            let theta = if key.starts_with("gamma") { vec![2.5, 1.5] } else { f.location_scale().unwrap().slots(0.3, 1.4) };
            let a = analytic_lambda(f.as_ref(), &theta, 5).unwrap();
            let r = check_identities(&a);
            assert!(!r.flagged, "{key} {r:?}");
            for k in 0..2 {
                assert_eq!(a.nu_up_rs[(k, 0)], 0.0);
            }
        }
    }

    #[test]
    fn linear_in_n_and_eta_scaling() {
        let f = family("gumbel-ls").unwrap();
        let a = analytic_lambda(f.as_ref(), &[0.2, 1.3], 10).unwrap();
        let b = analytic_lambda(f.as_ref(), &[0.2, 1.3], 20).unwrap();
        assert!((&b.lambda_rs - 2.0 * &a.lambda_rs).abs().max() < 1e-10);
        assert!((b.eta - a.eta * 2f64.sqrt()).abs() < 1e-10 * b.eta);
        let inv11 = 1.0 / a.lambda_up_rs[(0, 0)];
        let mut s = 0.0;
        for r in 0..2 {
            for q in 0..2 {
                s += a.lambda_rs[(r, 0)] * a.lambda_rs[(q, 0)] * a.tau_up_rs[(r, q)];
            }
        }
        assert!((s - inv11).abs() < 1e-8 * inv11.abs());
    }

    #[test]
    fn monte_carlo_normal_lambda() {
        let f = family("normal-ls").unwrap();
        let t = ParameterPoint::new(f.as_ref(), vec![0.0, 1.0]).unwrap();
        let a = monte_carlo_lambda(f.as_ref(), &t, 5, 20_000, Stream::new(5)).unwrap();
        let se = a.se.as_ref().unwrap();
        assert!((a.lambda_rs[(0, 0)] + 5.0).abs() <= 4.0 * se.lambda_rs[(0, 0)] + 1e-9);
        for r in 0..2 {
            assert!(se.score_mean[r].abs() <= 4.0 * se.score[r]);
        }
        let rep = check_identities(&a);
        assert!(!rep.flagged, "{rep:?}");
        assert!(monte_carlo_lambda(f.as_ref(), &t, 5, 999, Stream::new(5)).is_err());
    }

    #[test]
    fn monte_carlo_is_deterministic() {
        let f = family("cauchy-ls").unwrap();
        let t = ParameterPoint::new(f.as_ref(), vec![0.0, 1.0]).unwrap();
        let a = monte_carlo_lambda(f.as_ref(), &t, 5, 2000, Stream::new(1)).unwrap();
        let b = monte_carlo_lambda(f.as_ref(), &t, 5, 2000, Stream::new(1)).unwrap();
        assert_eq!(a, b);
    }

    fn arb_negdef(d: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-1.0f64..1.0, d * d).prop_map(move |v| {
            let a = Matrix::from_vec(d, d, v);
            -(&a * a.transpose() + Matrix::identity(d, d) * 0.5)
        })
    }

    proptest! {
        #[test]
        fn nuisance_permutation_commutes_with_derive(m in arb_negdef(3), t in prop::collection::vec(-2.0f64..2.0, 27)) {
            let mut rst = Tensor::zeros(3, 3);
            rst.data_mut().copy_from_slice(&t);
            rst.symmetrize();
            let raw = RawLambda {
                n: 1.0,
                lambda_rs: m.clone(),
                lambda_rst: rst.clone(),
                lambda_rstu: Tensor::zeros(3, 4),
                lambda_r_s: -m.clone(),
                lambda_rs_t: rst.scaled(-0.5),
                lambda_r_s_t: Tensor::zeros(3, 3),
                lambda_rs_slash_t: None,
                lambda_rst_slash_u: None,
                lambda_rt_slash_su: None,
            };
            let perm = [0, 2, 1];
            let permuted = RawLambda {
                lambda_rs: crate::tensor::permute_matrix(&raw.lambda_rs, &perm),
                lambda_rst: raw.lambda_rst.permuted(&perm),
                lambda_r_s: crate::tensor::permute_matrix(&raw.lambda_r_s, &perm),
                lambda_rs_t: raw.lambda_rs_t.permuted(&perm),
                ..raw.clone()
            };
            let a = derive(raw, Provenance::Analytic).unwrap();
            let b = derive(permuted, Provenance::Analytic).unwrap();
            prop_assert!((a.eta - b.eta).abs() < 1e-10 * a.eta);
            let back = crate::tensor::permute_matrix(&a.nu_up_rs, &perm);
            prop_assert!((back - &b.nu_up_rs).abs().max() < 1e-10);
            prop_assert!(b.lambda_rs_slash_t.max_abs_diff(&a.lambda_rs_slash_t.permuted(&perm)) < 1e-12);
            // inverse residual and the nuisance block of nu
            let resid = (&a.lambda_up_rs * &m - Matrix::identity(3, 3)).abs().max();
            prop_assert!(resid < 1e-10);
            let block = m.view((1, 1), (2, 2)).into_owned().try_inverse().unwrap();
            prop_assert!((a.nu_up_rs.view((1, 1), (2, 2)) - block).abs().max() < 1e-10);
            prop_assert!(a.eta > 0.0);
        }
    }
}
