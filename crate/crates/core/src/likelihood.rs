//! Maximum likelihood, profile likelihood and the signed root statistic.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::fd;
use crate::lambda::{negdef_inverse, HatArrays};
use crate::model::{loglik_derivs, ModelFamily, ParameterPoint, Prior, Sample};
use crate::tensor::Matrix;

const MAX_ITER: usize = 200;
const MAX_HALVINGS: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FitResult {
    pub theta_hat: Vec<f64>,
    pub loglik_at_hat: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Set when the starting points reached modes whose log-likelihoods differ
    /// by more than 1e-4; the higher mode is reported.
    pub multimodal: bool,
}

impl FitResult {
    pub fn psi_hat(&self) -> f64 {
        self.theta_hat[0]
    }

    pub fn point(&self, family: &dyn ModelFamily) -> Result<ParameterPoint> {
        ParameterPoint::new(family, self.theta_hat.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProfilePoint {
    pub psi: f64,
    pub phi_tilde: Vec<f64>,
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "W")]
    pub w: f64,
    #[serde(rename = "R")]
    pub r: f64,
}

impl ProfilePoint {
    pub fn theta(&self) -> Vec<f64> {
        let mut t = vec![self.psi];
        t.extend_from_slice(&self.phi_tilde);
        t
    }
}

struct Ascent {
    x: Vec<f64>,
    value: f64,
    grad_norm: f64,
    iterations: usize,
    converged: bool,
    trajectory: Vec<Vec<f64>>,
}

/// Damped Newton ascent with step halving. `eval` returns value, gradient
/// and Hessian; non-negative-definite Hessians fall back to a scaled
/// gradient step.
fn newton<F, D>(eval: F, in_domain: D, x0: Vec<f64>, tol: f64) -> Ascent
where
    F: Fn(&[f64]) -> Option<(f64, Vec<f64>, Matrix)>,
    D: Fn(&[f64]) -> bool,
{
    let mut x = x0;
    let mut trajectory = vec![x.clone()];
    let Some(mut cur) = eval(&x) else {
        return Ascent {
            x,
            value: f64::NEG_INFINITY,
            grad_norm: f64::INFINITY,
            iterations: 0,
            converged: false,
            trajectory,
        };
    };
    for it in 0..MAX_ITER {
        let (value, g, h) = &cur;
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn <= tol * value.abs().max(1.0) && negdef_inverse(h).is_ok() {
            return Ascent {
                x,
                value: *value,
                grad_norm: gn,
                iterations: it,
                converged: true,
                trajectory,
            };
        }
        let gv = nalgebra::DVector::from_column_slice(g);
        let step = match negdef_inverse(h) {
            Ok(inv) => {
                let step = -(inv * &gv);
                // Under sharp curvature the gradient never drops below its
                // round-off, but the Newton step does.
                let negligible = step
                    .iter()
                    .enumerate()
                    .all(|(i, s)| s.abs() <= 1e-12 * (x[i].abs() + 1.0 / h[(i, i)].abs().sqrt()));
                if negligible {
                    return Ascent {
                        x,
                        value: *value,
                        grad_norm: gn,
                        iterations: it,
                        converged: true,
                        trajectory,
                    };
                }
                step
            }
            Err(_) => {
                // Gradient step scaled by the Hessian diagonal.
                let scale: Vec<f64> = (0..g.len())
                    .map(|i| 1.0 / h[(i, i)].abs().max(1e-8 * gn.max(1.0)))
                    .collect();
                nalgebra::DVector::from_fn(g.len(), |i, _| g[i] * scale[i])
            }
        };
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..=MAX_HALVINGS {
            let cand: Vec<f64> = x.iter().zip(step.iter()).map(|(a, b)| a + t * b).collect();
            if in_domain(&cand) {
                if let Some(next) = eval(&cand) {
                    if next.0 >= *value - 1e-12 * value.abs().max(1.0) && next.0.is_finite() {
                        x = cand;
                        cur = next;
                        moved = true;
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        trajectory.push(x.clone());
        if !moved {
            let gn = cur.1.iter().map(|v| v * v).sum::<f64>().sqrt();
            // No ascent possible: accept if the gradient is at round-off level.
            let converged = gn <= 1e3 * tol * cur.0.abs().max(1.0) && negdef_inverse(&cur.2).is_ok();
            return Ascent {
                x,
                value: cur.0,
                grad_norm: gn,
                iterations: it + 1,
                converged,
                trajectory,
            };
        }
    }
    let gn = cur.1.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ascent {
        x,
        value: cur.0,
        grad_norm: gn,
        iterations: MAX_ITER,
        converged: false,
        trajectory,
    }
}

fn full_eval<'a>(family: &'a dyn ModelFamily, y: &'a [f64]) -> impl Fn(&[f64]) -> Option<(f64, Vec<f64>, Matrix)> + 'a {
    move |t: &[f64]| {
        if !family.in_domain(t) {
            return None;
        }
        let d = family.loglik_derivs_unchecked(t, y, 2);
        d.value.is_finite().then_some((d.value, d.first, d.second))
    }
}

/// Maximum likelihood by Newton iteration from `start` or, when `None`, from
/// each of the family's starting points.
pub fn fit_mle(family: &dyn ModelFamily, sample: &Sample, start: Option<&[f64]>) -> Result<FitResult> {
    let y = sample.values();
    let starts = match start {
        Some(s) => {
            if !family.in_domain(s) {
                return Err(Error::Domain {
                    family: family.key(),
                    theta: s.to_vec(),
                });
            }
            vec![s.to_vec()]
        }
        None => family.starts(y).into_iter().filter(|s| family.in_domain(s)).collect(),
    };
    if starts.is_empty() {
        return Err(Error::Domain {
            family: family.key(),
            theta: vec![],
        });
    }
    let eval = full_eval(family, y);
    let runs: Vec<Ascent> = starts
        .into_iter()
        .map(|s| newton(&eval, |t| family.in_domain(t), s, 1e-10))
        .collect();
    let converged: Vec<&Ascent> = runs.iter().filter(|a| a.converged).collect();
    let Some(best) = converged
        .iter()
        .copied()
        .max_by(|a, b| a.value.partial_cmp(&b.value).unwrap())
    else {
        let worst = runs.into_iter().next().unwrap();
        if worst.iterations >= MAX_ITER {
            return Err(Error::NonConvergence {
                iterations: worst.iterations,
                trajectory: worst.trajectory,
            });
        }
        return Err(Error::Saddle { theta: worst.x });
    };
    let multimodal = converged.iter().any(|a| (a.value - best.value).abs() > 1e-4);
    Ok(FitResult {
        theta_hat: best.x.clone(),
        loglik_at_hat: best.value,
        converged: true,
        iterations: best.iterations,
        gradient_norm: best.grad_norm,
        multimodal,
    })
}

/// Maximises the log-likelihood over the nuisance block at fixed `psi`.
///
/// Newton from `start` (the MLE nuisance by default); for a scalar nuisance
/// parameter a golden-section search is used when Newton stalls.
pub fn fit_constrained(
    family: &dyn ModelFamily,
    sample: &Sample,
    psi: f64,
    start: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let y = sample.values();
    let q = family.dim() - 1;
    let positive = family.positive();
    let join = |phi: &[f64]| {
        let mut t = Vec::with_capacity(q + 1);
        t.push(psi);
        t.extend_from_slice(phi);
        t
    };
    if !family.in_domain(&join(start)) {
        return Err(Error::Constrained {
            psi,
            reason: "interest value or start outside the parameter domain".into(),
        });
    }
    let eval = |phi: &[f64]| {
        let t = join(phi);
        if !family.in_domain(&t) {
            return None;
        }
        let d = family.loglik_derivs_unchecked(&t, y, 2);
        let h = d.second.view((1, 1), (q, q)).into_owned();
        d.value.is_finite().then(|| (d.value, d.first[1..].to_vec(), h))
    };
    let mut run = newton(&eval, |p| family.in_domain(&join(p)), start.to_vec(), 1e-11);
    if !run.converged && q == 1 {
        // at small scales a location nuisance peaks sharply at the observations
        let extra: &[f64] = if positive[1] { &[] } else { y };
        if let Some(x) = golden_nuisance(|p| family.loglik(&join(&[p]), y), start[0], positive[1], extra) {
            run = newton(&eval, |p| family.in_domain(&join(p)), vec![x], 1e-11);
        }
    }
    for (k, &pos) in positive[1..].iter().enumerate() {
        if pos && run.x[k] < 1e-10 * start[k].abs().max(1e-300) {
            return Err(Error::Boundary { psi });
        }
    }
    if !run.converged {
        if run.x.iter().zip(&positive[1..]).any(|(x, &p)| p && *x < 1e-8 * start[0].abs()) {
            return Err(Error::Boundary { psi });
        }
        return Err(Error::Constrained {
            psi,
            reason: format!("nuisance Newton stopped after {} iterations", run.iterations),
        });
    }
    Ok((run.x, run.value))
}

fn golden_nuisance<F: Fn(f64) -> f64>(f: F, start: f64, positive: bool, extra: &[f64]) -> Option<f64> {
    let (lo, hi, map): (f64, f64, Box<dyn Fn(f64) -> f64>) = if positive {
        let c = start.max(1e-300).ln();
        (c - 12.0, c + 12.0, Box::new(|u: f64| u.exp()))
    } else {
        let w = 20.0 * start.abs().max(1.0);
        (start - w, start + w, Box::new(|u| u))
    };
    // Coarse scan for the best bracket, then golden section.
    let k = 200;
    let grid: Vec<f64> = (0..=k).map(|i| lo + (hi - lo) * i as f64 / k as f64).collect();
    let vals: Vec<f64> = grid.iter().map(|&u| f(map(u))).collect();
    let (imax, _) = vals
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())?;
    let (mut a, mut b) = (grid[imax.saturating_sub(1)], grid[(imax + 1).min(k)]);
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    for _ in 0..200 {
        if f(map(c)) > f(map(d)) {
            b = d;
        } else {
            a = c;
        }
        c = b - g * (b - a);
        d = a + g * (b - a);
        if (b - a).abs() < 1e-14 * (1.0 + a.abs()) {
            break;
        }
    }
    let x = map(0.5 * (a + b));
    let best = extra
        .iter()
        .copied()
        .filter(|v| f(*v).is_finite())
        .max_by(|a, b| f(*a).partial_cmp(&f(*b)).unwrap());
    match best {
        Some(v) if f(v) > f(x) => Some(v),
        _ => Some(x),
    }
}

/// Profile likelihood of a fitted sample.
#[derive(Debug, Clone)]
pub struct Profile<'a> {
    pub family: &'a dyn ModelFamily,
    pub sample: &'a Sample,
    pub fit: FitResult,
}

impl<'a> Profile<'a> {
    pub fn new(family: &'a dyn ModelFamily, sample: &'a Sample) -> Result<Self> {
        let fit = fit_mle(family, sample, None)?;
        Ok(Profile { family, sample, fit })
    }

    pub fn with_fit(family: &'a dyn ModelFamily, sample: &'a Sample, fit: FitResult) -> Self {
        Profile { family, sample, fit }
    }

    pub fn psi_hat(&self) -> f64 {
        self.fit.theta_hat[0]
    }

    pub fn phi_hat(&self) -> &[f64] {
        &self.fit.theta_hat[1..]
    }

    /// `(phi_tilde, M(psi))`.
    pub fn constrained(&self, psi: f64) -> Result<(Vec<f64>, f64)> {
        if psi == self.psi_hat() {
            return Ok((self.phi_hat().to_vec(), self.fit.loglik_at_hat));
        }
        fit_constrained(self.family, self.sample, psi, self.phi_hat())
    }

    /// `W(psi)` and `R(psi)` at one interest value.
    pub fn signed_root(&self, psi: f64) -> Result<ProfilePoint> {
        let (phi, m) = self.constrained(psi)?;
        let lhat = self.fit.loglik_at_hat;
        let mut w = 2.0 * (lhat - m);
        if w < 0.0 {
            if w >= -1e-10 * lhat.abs().max(1.0) {
                w = 0.0;
            } else {
                return Err(Error::Inconsistent { psi, w });
            }
        }
        let sign = (self.psi_hat() - psi).partial_cmp(&0.0).unwrap();
        let r = match sign {
            std::cmp::Ordering::Greater => w.sqrt(),
            std::cmp::Ordering::Less => -w.sqrt(),
            std::cmp::Ordering::Equal => 0.0,
        };
        let r = if w == 0.0 { 0.0 } else { r };
        Ok(ProfilePoint {
            psi,
            phi_tilde: phi,
            m,
            w,
            r,
        })
    }

    /// Observed arrays at the MLE.
    pub fn hat(&self, prior: Option<&dyn Prior>) -> Result<HatArrays> {
        let t = self.fit.point(self.family)?;
        let d = loglik_derivs(self.family, &t, self.sample, 4)?;
        HatArrays::new(&d, prior, &self.fit.theta_hat)
    }

    /// Large-sample standard error of the interest estimate, `(-L^11)^(1/2)`.
    pub fn se_psi(&self) -> Result<f64> {
        let t = self.fit.point(self.family)?;
        let d = loglik_derivs(self.family, &t, self.sample, 2)?;
        Ok((-negdef_inverse(&d.second)?[(0, 0)]).sqrt())
    }
}

/// `W` and `R` at `psi` for a sample; fits the MLE first.
pub fn signed_root(family: &dyn ModelFamily, sample: &Sample, psi: f64) -> Result<ProfilePoint> {
    Profile::new(family, sample)?.signed_root(psi)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Curvature {
    pub m11: f64,
    pub m111: f64,
    pub h: f64,
    /// Five-point second difference of the computed profile at the MLE.
    pub m11_numeric: f64,
}

/// `M_11 = 1 / L^11` and `M_111 = L_rst L^r1 L^s1 L^t1 / (L^11)^3` at the MLE.
pub fn curvature_from_hat(hat: &HatArrays) -> (f64, f64, f64) {
    let l11 = hat.l_up_rs[(0, 0)];
    let m11 = 1.0 / l11;
    let m111 = contract_first_column(hat) / l11.powi(3);
    (m11, m111, (-m11).sqrt())
}

/// `L_rst L^r1 L^s1 L^t1`.
pub fn contract_first_column(hat: &HatArrays) -> f64 {
    let d = hat.dim();
    let c: Vec<f64> = (0..d).map(|r| hat.l_up_rs[(r, 0)]).collect();
    let mut s = 0.0;
    for r in 0..d {
        for q in 0..d {
            for t in 0..d {
                s += hat.l_rst.at3(r, q, t) * c[r] * c[q] * c[t];
            }
        }
    }
    s
}

/// Closed-form profile derivatives, cross-checked against finite differences
/// of the computed profile to relative error 1e-4.
pub fn profile_curvature(family: &dyn ModelFamily, sample: &Sample) -> Result<Curvature> {
    let p = Profile::new(family, sample)?;
    let hat = p.hat(None)?;
    let (m11, m111, h) = curvature_from_hat(&hat);
    let step = 0.01 / h;
    let psi0 = p.psi_hat();
    let mut vals = [0.0; 5];
    for (k, v) in vals.iter_mut().enumerate() {
        *v = p.constrained(psi0 + (k as f64 - 2.0) * step)?.1;
    }
    let numeric = (-vals[0] + 16.0 * vals[1] - 30.0 * vals[2] + 16.0 * vals[3] - vals[4]) / (12.0 * step * step);
    if fd::rel_err(numeric, m11, 1e-300) > 1e-4 {
        return Err(Error::ProfileCheck { closed: m11, numeric });
    }
    Ok(Curvature {
        m11,
        m111,
        h,
        m11_numeric: numeric,
    })
}

/// Two-term expansion `Z - (1/6) H^3 L_rst L^r1 L^s1 L^t1 Z^2`, `Z = H (psi_hat - psi)`.
pub fn r_expansion(hat: &HatArrays, psi_hat: f64, psi: f64) -> f64 {
    let h = hat.h;
    let z = h * (psi_hat - psi);
    z - h.powi(3) * contract_first_column(hat) * z * z / 6.0
}
