//! Central finite differences.
//!
//! Step rule: `h_k = max(|theta_k|, 1) * eps^(1 / (order + 1))` where `order`
//! is the derivative order being approximated. Higher-order partials are
//! nested central differences.

use crate::jet::DerivTensors;
use crate::tensor::Tensor;

pub fn step(x: f64, order: usize) -> f64 {
    x.abs().max(1.0) * f64::EPSILON.powf(1.0 / (order as f64 + 1.0))
}

/// Nested central difference of `f` along the coordinates in `idx`.
pub fn partial<F: Fn(&[f64]) -> f64>(f: &F, theta: &[f64], idx: &[usize]) -> f64 {
    let order = idx.len();
    let steps: Vec<f64> = idx.iter().map(|&k| step(theta[k], order)).collect();
    nested(f, theta, idx, &steps)
}

fn nested<F: Fn(&[f64]) -> f64>(f: &F, theta: &[f64], idx: &[usize], steps: &[f64]) -> f64 {
    match idx.split_first() {
        None => f(theta),
        Some((&k, rest)) => {
            let h = steps[0];
            let mut up = theta.to_vec();
            up[k] += h;
            let mut dn = theta.to_vec();
            dn[k] -= h;
            (nested(f, &up, rest, &steps[1..]) - nested(f, &dn, rest, &steps[1..])) / (2.0 * h)
        }
    }
}

/// Central first derivative of a scalar function with the order-1 step.
pub fn derivative<F: Fn(f64) -> f64>(f: F, x: f64) -> f64 {
    let h = step(x, 1);
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Five-point (fourth-order) central first derivative with step `h`.
pub fn derivative5<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x - 2.0 * h) - 8.0 * f(x - h) + 8.0 * f(x + h) - f(x + 2.0 * h)) / (12.0 * h)
}

/// Five-point (fourth-order) central second derivative with step `h`.
pub fn second_derivative5<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (-f(x - 2.0 * h) + 16.0 * f(x - h) - 30.0 * f(x) + 16.0 * f(x + h) - f(x + 2.0 * h))
        / (12.0 * h * h)
}

/// Derivative tensors of `f` up to `order` by nested central differences.
///
/// Only nondecreasing index tuples are differenced; the remaining entries are
/// copies, so the returned tensors are exactly symmetric.
pub fn deriv_tensors<F: Fn(&[f64]) -> f64>(f: &F, theta: &[f64], order: usize) -> DerivTensors {
    let dim = theta.len();
    let mut out = DerivTensors::zeros(dim, order);
    out.value = f(theta);
    if order >= 1 {
        for r in 0..dim {
            out.first[r] = partial(f, theta, &[r]);
        }
    }
    if order >= 2 {
        for r in 0..dim {
            for s in r..dim {
                let v = partial(f, theta, &[r, s]);
                out.second[(r, s)] = v;
                out.second[(s, r)] = v;
            }
        }
    }
    if order >= 3 {
        fill_symmetric(&mut out.third, |idx| partial(f, theta, idx));
    }
    if order >= 4 {
        fill_symmetric(&mut out.fourth, |idx| partial(f, theta, idx));
    }
    out
}

fn fill_symmetric<G: Fn(&[usize]) -> f64>(t: &mut Tensor, g: G) {
    let all: Vec<Vec<usize>> = t.indices().collect();
    for idx in all {
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        if sorted == idx {
            let v = g(&idx);
            for p in crate::tensor::permutations(&idx) {
                t.set(&p, v);
            }
        }
    }
}

/// Relative discrepancy `|a - b| / max(|b|, floor)`.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_partials_of_a_polynomial_exponential() {
        let f = |t: &[f64]| (0.5 * t[0]).exp() * t[1].powi(3);
        let theta = [0.4, 1.3];
        let d = deriv_tensors(&f, &theta, 4);
        let e = (0.2_f64).exp();
        assert!(rel_err(d.first[1], e * 3.0 * 1.69, 1.0) < 1e-7);
        assert!(rel_err(d.second[(0, 1)], 0.5 * e * 3.0 * 1.69, 1.0) < 1e-4);
        assert!(rel_err(d.third.at3(1, 1, 1), e * 6.0, 1.0) < 1e-3);
        assert!(rel_err(d.fourth.at4(0, 0, 1, 1), 0.25 * e * 6.0 * 1.3, 1.0) < 1e-2);
        assert_eq!(d.fourth.symmetry_defect(), 0.0);
    }

    #[test]
    fn five_point_rules() {
        let d = derivative5(|x| x.sin(), 0.7, 1e-3);
        assert!((d - 0.7_f64.cos()).abs() < 1e-12);
        let d2 = second_derivative5(|x| x.sin(), 0.7, 1e-3);
        assert!((d2 + 0.7_f64.sin()).abs() < 1e-8);
    }
}
