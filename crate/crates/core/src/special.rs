//! Special functions not covered by `statrs`.

use statrs::distribution::{ContinuousCDF, Normal};

pub use statrs::function::gamma::{digamma, ln_gamma};

const BERNOULLI_2K: [f64; 6] = [
    1.0 / 6.0,
    -1.0 / 30.0,
    1.0 / 42.0,
    -1.0 / 30.0,
    5.0 / 66.0,
    -691.0 / 2730.0,
];

fn factorial(k: usize) -> f64 {
    (1..=k).map(|i| i as f64).product()
}

/// Polygamma function `psi^(m)(x)` for `m >= 1`, `x > 0`.
pub fn polygamma(m: usize, x: f64) -> f64 {
    assert!(m >= 1, "use digamma for m = 0");
    let sign = if m % 2 == 1 { 1.0 } else { -1.0 };
    let mfact = factorial(m);
    let mut x = x;
    let mut shift = 0.0;
    while x < 20.0 {
        // psi^(m)(x) = psi^(m)(x + 1) - (-1)^m m! / x^(m+1)
        shift += sign * mfact / x.powi(m as i32 + 1);
        x += 1.0;
    }
    let mut series = factorial(m - 1) / x.powi(m as i32) + mfact / (2.0 * x.powi(m as i32 + 1));
    for (k, b) in BERNOULLI_2K.iter().enumerate() {
        let two_k = 2 * (k + 1);
        series += b * factorial(two_k + m - 1) / (factorial(two_k) * x.powi((two_k + m) as i32));
    }
    sign * series + shift
}

pub fn normal_cdf(z: f64) -> f64 {
    Normal::standard().cdf(z)
}

/// `z` with `Phi(z) = p`.
pub fn normal_quantile(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trigamma_known_values() {
        let pi2 = std::f64::consts::PI.powi(2);
        assert!((polygamma(1, 1.0) - pi2 / 6.0).abs() < 1e-13);
        assert!((polygamma(1, 0.5) - pi2 / 2.0).abs() < 1e-12);
    }

    #[test]
    fn higher_polygamma_by_differencing() {
        // polygamma(m+1) is the derivative of polygamma(m)
        for &x in &[0.3, 1.7, 6.0, 40.0] {
            for m in 1..3 {
                let h = 1e-5 * x;
                let fd = (polygamma(m, x + h) - polygamma(m, x - h)) / (2.0 * h);
                let exact = polygamma(m + 1, x);
                assert!(((fd - exact) / exact).abs() < 1e-6, "m={m} x={x}");
            }
            let h = 1e-5 * x;
            let fd = (digamma(x + h) - digamma(x - h)) / (2.0 * h);
            assert!(((fd - polygamma(1, x)) / polygamma(1, x)).abs() < 1e-7);
        }
    }

    #[test]
    fn zeta_values() {
        // psi''(1) = -2 zeta(3), psi'''(1) = 6 zeta(4) = pi^4 / 15
        assert!((polygamma(2, 1.0) + 2.0 * 1.202_056_903_159_594_2).abs() < 1e-12);
        assert!((polygamma(3, 1.0) - std::f64::consts::PI.powi(4) / 15.0).abs() < 1e-12);
    }
}
