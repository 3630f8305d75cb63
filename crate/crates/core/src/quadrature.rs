//! Quadrature rules and Chebyshev interpolation.
//!
//! Gauss–Legendre for finite boxes, double-exponential rules for the real
//! line and the half line, and Chebyshev series on Clenshaw–Curtis points
//! for marginal densities whose CDF must be inverted.

use std::collections::HashMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::sync::{Arc, Mutex, OnceLock};

/// Nodes and weights on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    /// The rule mapped onto `[a, b]`.
    pub fn mapped(&self, a: f64, b: f64) -> Vec<(f64, f64)> {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| (mid + half * x, half * w))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// `n`-point Gauss–Legendre rule, cached per `n`.
pub fn gauss_legendre(n: usize) -> Arc<Rule> {
    static CACHE: OnceLock<Mutex<HashMap<usize, Arc<Rule>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(r) = cache.lock().unwrap().get(&n) {
        return Arc::clone(r);
    }
    let rule = Arc::new(compute_gauss_legendre(n));
    cache.lock().unwrap().insert(n, Arc::clone(&rule));
    rule
}

fn compute_gauss_legendre(n: usize) -> Rule {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let (_, d) = legendre(n, x);
        if d != 0.0 {
            dp = d;
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    Rule { nodes, weights }
}

/// `(P_n(x), P_n'(x))` by the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Double-exponential (sinh–sinh) rule for integrals over the real line.
///
/// Returns `(x, w)` pairs with `sum w f(x) ~ int f`.
pub fn sinh_sinh(step: f64, t_max: f64) -> Vec<(f64, f64)> {
    let k = (t_max / step).ceil() as i64;
    (-k..=k)
        .map(|j| {
            let t = j as f64 * step;
            let s = FRAC_PI_2 * t.sinh();
            let x = s.sinh();
            let w = step * FRAC_PI_2 * t.cosh() * s.cosh();
            (x, w)
        })
        .filter(|(x, w)| x.is_finite() && w.is_finite())
        .collect()
}

/// Double-exponential (exp–sinh) rule for integrals over `(0, inf)`.
pub fn exp_sinh(step: f64, t_max: f64) -> Vec<(f64, f64)> {
    let k = (t_max / step).ceil() as i64;
    (-k..=k)
        .map(|j| {
            let t = j as f64 * step;
            let x = (FRAC_PI_2 * t.sinh()).exp();
            let w = step * FRAC_PI_2 * t.cosh() * x;
            (x, w)
        })
        .filter(|(x, w)| x.is_finite() && w.is_finite() && *x > 0.0)
        .collect()
}

/// Chebyshev extreme points `cos(j pi / n)`, `j = 0..=n`, mapped to `[a, b]`
/// in increasing order.
pub fn chebyshev_points(n: usize, a: f64, b: f64) -> Vec<f64> {
    (0..=n)
        .map(|j| {
            let x = -(PI * j as f64 / n as f64).cos();
            0.5 * (a + b) + 0.5 * (b - a) * x
        })
        .collect()
}

/// A Chebyshev series on `[a, b]`.
#[derive(Debug, Clone)]
pub struct Chebyshev {
    a: f64,
    b: f64,
    coeffs: Vec<f64>,
}

impl Chebyshev {
    /// Interpolant through values at [`chebyshev_points`]`(n, a, b)`.
    pub fn interpolate(a: f64, b: f64, values: &[f64]) -> Chebyshev {
        let n = values.len() - 1;
        // values are ordered by increasing x, i.e. x_j = -cos(j pi / n);
        // in the standard ordering f(cos(j pi/n)) = values[n - j].
        let mut coeffs = vec![0.0; n + 1];
        for (k, c) in coeffs.iter_mut().enumerate() {
            let mut s = 0.0;
            for j in 0..=n {
                let f = values[n - j];
                let term = f * (PI * (k * j) as f64 / n as f64).cos();
                s += if j == 0 || j == n { 0.5 * term } else { term };
            }
            *c = 2.0 * s / n as f64;
        }
        coeffs[0] *= 0.5;
        coeffs[n] *= 0.5;
        Chebyshev { a, b, coeffs }
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.a, self.b)
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = (2.0 * x - self.a - self.b) / (self.b - self.a);
        // Clenshaw recurrence
        let mut b1 = 0.0;
        let mut b2 = 0.0;
        for &c in self.coeffs.iter().skip(1).rev() {
            let b0 = 2.0 * t * b1 - b2 + c;
            b2 = b1;
            b1 = b0;
        }
        t * b1 - b2 + self.coeffs[0]
    }

    /// Antiderivative vanishing at `a`.
    pub fn integral(&self) -> Chebyshev {
        let n = self.coeffs.len();
        let a = |k: usize| if k < n { self.coeffs[k] } else { 0.0 };
        let mut out = vec![0.0; n + 1];
        out[1] = a(0) - 0.5 * a(2);
        for (k, o) in out.iter_mut().enumerate().skip(2) {
            *o = (a(k - 1) - a(k + 1)) / (2.0 * k as f64);
        }
        let scale = 0.5 * (self.b - self.a);
        out.iter_mut().for_each(|c| *c *= scale);
        // value at t = -1 is sum_k out_k (-1)^k
        let at_lo: f64 = out
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, c)| if k % 2 == 0 { *c } else { -*c })
            .sum();
        out[0] = -at_lo;
        Chebyshev {
            a: self.a,
            b: self.b,
            coeffs: out,
        }
    }

    /// Integral over the whole domain.
    pub fn total(&self) -> f64 {
        let s: f64 = self
            .coeffs
            .iter()
            .enumerate()
            .filter(|(k, _)| k % 2 == 0)
            .map(|(k, c)| c * 2.0 / (1.0 - (k * k) as f64))
            .sum();
        s * 0.5 * (self.b - self.a)
    }
}

const KRONROD_X: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const KRONROD_W: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
/// Gauss weights for the odd-indexed Kronrod nodes.
const GAUSS7_W: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];
const MAX_PANELS: usize = 400;

struct Panel {
    nodes: Vec<(f64, f64)>,
    kronrod: f64,
    err: f64,
}

fn kronrod_panel<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> Panel {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    let mut nodes = Vec::with_capacity(15);
    let (mut k, mut g) = (0.0, 0.0);
    let mut eval = |x: f64, wk: f64, wg: f64| {
        let v = f(x);
        let v = if v.is_finite() { v } else { 0.0 };
        k += wk * v;
        g += wg * v;
        nodes.push((x, wk * half));
    };
    for j in 0..8 {
        let wg = if j % 2 == 1 { GAUSS7_W[j / 2] } else { 0.0 };
        eval(mid - half * KRONROD_X[j], KRONROD_W[j], wg);
        if j < 7 {
            eval(mid + half * KRONROD_X[j], KRONROD_W[j], wg);
        }
    }
    Panel {
        nodes,
        kronrod: k * half,
        err: ((k - g) * half).abs(),
    }
}

/// Nodes and weights of a globally adaptive Gauss-Kronrod (7, 15) rule for
/// `f` on `[a, b]`, with initial panels split at `breaks`. The panel with the
/// largest error estimate is bisected until the estimates sum to at most
/// `rel_tol` times the integral.
pub fn adaptive_rule<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, breaks: &[f64], rel_tol: f64) -> Vec<(f64, f64)> {
    let mut cuts = vec![a];
    let mut inner: Vec<f64> = breaks.iter().copied().filter(|x| *x > a && *x < b).collect();
    inner.sort_by(|x, y| x.partial_cmp(y).unwrap());
    cuts.extend(inner);
    cuts.push(b);
    let mut panels: Vec<(f64, f64, Panel)> = cuts
        .windows(2)
        .filter(|w| w[1] > w[0])
        .map(|w| (w[0], w[1], kronrod_panel(&f, w[0], w[1])))
        .collect();
    while panels.len() < MAX_PANELS {
        let total: f64 = panels.iter().map(|p| p.2.kronrod).sum();
        let err: f64 = panels.iter().map(|p| p.2.err).sum();
        if err <= rel_tol * total.abs() {
            break;
        }
        let (i, _) = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2.err.partial_cmp(&y.1 .2.err).unwrap())
            .unwrap();
        let (lo, hi, _) = panels.swap_remove(i);
        let m = 0.5 * (lo + hi);
        panels.push((lo, m, kronrod_panel(&f, lo, m)));
        panels.push((m, hi, kronrod_panel(&f, m, hi)));
    }
    panels.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap());
    panels.into_iter().flat_map(|p| p.2.nodes).collect()
}

/// Solve `f(x) = target` for increasing `f` on `[lo, hi]` by safeguarded
/// secant/bisection. Returns `None` when the target is not bracketed.
pub fn solve_increasing<F: FnMut(f64) -> f64>(
    mut f: F,
    target: f64,
    lo: f64,
    hi: f64,
    x_tol: f64,
    f_tol: f64,
) -> Option<f64> {
    let (mut a, mut b) = (lo, hi);
    let mut fa = f(a) - target;
    let mut fb = f(b) - target;
    if fa > 0.0 || fb < 0.0 {
        return None;
    }
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    // Illinois variant of regula falsi, falling back to bisection.
    let mut side = 0i8;
    for _ in 0..200 {
        let mut x = (a * fb - b * fa) / (fb - fa);
        if !(x > a && x < b) {
            x = 0.5 * (a + b);
        }
        let fx = f(x) - target;
        if fx.abs() <= f_tol || (b - a) <= x_tol {
            return Some(x);
        }
        if fx < 0.0 {
            a = x;
            fa = fx;
            if side == -1 {
                fb *= 0.5;
            }
            side = -1;
        } else {
            b = x;
            fb = fx;
            if side == 1 {
                fa *= 0.5;
            }
            side = 1;
        }
    }
    Some(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_rule_resolves_narrow_peaks() {
        // two Cauchy bumps of width 1e-3 far apart
        let f = |x: f64| 1e-3 / (1e-6 + (x - 3.0).powi(2)) + 1e-3 / (1e-6 + (x + 40.0).powi(2));
        let rule = adaptive_rule(f, -100.0, 100.0, &[3.0, -40.0], 1e-12);
        let got: f64 = rule.iter().map(|(x, w)| w * f(*x)).sum();
        let want = (97.0f64 / 1e-3).atan() + (103.0f64 / 1e-3).atan() + (140.0f64 / 1e-3).atan() + (60.0f64 / 1e-3).atan();
        assert!((got - want).abs() < 1e-9 * want, "{got} vs {want}");
        let poly: f64 = adaptive_rule(|x| x * x, 0.0, 3.0, &[], 1e-14).iter().map(|(x, w)| w * x * x).sum();
        assert!((poly - 9.0).abs() < 1e-13);
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let r = gauss_legendre(12);
        let s: f64 = r.nodes.iter().zip(&r.weights).map(|(x, w)| w * x.powi(22)).sum();
        assert!((s - 2.0 / 23.0).abs() < 1e-14);
        let total: f64 = r.weights.iter().sum();
        assert!((total - 2.0).abs() < 1e-14);
        let big = gauss_legendre(240);
        let g: f64 = big
            .mapped(-10.0, 10.0)
            .iter()
            .map(|(x, w)| w * (-0.5 * x * x).exp())
            .sum();
        assert!((g - (2.0 * PI).sqrt()).abs() < 1e-13);
    }

    #[test]
    fn double_exponential_rules() {
        let line = sinh_sinh(1.0 / 32.0, 4.5);
        let g: f64 = line.iter().map(|(x, w)| w * (-0.5 * x * x).exp()).sum();
        assert!((g - (2.0 * PI).sqrt()).abs() < 1e-13);
        let c: f64 = line.iter().map(|(x, w)| w / (1.0 + x * x)).sum();
        assert!((c - PI).abs() < 1e-12);
        let half = exp_sinh(1.0 / 32.0, 4.5);
        // Gamma(0.5) = sqrt(pi)
        let g: f64 = half.iter().map(|(x, w)| w * x.powf(-0.5) * (-x).exp()).sum();
        assert!((g - PI.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn chebyshev_cdf_of_normal_density() {
        let n = 120;
        let pts = chebyshev_points(n, -10.0, 10.0);
        let vals: Vec<f64> = pts
            .iter()
            .map(|x| (-0.5 * x * x).exp() / (2.0 * PI).sqrt())
            .collect();
        let cheb = Chebyshev::interpolate(-10.0, 10.0, &vals);
        assert!((cheb.total() - 1.0).abs() < 1e-12);
        let cdf = cheb.integral();
        assert!(cdf.eval(-10.0).abs() < 1e-14);
        assert!((cdf.eval(0.0) - 0.5).abs() < 1e-12);
        assert!((cdf.eval(1.6448536269514722) - 0.95).abs() < 1e-12);
        let q = solve_increasing(|x| cdf.eval(x), 0.975, -10.0, 10.0, 1e-14, 1e-15).unwrap();
        assert!((q - 1.959963984540054).abs() < 1e-10);
    }
}
