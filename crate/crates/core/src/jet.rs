//! Truncated multivariate Taylor arithmetic.
//!
//! A [`Jet`] carries the Taylor coefficients of a function of up to three
//! variables through total degree four. Arithmetic on jets propagates exact
//! derivatives, which is how the built-in families produce closed-form
//! log-likelihood derivative tensors without hand-expanding every partial.

use std::sync::OnceLock;

use crate::tensor::{Matrix, Tensor};

pub const MAX_DIM: usize = 3;
pub const MAX_ORDER: usize = 4;
const MAX_COEFFS: usize = 35;

#[derive(Debug)]
pub struct JetSpace {
    dim: usize,
    order: usize,
    exps: Vec<[u8; MAX_DIM]>,
    lookup: [[[u8; MAX_ORDER + 1]; MAX_ORDER + 1]; MAX_ORDER + 1],
    mul: Vec<(u8, u8, u8)>,
}

impl JetSpace {
    fn build(dim: usize, order: usize) -> JetSpace {
        let mut exps = Vec::new();
        for deg in 0..=order {
            for a in (0..=deg).rev() {
                for b in (0..=deg - a).rev() {
                    let c = deg - a - b;
                    let e = [a as u8, b as u8, c as u8];
                    let used = e.iter().enumerate().all(|(i, &x)| i < dim || x == 0);
                    if used {
                        exps.push(e);
                    }
                }
            }
        }
        let mut lookup = [[[u8::MAX; MAX_ORDER + 1]; MAX_ORDER + 1]; MAX_ORDER + 1];
        for (k, e) in exps.iter().enumerate() {
            lookup[e[0] as usize][e[1] as usize][e[2] as usize] = k as u8;
        }
        let deg = |e: &[u8; 3]| (e[0] + e[1] + e[2]) as usize;
        let mut mul = Vec::new();
        for (i, ei) in exps.iter().enumerate() {
            for (j, ej) in exps.iter().enumerate() {
                if deg(ei) + deg(ej) <= order {
                    let k = lookup[(ei[0] + ej[0]) as usize][(ei[1] + ej[1]) as usize]
                        [(ei[2] + ej[2]) as usize];
                    mul.push((i as u8, j as u8, k));
                }
            }
        }
        JetSpace {
            dim,
            order,
            exps,
            lookup,
            mul,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    fn len(&self) -> usize {
        self.exps.len()
    }
}

/// Shared jet space for `dim` variables truncated at total degree `order`.
pub fn space(dim: usize, order: usize) -> &'static JetSpace {
    static SPACES: OnceLock<Vec<JetSpace>> = OnceLock::new();
    assert!((1..=MAX_DIM).contains(&dim), "jet dimension {dim} unsupported");
    assert!(order <= MAX_ORDER, "jet order {order} unsupported");
    let spaces = SPACES.get_or_init(|| {
        let mut v = Vec::new();
        for d in 1..=MAX_DIM {
            for k in 0..=MAX_ORDER {
                v.push(JetSpace::build(d, k));
            }
        }
        v
    });
    &spaces[(dim - 1) * (MAX_ORDER + 1) + order]
}

#[derive(Clone, Copy, Debug)]
pub struct Jet {
    space: &'static JetSpace,
    c: [f64; MAX_COEFFS],
}

impl Jet {
    pub fn constant(space: &'static JetSpace, value: f64) -> Jet {
        let mut c = [0.0; MAX_COEFFS];
        c[0] = value;
        Jet { space, c }
    }

    /// The coordinate function `x_i` expanded about `value`.
    pub fn variable(space: &'static JetSpace, i: usize, value: f64) -> Jet {
        let mut j = Jet::constant(space, value);
        if space.order >= 1 {
            let mut e = [0u8; 3];
            e[i] = 1;
            j.c[space.lookup[e[0] as usize][e[1] as usize][e[2] as usize] as usize] = 1.0;
        }
        j
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    pub fn space(&self) -> &'static JetSpace {
        self.space
    }

    pub fn add(&self, o: &Jet) -> Jet {
        let mut out = *self;
        for k in 0..self.space.len() {
            out.c[k] += o.c[k];
        }
        out
    }

    pub fn sub(&self, o: &Jet) -> Jet {
        let mut out = *self;
        for k in 0..self.space.len() {
            out.c[k] -= o.c[k];
        }
        out
    }

    pub fn scale(&self, s: f64) -> Jet {
        let mut out = *self;
        for k in 0..self.space.len() {
            out.c[k] *= s;
        }
        out
    }

    pub fn add_scalar(&self, s: f64) -> Jet {
        let mut out = *self;
        out.c[0] += s;
        out
    }

    pub fn mul(&self, o: &Jet) -> Jet {
        let mut c = [0.0; MAX_COEFFS];
        for &(i, j, k) in &self.space.mul {
            c[k as usize] += self.c[i as usize] * o.c[j as usize];
        }
        Jet {
            space: self.space,
            c,
        }
    }

    /// `f(self)` given `derivs[k] = f^(k)(self.value())` for `k = 0..=order`.
    pub fn compose(&self, derivs: &[f64]) -> Jet {
        let order = self.space.order;
        let mut e = *self;
        e.c[0] = 0.0;
        // Horner in the nilpotent part: sum_k f_k / k! e^k.
        let mut acc = Jet::constant(self.space, derivs[order] / factorial(order));
        for k in (0..order).rev() {
            acc = acc.mul(&e).add_scalar(derivs[k] / factorial(k));
        }
        acc
    }

    pub fn recip(&self) -> Jet {
        let x = self.value();
        let mut d = [0.0; MAX_ORDER + 1];
        let mut p = 1.0 / x;
        for (k, slot) in d.iter_mut().enumerate() {
            *slot = p;
            p *= -((k + 1) as f64) / x;
        }
        self.compose(&d)
    }

    pub fn ln(&self) -> Jet {
        let x = self.value();
        let mut d = [0.0; MAX_ORDER + 1];
        d[0] = x.ln();
        let mut p = 1.0 / x;
        for k in 1..=MAX_ORDER {
            d[k] = p;
            p *= -(k as f64) / x;
        }
        self.compose(&d)
    }

    /// Partial derivative with respect to the listed coordinates.
    pub fn derivative(&self, idx: &[usize]) -> f64 {
        let mut e = [0usize; 3];
        for &i in idx {
            e[i] += 1;
        }
        if e.iter().sum::<usize>() > self.space.order {
            return 0.0;
        }
        let k = self.space.lookup[e[0]][e[1]][e[2]] as usize;
        self.c[k] * e.iter().map(|&a| factorial(a)).product::<f64>()
    }
}

fn factorial(k: usize) -> f64 {
    [1.0, 1.0, 2.0, 6.0, 24.0][k]
}

/// Value and derivative tensors of a scalar function of the parameter.
///
/// Tensors above the requested order are left as zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivTensors {
    pub order: usize,
    pub value: f64,
    pub first: Vec<f64>,
    pub second: Matrix,
    pub third: Tensor,
    pub fourth: Tensor,
}

impl DerivTensors {
    pub fn zeros(dim: usize, order: usize) -> Self {
        DerivTensors {
            order,
            value: 0.0,
            first: vec![0.0; dim],
            second: Matrix::zeros(dim, dim),
            third: Tensor::zeros(dim, 3),
            fourth: Tensor::zeros(dim, 4),
        }
    }

    pub fn dim(&self) -> usize {
        self.first.len()
    }

    pub fn from_jet(j: &Jet) -> Self {
        let dim = j.space.dim;
        let order = j.space.order;
        let mut out = DerivTensors::zeros(dim, order);
        out.value = j.value();
        if order >= 1 {
            for r in 0..dim {
                out.first[r] = j.derivative(&[r]);
            }
        }
        if order >= 2 {
            for r in 0..dim {
                for s in 0..dim {
                    out.second[(r, s)] = j.derivative(&[r, s]);
                }
            }
        }
        if order >= 3 {
            for idx in Tensor::zeros(dim, 3).indices() {
                out.third.set(&idx, j.derivative(&idx));
            }
        }
        if order >= 4 {
            for idx in Tensor::zeros(dim, 4).indices() {
                out.fourth.set(&idx, j.derivative(&idx));
            }
        }
        out
    }

    pub fn add_assign(&mut self, o: &DerivTensors) {
        self.value += o.value;
        for (a, b) in self.first.iter_mut().zip(&o.first) {
            *a += b;
        }
        self.second += &o.second;
        self.third.add_scaled(&o.third, 1.0);
        self.fourth.add_scaled(&o.fourth, 1.0);
    }

    /// Relabel coordinates so that new slot `i` is old slot `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> DerivTensors {
        DerivTensors {
            order: self.order,
            value: self.value,
            first: perm.iter().map(|&p| self.first[p]).collect(),
            second: crate::tensor::permute_matrix(&self.second, perm),
            third: self.third.permuted(perm),
            fourth: self.fourth.permuted(perm),
        }
    }
}
