//! Index contractions shared by the expansion formulas.
//!
//! All arrays are dense over the full parameter range; `col(a)` extracts the
//! interest column `a^{r1}`.

use crate::tensor::{Matrix, Tensor};

pub fn col(a: &Matrix) -> Vec<f64> {
    (0..a.nrows()).map(|r| a[(r, 0)]).collect()
}

/// `X_rst v^r M^st`.
pub fn t3_v_m(x: &Tensor, v: &[f64], m: &Matrix) -> f64 {
    let d = x.dim();
    let mut s = 0.0;
    for r in 0..d {
        if v[r] == 0.0 {
            continue;
        }
        for q in 0..d {
            for t in 0..d {
                s += x.at3(r, q, t) * v[r] * m[(q, t)];
            }
        }
    }
    s
}

/// `X_rst v^r v^s v^t`.
pub fn t3_vvv(x: &Tensor, v: &[f64]) -> f64 {
    let d = x.dim();
    let mut s = 0.0;
    for r in 0..d {
        for q in 0..d {
            for t in 0..d {
                s += x.at3(r, q, t) * v[r] * v[q] * v[t];
            }
        }
    }
    s
}

/// `A^rs B^tu Q_rstu`.
pub fn quad(a: &Matrix, b: &Matrix, q: &Tensor) -> f64 {
    let d = q.dim();
    let mut s = 0.0;
    for r in 0..d {
        for q2 in 0..d {
            let ars = a[(r, q2)];
            if ars == 0.0 {
                continue;
            }
            for t in 0..d {
                for u in 0..d {
                    s += ars * b[(t, u)] * q.at4(r, q2, t, u);
                }
            }
        }
    }
    s
}

/// `A^ru B^st C^vw X_rst Y_uvw`.
pub fn pair_a(a: &Matrix, b: &Matrix, c: &Matrix, x: &Tensor, y: &Tensor) -> f64 {
    let d = x.dim();
    // x_r = X_rst B^st, y_u = Y_uvw C^vw
    let xr: Vec<f64> = (0..d)
        .map(|r| (0..d).flat_map(|s| (0..d).map(move |t| (s, t))).map(|(s, t)| x.at3(r, s, t) * b[(s, t)]).sum())
        .collect();
    let yu: Vec<f64> = (0..d)
        .map(|u| (0..d).flat_map(|v| (0..d).map(move |w| (v, w))).map(|(v, w)| y.at3(u, v, w) * c[(v, w)]).sum())
        .collect();
    let mut s = 0.0;
    for r in 0..d {
        for u in 0..d {
            s += a[(r, u)] * xr[r] * yu[u];
        }
    }
    s
}

/// `A^ru B^sw C^tv X_rst Y_uvw`.
pub fn pair_b(a: &Matrix, b: &Matrix, c: &Matrix, x: &Tensor, y: &Tensor) -> f64 {
    let d = x.dim();
    let mut s = 0.0;
    for r in 0..d {
        for q in 0..d {
            for t in 0..d {
                let xv = x.at3(r, q, t);
                if xv == 0.0 {
                    continue;
                }
                for u in 0..d {
                    let au = a[(r, u)];
                    if au == 0.0 {
                        continue;
                    }
                    for v in 0..d {
                        let cv = c[(t, v)];
                        if cv == 0.0 {
                            continue;
                        }
                        for w in 0..d {
                            s += au * b[(q, w)] * cv * xv * y.at3(u, v, w);
                        }
                    }
                }
            }
        }
    }
    s
}

/// `A^rs B^tu X_rst p_u`.
pub fn t3_mm_p(a: &Matrix, b: &Matrix, x: &Tensor, p: &[f64]) -> f64 {
    let d = x.dim();
    let bp: Vec<f64> = (0..d).map(|t| (0..d).map(|u| b[(t, u)] * p[u]).sum()).collect();
    let mut s = 0.0;
    for r in 0..d {
        for q in 0..d {
            for t in 0..d {
                s += a[(r, q)] * x.at3(r, q, t) * bp[t];
            }
        }
    }
    s
}

/// `A^rs P_rs`.
pub fn m_m(a: &Matrix, p: &Matrix) -> f64 {
    a.component_mul(p).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_contractions_against_brute_force() {
        let d = 2;
        let a = Matrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]);
        let b = Matrix::from_row_slice(2, 2, &[-0.5, 0.1, 0.1, 0.7]);
        let c = Matrix::from_row_slice(2, 2, &[0.2, -0.4, -0.4, 1.1]);
        let mut x = Tensor::zeros(2, 3);
        let mut y = Tensor::zeros(2, 3);
        for (k, v) in x.data_mut().iter_mut().enumerate() {
            *v = (k as f64 * 0.37).sin();
        }
        for (k, v) in y.data_mut().iter_mut().enumerate() {
            *v = (k as f64 * 0.91).cos();
        }
        let (mut sa, mut sb) = (0.0, 0.0);
        for r in 0..d {
            for s in 0..d {
                for t in 0..d {
                    for u in 0..d {
                        for v in 0..d {
                            for w in 0..d {
                                let xy = x.at3(r, s, t) * y.at3(u, v, w);
                                sa += a[(r, u)] * b[(s, t)] * c[(v, w)] * xy;
                                sb += a[(r, u)] * b[(s, w)] * c[(t, v)] * xy;
                            }
                        }
                    }
                }
            }
        }
        assert!((pair_a(&a, &b, &c, &x, &y) - sa).abs() < 1e-13);
        assert!((pair_b(&a, &b, &c, &x, &y) - sb).abs() < 1e-13);
    }
}
