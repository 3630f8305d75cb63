//! Dense small tensors used for log-likelihood derivative arrays.
//!
//! Dimensions are tiny (at most a handful of parameters), so everything is
//! stored densely in row-major order. Symmetry is never assumed by the
//! accessors; it is checked where it matters.

use serde::{Deserialize, Serialize};

pub type Matrix = nalgebra::DMatrix<f64>;

/// A dense `order`-way array over `dim` indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    dim: usize,
    order: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(dim: usize, order: usize) -> Self {
        Tensor {
            dim,
            order,
            data: vec![0.0; dim.pow(order as u32)],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.order);
        idx.iter().fold(0, |acc, &i| acc * self.dim + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    #[inline]
    pub fn at2(&self, r: usize, s: usize) -> f64 {
        self.data[r * self.dim + s]
    }

    #[inline]
    pub fn at3(&self, r: usize, s: usize, t: usize) -> f64 {
        self.data[(r * self.dim + s) * self.dim + t]
    }

    #[inline]
    pub fn at4(&self, r: usize, s: usize, t: usize, u: usize) -> f64 {
        self.data[((r * self.dim + s) * self.dim + t) * self.dim + u]
    }

    /// All index tuples in row-major order.
    pub fn indices(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        let dim = self.dim;
        let order = self.order;
        (0..self.data.len()).map(move |mut flat| {
            let mut idx = vec![0; order];
            for slot in (0..order).rev() {
                idx[slot] = flat % dim;
                flat /= dim;
            }
            idx
        })
    }

    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scaled(&self, scale: f64) -> Tensor {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= scale);
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Largest difference between an entry and any permutation of its index.
    pub fn symmetry_defect(&self) -> f64 {
        let mut worst = 0.0_f64;
        for idx in self.indices() {
            let v = self.get(&idx);
            for perm in permutations(&idx) {
                worst = worst.max((v - self.get(&perm)).abs());
            }
        }
        worst
    }

    /// Replace each entry by the mean over the permutations of its index.
    pub fn symmetrize(&mut self) {
        let src = self.clone();
        for idx in src.indices() {
            let perms = permutations(&idx);
            let mean = perms.iter().map(|p| src.get(p)).sum::<f64>() / perms.len() as f64;
            self.set(&idx, mean);
        }
    }

    /// Relabel coordinates: `out[i..] = self[perm[i]..]`.
    pub fn permuted(&self, perm: &[usize]) -> Tensor {
        let mut out = Tensor::zeros(self.dim, self.order);
        for idx in self.indices() {
            let src: Vec<usize> = idx.iter().map(|&i| perm[i]).collect();
            out.set(&idx, self.get(&src));
        }
        out
    }

    pub fn from_matrix(m: &Matrix) -> Tensor {
        let dim = m.nrows();
        let mut t = Tensor::zeros(dim, 2);
        for r in 0..dim {
            for s in 0..dim {
                t.data[r * dim + s] = m[(r, s)];
            }
        }
        t
    }

    pub fn to_matrix(&self) -> Matrix {
        assert_eq!(self.order, 2);
        Matrix::from_fn(self.dim, self.dim, |r, s| self.at2(r, s))
    }
}

/// All orderings of `idx` (with repeats when `idx` has repeated entries).
pub fn permutations(idx: &[usize]) -> Vec<Vec<usize>> {
    if idx.len() <= 1 {
        return vec![idx.to_vec()];
    }
    let mut out = Vec::new();
    for i in 0..idx.len() {
        let mut rest = idx.to_vec();
        let head = rest.remove(i);
        for mut tail in permutations(&rest) {
            tail.insert(0, head);
            out.push(tail);
        }
    }
    out
}

/// Relabel the rows and columns of a square matrix.
pub fn permute_matrix(m: &Matrix, perm: &[usize]) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |r, s| m[(perm[r], perm[s])])
}
