//! Dense row-major matrices and the handful of kernels the solvers need.
//!
//! Every constructor rejects non-finite input; downstream code assumes
//! finiteness and never re-checks it.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for DenseMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "DenseMatrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape("DenseMatrix::new", "positive dims", format!("{rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::shape("DenseMatrix::new", rows * cols, data.len()));
        }
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: k / cols,
                col: k % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("DenseMatrix::from_rows", "equal row lengths", "ragged rows"));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dims must be positive");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        m.data.fill(value);
        m
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = Self::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                m.data[i * cols + j] = f(i, j);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Entrywise combination of two equally shaped matrices.
    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.require_same_shape(other, "zip_map")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("inner dim {}", self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * other^T`
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{} columns", self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(Self::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `self^T * other`
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("{} rows", self.rows),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius(&self) -> f64 {
        frob2_sq(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min_entry(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn is_nonneg(&self) -> bool {
        self.data.iter().all(|&v| v >= 0.0)
    }

    pub(crate) fn require_same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{}x{}", self.rows, self.cols),
                format!("{}x{}", other.rows, other.cols),
            ));
        }
        Ok(())
    }
}

impl Index<(usize, usize)> for DenseMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

/// A dense matrix whose entries are all `>= 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct NonNegMatrix(DenseMatrix);

impl NonNegMatrix {
    pub fn new(m: DenseMatrix) -> Result<Self> {
        if let Some(k) = m.data.iter().position(|&v| v < 0.0) {
            return Err(Error::Negative {
                row: k / m.cols,
                col: k % m.cols,
                value: m.data[k],
            });
        }
        Ok(Self(m))
    }

    /// Clamp tiny negative round-off to zero; anything below `-tol` is an error.
    pub fn from_clamped(mut m: DenseMatrix, tol: f64) -> Result<Self> {
        for v in &mut m.data {
            if *v < 0.0 && *v >= -tol {
                *v = 0.0;
            }
        }
        Self::new(m)
    }

    pub fn as_dense(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_dense(self) -> DenseMatrix {
        self.0
    }
}

impl std::ops::Deref for NonNegMatrix {
    type Target = DenseMatrix;

    fn deref(&self) -> &DenseMatrix {
        &self.0
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Squared Frobenius norm.
pub fn frob2_sq(x: &DenseMatrix) -> f64 {
    x.data.iter().map(|v| v * v).sum()
}

/// Entrywise l1 norm.
pub fn l1_norm(x: &DenseMatrix) -> f64 {
    x.data.iter().map(|v| v.abs()).sum()
}

/// Outer product `u ⊗ v`.
pub fn tensor(u: &[f64], v: &[f64]) -> Result<DenseMatrix> {
    if u.is_empty() || v.is_empty() {
        return Err(Error::InvalidParam("tensor of an empty vector".into()));
    }
    let data = u.iter().flat_map(|&a| v.iter().map(move |&b| a * b)).collect();
    DenseMatrix::new(u.len(), v.len(), data)
}

/// Solve `m x = rhs` for symmetric positive definite `m` (n×n, row-major) by
/// Cholesky. Returns `None` if a pivot is not strictly positive.
pub fn solve_spd(m: &[f64], rhs: &[f64], n: usize) -> Option<Vec<f64>> {
    debug_assert_eq!(m.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = m[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = rhs[i];
        for k in 0..i {
            s -= l[i * n + k] * y[k];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn frob2_sq_examples() {
        assert_eq!(frob2_sq(&DenseMatrix::zeros(3, 3)), 0.0);
        assert_eq!(frob2_sq(&DenseMatrix::from_rows(&[vec![3.0, 4.0]]).unwrap()), 25.0);

        let x = random(5, 7, 11);
        let mut oracle = 0.0;
        for i in 0..5 {
            for j in 0..7 {
                oracle += x[(i, j)].powi(2);
            }
        }
        assert!((frob2_sq(&x) - oracle).abs() < 1e-12);
    }

    #[test]
    fn l1_norm_examples() {
        let x = DenseMatrix::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.0]]).unwrap();
        assert_eq!(l1_norm(&x), 6.0);
        assert_eq!(l1_norm(&DenseMatrix::zeros(2, 2)), 0.0);

        let x = random(4, 4, 12);
        let mut oracle = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                oracle += x[(i, j)].abs();
            }
        }
        assert!((l1_norm(&x) - oracle).abs() < 1e-12);
    }

    #[test]
    fn tensor_examples() {
        let e1 = [1.0, 0.0, 0.0];
        let e2 = [0.0, 1.0, 0.0];
        let t = tensor(&e1, &e2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if (i, j) == (0, 1) { 1.0 } else { 0.0 };
                assert_eq!(t[(i, j)], want);
            }
        }
        let t = tensor(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(t, DenseMatrix::from_rows(&[vec![3.0, 4.0], vec![6.0, 8.0]]).unwrap());

        let u = random(1, 6, 13).into_vec();
        let v = random(1, 4, 14).into_vec();
        let col = DenseMatrix::new(6, 1, u.clone()).unwrap();
        let row = DenseMatrix::new(1, 4, v.clone()).unwrap();
        let prod = col.matmul(&row).unwrap();
        let t = tensor(&u, &v).unwrap();
        for (a, b) in t.as_slice().iter().zip(prod.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(tensor(&[], &[1.0]).is_err());
    }

    #[test]
    fn rejects_non_finite_and_bad_lengths() {
        assert!(matches!(
            DenseMatrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite { row: 0, col: 1 })
        ));
        assert!(DenseMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(NonNegMatrix::new(DenseMatrix::filled(2, 2, -1.0)).is_err());
    }

    #[test]
    fn products_agree() {
        let a = random(3, 4, 1);
        let b = random(5, 4, 2);
        let via_t = a.matmul(&b.transpose()).unwrap();
        let direct = a.matmul_t(&b).unwrap();
        let c = random(3, 5, 3);
        let tm = a.t_matmul(&c).unwrap();
        let tm_ref = a.transpose().matmul(&c).unwrap();
        for (x, y) in via_t.as_slice().iter().zip(direct.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in tm.as_slice().iter().zip(tm_ref.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn spd_solve() {
        let m = [4.0, 1.0, 1.0, 3.0];
        let x = solve_spd(&m, &[1.0, 2.0], 2).unwrap();
        assert!((4.0 * x[0] + x[1] - 1.0).abs() < 1e-14);
        assert!((x[0] + 3.0 * x[1] - 2.0).abs() < 1e-14);
        assert!(solve_spd(&[0.0], &[1.0], 1).is_none());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn frob_bounded_by_l1_squared(seed in 0u64..500, r in 1usize..6, c in 1usize..6) {
                let x = random(r, c, seed);
                prop_assert!(frob2_sq(&x) <= l1_norm(&x).powi(2) + 1e-12);
            }

            #[test]
            fn tensor_is_rank_one(seed in 0u64..500) {
                let u = random(1, 4, seed).into_vec();
                let v = random(1, 3, seed + 1000).into_vec();
                let t = tensor(&u, &v).unwrap();
                for i in 0..4 {
                    for k in i + 1..4 {
                        for j in 0..3 {
                            for l in j + 1..3 {
                                let minor = t[(i, j)] * t[(k, l)] - t[(i, l)] * t[(k, j)];
                                prop_assert!(minor.abs() < 1e-10);
                            }
                        }
                    }
                }
            }

            #[test]
            fn kernels_are_pure(seed in 0u64..200) {
                let x = random(4, 5, seed);
                prop_assert_eq!(frob2_sq(&x).to_bits(), frob2_sq(&x.clone()).to_bits());
                prop_assert_eq!(l1_norm(&x).to_bits(), l1_norm(&x.clone()).to_bits());
            }
        }
    }
}
