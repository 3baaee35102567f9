//! Dense linear algebra for the small symmetric systems every client solves.
//!
//! Everything is `f64`, row-major, and summed in a fixed left-to-right order
//! so results are reproducible across runs and thread counts. There is no
//! explicit inverse; systems are always factored and solved.

use crate::error::{Error, Result};

/// Square dense matrix stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    dim: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(dim: usize) -> Self {
        Matrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        let mut m = Self::zeros(dim);
        m.add_diagonal(scale);
        m
    }

    /// Builds a matrix from row-major data; `data.len()` must be a perfect square.
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: data.len(),
            });
        }
        Ok(Matrix { dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.dim + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.dim + col] = value;
    }

    #[inline]
    pub fn add_at(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.dim + col] += value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.dim..(row + 1) * self.dim]
    }

    pub fn add_diagonal(&mut self, value: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += value;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        check_dim(self.dim, other.dim)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// Copies the upper triangle into the lower one.
    pub fn mirror_upper(&mut self) {
        for i in 0..self.dim {
            for j in 0..i {
                self.data[i * self.dim + j] = self.data[j * self.dim + i];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute asymmetry `|a_ij - a_ji|`.
    pub fn max_asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.dim {
            for j in 0..i {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, v.len())?;
        Ok((0..self.dim).map(|i| dot_unchecked(self.row(i), v)).collect())
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_dim(self.dim, other.dim)?;
        let d = self.dim;
        let mut out = Matrix::zeros(d);
        for i in 0..d {
            for k in 0..d {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for j in 0..d {
                    out.data[i * d + j] += a * other.data[k * d + j];
                }
            }
        }
        Ok(out)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Spectral norm of a symmetric matrix by power iteration from the all-ones
    /// vector. Deterministic; accurate to roughly `tol` relative.
    pub fn symmetric_spectral_norm(&self, max_iter: usize, tol: f64) -> f64 {
        if self.dim == 0 {
            return 0.0;
        }
        let mut v = vec![1.0 / (self.dim as f64).sqrt(); self.dim];
        let mut estimate = 0.0;
        for _ in 0..max_iter {
            let w = self.matvec(&v).expect("square");
            let nrm = norm(&w);
            if nrm == 0.0 {
                return 0.0;
            }
            v = w.iter().map(|x| x / nrm).collect();
            if (nrm - estimate).abs() <= tol * nrm {
                return nrm;
            }
            estimate = nrm;
        }
        estimate
    }
}

/// Lower-triangular Cholesky factor `L` with `L Lᵀ = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdFactor {
    lower: Matrix,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.lower.dim
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// `L Lᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let d = self.dim();
        let mut out = Matrix::zeros(d);
        for i in 0..d {
            for j in 0..=i {
                let s = dot_unchecked(&self.lower.row(i)[..=j], &self.lower.row(j)[..=j]);
                out.set(i, j, s);
                out.set(j, i, s);
            }
        }
        out
    }
}

/// Factors `(A + Aᵀ)/2`. Fails on the first pivot that is not strictly
/// positive and finite.
pub fn cholesky(a: &Matrix) -> Result<SpdFactor> {
    let d = a.dim;
    let mut l = Matrix::zeros(d);
    for j in 0..d {
        let mut pivot = 0.5 * (a.get(j, j) + a.get(j, j));
        for k in 0..j {
            pivot -= l.get(j, k) * l.get(j, k);
        }
        if !(pivot > 0.0) || !pivot.is_finite() {
            return Err(Error::NotPositiveDefinite {
                index: j,
                value: pivot,
            });
        }
        let diag = pivot.sqrt();
        l.set(j, j, diag);
        for i in j + 1..d {
            let mut s = 0.5 * (a.get(i, j) + a.get(j, i));
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / diag);
        }
    }
    Ok(SpdFactor { lower: l })
}

/// Solves `A z = rhs` given the factor of `A`.
pub fn solve(factor: &SpdFactor, rhs: &[f64]) -> Result<Vec<f64>> {
    let d = factor.dim();
    check_dim(d, rhs.len())?;
    let l = &factor.lower;
    // forward: L w = rhs
    let mut w = vec![0.0; d];
    for i in 0..d {
        let s = rhs[i] - dot_unchecked(&l.row(i)[..i], &w[..i]);
        w[i] = s / l.get(i, i);
    }
    // backward: Lᵀ z = w
    let mut z = vec![0.0; d];
    for i in (0..d).rev() {
        let mut s = w[i];
        for (k, zk) in z.iter().enumerate().skip(i + 1) {
            s -= l.get(k, i) * zk;
        }
        z[i] = s / l.get(i, i);
    }
    Ok(z)
}

/// Element-wise mean, summed strictly in list order.
pub fn deterministic_mean<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean of an empty list".into()))?;
    let d = first.as_ref().len();
    let mut acc = vec![0.0; d];
    for v in vectors {
        let v = v.as_ref();
        check_dim(d, v.len())?;
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(acc)
}

/// Mean of matrices, summed in list order.
pub fn deterministic_matrix_mean(matrices: &[Matrix]) -> Result<Matrix> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean of an empty list".into()))?;
    let mut acc = Matrix::zeros(first.dim);
    for m in matrices {
        acc.add_assign(m)?;
    }
    acc.scale(1.0 / matrices.len() as f64);
    Ok(acc)
}

pub fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, got })
    }
}

#[inline]
fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    check_dim(a.len(), b.len())?;
    Ok(dot_unchecked(a, b))
}

pub fn norm(v: &[f64]) -> f64 {
    dot_unchecked(v, v).sqrt()
}

pub fn norm_sq(v: &[f64]) -> f64 {
    dot_unchecked(v, v)
}

/// `a - b`
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
