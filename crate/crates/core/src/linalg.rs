//! Fixed-size dense matrices for the 1x1 to 4x4 blocks the model needs.

use core::ops::{Add, Index, IndexMut, Mul, Sub};

use crate::error::{Error, Result};
use crate::math;

pub type Vector<const N: usize> = [f64; N];

/// Smallest pivot accepted by [`Matrix::cholesky`].
pub const PIVOT_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Matrix<const N: usize>(pub [[f64; N]; N]);

pub type Matrix2 = Matrix<2>;
pub type Matrix3 = Matrix<3>;

impl<const N: usize> Default for Matrix<N> {
    fn default() -> Self {
        Self::zeros()
    }
}

impl<const N: usize> Matrix<N> {
    pub const fn zeros() -> Self {
        Matrix([[0.0; N]; N])
    }

    pub fn identity() -> Self {
        Self::from_diagonal([1.0; N])
    }

    pub fn from_diagonal(d: Vector<N>) -> Self {
        let mut m = Self::zeros();
        for i in 0..N {
            m.0[i][i] = d[i];
        }
        m
    }

    pub fn outer(a: &Vector<N>, b: &Vector<N>) -> Self {
        let mut m = Self::zeros();
        for i in 0..N {
            for j in 0..N {
                m.0[i][j] = a[i] * b[j];
            }
        }
        m
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut m = *self;
        for row in m.0.iter_mut() {
            for v in row.iter_mut() {
                *v *= s;
            }
        }
        m
    }

    pub fn transpose(&self) -> Self {
        let mut m = Self::zeros();
        for i in 0..N {
            for j in 0..N {
                m.0[i][j] = self.0[j][i];
            }
        }
        m
    }

    pub fn mul_vec(&self, v: &Vector<N>) -> Vector<N> {
        let mut out = [0.0; N];
        for i in 0..N {
            out[i] = (0..N).map(|j| self.0[i][j] * v[j]).sum();
        }
        out
    }

    pub fn trace(&self) -> f64 {
        (0..N).map(|i| self.0[i][i]).sum()
    }

    pub fn diagonal(&self) -> Vector<N> {
        let mut d = [0.0; N];
        for i in 0..N {
            d[i] = self.0[i][i];
        }
        d
    }

    /// Averages the matrix with its transpose.
    pub fn symmetrized(&self) -> Self {
        (*self + self.transpose()).scale(0.5)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut worst = 0.0;
        for i in 0..N {
            for j in 0..N {
                let d = math::abs(self.0[i][j] - other.0[i][j]);
                if d > worst {
                    worst = d;
                }
            }
        }
        worst
    }

    /// Lower Cholesky factor. Fails unless the matrix is symmetric and every
    /// pivot exceeds [`PIVOT_FLOOR`].
    pub fn cholesky(&self) -> Result<Self> {
        for i in 0..N {
            for j in 0..i {
                let (a, b) = (self.0[i][j], self.0[j][i]);
                let tol = 1e-10 * (math::abs(a) + math::abs(b)).max(1.0);
                if !(math::abs(a - b) <= tol) {
                    return Err(Error::NotPositiveDefinite);
                }
            }
        }
        let mut l = Self::zeros();
        for j in 0..N {
            let mut d = self.0[j][j];
            for k in 0..j {
                d -= l.0[j][k] * l.0[j][k];
            }
            if !(d > PIVOT_FLOOR) {
                return Err(Error::NotPositiveDefinite);
            }
            let ljj = math::sqrt(d);
            l.0[j][j] = ljj;
            for i in (j + 1)..N {
                let mut s = self.0[i][j];
                for k in 0..j {
                    s -= l.0[i][k] * l.0[j][k];
                }
                l.0[i][j] = s / ljj;
            }
        }
        Ok(l)
    }

    /// `L L^T` for a lower-triangular `self`.
    pub fn lower_gram(&self) -> Self {
        *self * self.transpose()
    }

    /// Solves `L x = b` for lower-triangular `self`.
    pub fn forward_solve(&self, b: &Vector<N>) -> Vector<N> {
        let mut x = [0.0; N];
        for i in 0..N {
            let mut s = b[i];
            for k in 0..i {
                s -= self.0[i][k] * x[k];
            }
            x[i] = s / self.0[i][i];
        }
        x
    }

    /// Solves `L^T x = b` for lower-triangular `self`.
    pub fn backward_solve(&self, b: &Vector<N>) -> Vector<N> {
        let mut x = [0.0; N];
        for i in (0..N).rev() {
            let mut s = b[i];
            for k in (i + 1)..N {
                s -= self.0[k][i] * x[k];
            }
            x[i] = s / self.0[i][i];
        }
        x
    }

    /// Solves `(L L^T) x = b` for lower-triangular `self`.
    pub fn chol_solve(&self, b: &Vector<N>) -> Vector<N> {
        self.backward_solve(&self.forward_solve(b))
    }

    /// Inverse of `L L^T` for lower-triangular `self`.
    pub fn chol_inverse(&self) -> Self {
        let mut inv = Self::zeros();
        for j in 0..N {
            let mut e = [0.0; N];
            e[j] = 1.0;
            let col = self.chol_solve(&e);
            for i in 0..N {
                inv.0[i][j] = col[i];
            }
        }
        inv.symmetrized()
    }

    /// log det(L L^T) for lower-triangular `self`.
    pub fn chol_log_det(&self) -> f64 {
        2.0 * (0..N).map(|i| math::ln(self.0[i][i])).sum::<f64>()
    }

    /// Inverse of a symmetric positive definite matrix.
    pub fn spd_inverse(&self) -> Result<Self> {
        Ok(self.cholesky()?.chol_inverse())
    }
}

impl Matrix2 {
    pub fn new(a11: f64, a12: f64, a21: f64, a22: f64) -> Self {
        Matrix([[a11, a12], [a21, a22]])
    }

    pub fn determinant(&self) -> f64 {
        self.0[0][0] * self.0[1][1] - self.0[0][1] * self.0[1][0]
    }
}

impl<const N: usize> Add for Matrix<N> {
    type Output = Self;
    fn add(mut self, rhs: Self) -> Self {
        for i in 0..N {
            for j in 0..N {
                self.0[i][j] += rhs.0[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Sub for Matrix<N> {
    type Output = Self;
    fn sub(mut self, rhs: Self) -> Self {
        for i in 0..N {
            for j in 0..N {
                self.0[i][j] -= rhs.0[i][j];
            }
        }
        self
    }
}

impl<const N: usize> Mul for Matrix<N> {
    type Output = Self;
    fn mul(self, rhs: Self) -> Self {
        let mut m = Self::zeros();
        for i in 0..N {
            for j in 0..N {
                m.0[i][j] = (0..N).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        m
    }
}

impl<const N: usize> Index<(usize, usize)> for Matrix<N> {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.0[i][j]
    }
}

impl<const N: usize> IndexMut<(usize, usize)> for Matrix<N> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.0[i][j]
    }
}

pub fn add_vec<const N: usize>(a: &Vector<N>, b: &Vector<N>) -> Vector<N> {
    let mut out = *a;
    for i in 0..N {
        out[i] += b[i];
    }
    out
}

pub fn sub_vec<const N: usize>(a: &Vector<N>, b: &Vector<N>) -> Vector<N> {
    let mut out = *a;
    for i in 0..N {
        out[i] -= b[i];
    }
    out
}

pub fn dot<const N: usize>(a: &Vector<N>, b: &Vector<N>) -> f64 {
    (0..N).map(|i| a[i] * b[i]).sum()
}
