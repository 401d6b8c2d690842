//! Small dense/banded linear-algebra helpers shared by the solvers.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Square band matrix with symmetric bandwidth, column-major LAPACK-style
/// storage: entry (i, j) with |i - j| <= bw lives at `data[j*(2bw+1) + bw+i-j]`.
///
/// Used for the implicit-Euler Newton systems of FEM semidiscretizations,
/// where the stencil bandwidth is far below the dimension.
pub struct BandMatrix {
    dim: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandMatrix {
    pub fn zeros(dim: usize, bw: usize) -> Self {
        BandMatrix {
            dim,
            bw,
            data: vec![0.0; dim * (2 * bw + 1)],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i.abs_diff(j) <= self.bw);
        self.data[j * (2 * self.bw + 1) + self.bw + i - j] += v;
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i.abs_diff(j) > self.bw {
            return 0.0;
        }
        self.data[j * (2 * self.bw + 1) + self.bw + i - j]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[j * (2 * self.bw + 1) + self.bw + i - j] = v;
    }

    pub fn fill_from(&mut self, other: &BandMatrix) {
        debug_assert_eq!(self.dim, other.dim);
        debug_assert_eq!(self.bw, other.bw);
        self.data.copy_from_slice(&other.data);
    }

    /// y += scale * A x restricted to the band.
    pub fn gemv_add(&self, x: &DVector<f64>, scale: f64, y: &mut DVector<f64>) {
        let (d, bw) = (self.dim, self.bw);
        for j in 0..d {
            let xj = scale * x[j];
            if xj == 0.0 {
                continue;
            }
            let lo = j.saturating_sub(bw);
            let hi = (j + bw).min(d - 1);
            for i in lo..=hi {
                y[i] += self.get(i, j) * xj;
            }
        }
    }

    /// In-place LU factorization without pivoting. The Newton matrices this
    /// is applied to are mass-dominated and safely factorable; a vanishing
    /// pivot aborts so the caller can fall back to dense LU.
    pub fn factor(&mut self) -> Result<BandLu> {
        let (d, bw) = (self.dim, self.bw);
        let scale = self
            .data
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        for k in 0..d {
            let pivot = self.get(k, k);
            if pivot.abs() < 1e-14 * scale {
                return Err(Error::SingularSystem(format!(
                    "band LU pivot {:.3e} at row {k}",
                    pivot
                )));
            }
            let hi = (k + bw).min(d - 1);
            for i in k + 1..=hi {
                let l = self.get(i, k) / pivot;
                if l != 0.0 {
                    self.set(i, k, l);
                    for j in k + 1..=hi {
                        let v = self.get(i, j) - l * self.get(k, j);
                        self.set(i, j, v);
                    }
                }
            }
        }
        Ok(BandLu {
            dim: d,
            bw,
            data: std::mem::take(&mut self.data),
        })
    }
}

/// Factored form produced by [`BandMatrix::factor`].
pub struct BandLu {
    dim: usize,
    bw: usize,
    data: Vec<f64>,
}

impl BandLu {
    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[j * (2 * self.bw + 1) + self.bw + i - j]
    }

    pub fn solve_in_place(&self, b: &mut DVector<f64>) {
        let (d, bw) = (self.dim, self.bw);
        // Ly = b (unit lower triangular)
        for i in 0..d {
            let lo = i.saturating_sub(bw);
            let mut s = b[i];
            for j in lo..i {
                s -= self.at(i, j) * b[j];
            }
            b[i] = s;
        }
        // Ux = y
        for i in (0..d).rev() {
            let hi = (i + bw).min(d - 1);
            let mut s = b[i];
            for j in i + 1..=hi {
                s -= self.at(i, j) * b[j];
            }
            b[i] = s / self.at(i, i);
        }
    }
}

/// Bandwidth of a dense matrix, ignoring entries below `tol` in magnitude.
pub fn dense_bandwidth(m: &DMatrix<f64>, tol: f64) -> usize {
    let mut bw = 0;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            if m[(i, j)].abs() > tol {
                bw = bw.max(i.abs_diff(j));
            }
        }
    }
    bw
}

/// Largest principal angle (radians) between the column spans of two
/// orthonormal matrices.
pub fn max_principal_angle(u1: &DMatrix<f64>, u2: &DMatrix<f64>) -> f64 {
    let m = u1.transpose() * u2;
    let svd = m.svd(false, false);
    svd.singular_values
        .iter()
        .map(|s| s.clamp(-1.0, 1.0).acos())
        .fold(0.0f64, f64::max)
}

/// Frobenius deviation of U^T U from the identity.
pub fn orthonormality_defect(u: &DMatrix<f64>) -> f64 {
    let g = u.transpose() * u;
    let mut s = 0.0;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            let t = g[(i, j)] - if i == j { 1.0 } else { 0.0 };
            s += t * t;
        }
    }
    s.sqrt()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Cholesky-based SPD test (strict positive definiteness).
pub fn is_spd(m: &DMatrix<f64>) -> bool {
    m.clone().cholesky().is_some()
}
