//! Dense complex linear algebra shared by every other module.
//!
//! Everything here works on small dense matrices (tens of rows at most), so
//! the spectral quantities are computed from a full Hermitian
//! eigendecomposition rather than iterative methods.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;
pub type CVector = DVector<C64>;
pub type CMatrix = DMatrix<C64>;

/// Relative asymmetry tolerated by [`Hermitian::new`].
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Inputs to the PSD-only operations may dip this far below zero, relative to
/// their largest eigenvalue (interior-point output is PSD only to tolerance).
pub const PSD_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix has a non-finite entry")]
    NonFinite,
    #[error("matrix is not Hermitian (asymmetry {asymmetry:.3e})")]
    NotHermitian { asymmetry: f64 },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:.3e})")]
    Indefinite { min_eigenvalue: f64 },
    #[error("rank-one residual sigma2/sigma1 = {ratio:.3e} exceeds {tol:.3e}")]
    RankToleranceExceeded { ratio: f64, tol: f64 },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// A square complex matrix equal to its conjugate transpose.
///
/// The constructor checks the asymmetry against [`HERMITIAN_TOL`] and then
/// stores the exact Hermitian part, so downstream code can rely on exact
/// symmetry.
#[derive(Debug, Clone, PartialEq)]
pub struct Hermitian(CMatrix);

impl Hermitian {
    pub fn new(m: CMatrix) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(NumericsError::NotSquare { rows: m.nrows(), cols: m.ncols() });
        }
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(NumericsError::NonFinite);
        }
        let asymmetry = (&m - m.adjoint()).norm();
        if asymmetry > HERMITIAN_TOL * m.norm().max(1.0) {
            return Err(NumericsError::NotHermitian { asymmetry });
        }
        Ok(Self::symmetrized(m))
    }

    /// Takes the Hermitian part `(A + Aᴴ)/2` without validation.
    pub fn symmetrized(m: CMatrix) -> Self {
        let h = (&m + m.adjoint()).scale(0.5);
        Hermitian(h)
    }

    pub fn zeros(n: usize) -> Self {
        Hermitian(CMatrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        Hermitian(CMatrix::identity(n, n))
    }

    pub fn from_real_diagonal(values: &[f64]) -> Self {
        let d = CVector::from_iterator(values.len(), values.iter().map(|&x| C64::new(x, 0.0)));
        Hermitian(CMatrix::from_diagonal(&d))
    }

    /// The lifted matrix `w wᴴ`.
    pub fn outer(w: &CVector) -> Self {
        Hermitian::symmetrized(w * w.adjoint())
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.diagonal().iter().map(|z| z.re).sum()
    }

    /// Real inner product `Re Tr(Aᴴ B)`.
    pub fn inner(&self, other: &Hermitian) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a.conj() * b).re).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// `xᴴ A x`, which is real for Hermitian `A`.
    pub fn quadratic_form(&self, x: &CVector) -> f64 {
        (x.adjoint() * &self.0 * x)[(0, 0)].re
    }

    pub fn scaled(&self, s: f64) -> Hermitian {
        Hermitian(self.0.scale(s))
    }

    pub fn add(&self, other: &Hermitian) -> Hermitian {
        Hermitian(&self.0 + &other.0)
    }

    pub fn sub(&self, other: &Hermitian) -> Hermitian {
        Hermitian(&self.0 - &other.0)
    }

    /// Congruence `Bᴴ A B`.
    pub fn congruence(&self, b: &CMatrix) -> Hermitian {
        Hermitian::symmetrized(b.adjoint() * &self.0 * b)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        hermitian_eig(self).values.last().copied().unwrap_or(0.0)
    }
}

/// Eigenvalues sorted descending with matching orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: CMatrix,
}

impl EigenDecomposition {
    pub fn vector(&self, i: usize) -> CVector {
        self.vectors.column(i).into_owned()
    }

    /// Rebuilds `U diag(values) Uᴴ`.
    pub fn reconstruct(&self) -> CMatrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let s = self.values[j];
            scaled.column_mut(j).iter_mut().for_each(|z| *z *= s);
        }
        scaled * self.vectors.adjoint()
    }
}

/// Full eigendecomposition of a Hermitian matrix, eigenvalues descending.
///
/// Ties keep the order produced by the underlying solver (stable sort), so
/// repeated calls on the same input give the same eigenvectors.
pub fn hermitian_eig(a: &Hermitian) -> EigenDecomposition {
    let n = a.dim();
    if n == 0 {
        return EigenDecomposition { values: vec![], vectors: CMatrix::zeros(0, 0) };
    }
    let eig = a.as_matrix().clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    EigenDecomposition { values, vectors }
}

/// Real symmetric embedding `[[Re A, −Im A], [Im A, Re A]]`.
pub fn real_embed(a: &Hermitian) -> DMatrix<f64> {
    let n = a.dim();
    let m = a.as_matrix();
    DMatrix::from_fn(2 * n, 2 * n, |r, c| {
        let z = m[(r % n, c % n)];
        match (r < n, c < n) {
            (true, true) | (false, false) => z.re,
            (true, false) => -z.im,
            (false, true) => z.im,
        }
    })
}

fn check_psd(eig: &EigenDecomposition) -> Result<()> {
    let top = eig.values.first().copied().unwrap_or(0.0).abs();
    let min = eig.values.last().copied().unwrap_or(0.0);
    if min < -PSD_TOL * top.max(1.0) {
        return Err(NumericsError::Indefinite { min_eigenvalue: min });
    }
    Ok(())
}

/// `‖A‖_* − ‖A‖_2`, the sum of all singular values but the largest.
///
/// Zero exactly when `A` has rank at most one.
pub fn nuclear_minus_spectral(a: &Hermitian) -> Result<f64> {
    let eig = hermitian_eig(a);
    check_psd(&eig)?;
    Ok(nuclear_minus_spectral_from(&eig.values))
}

pub(crate) fn nuclear_minus_spectral_from(values: &[f64]) -> f64 {
    let mut sv: Vec<f64> = values.iter().map(|x| x.abs()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv.iter().skip(1).sum()
}

/// Rotates `v` so that its largest-magnitude entry (first one on ties) is
/// real and nonnegative.
pub fn fix_global_phase(v: &mut CVector) {
    let mut best = 0;
    let mut best_mag = -1.0;
    for (i, z) in v.iter().enumerate() {
        let m = z.norm();
        if m > best_mag * (1.0 + 1e-12) {
            best = i;
            best_mag = m;
        }
    }
    if best_mag > 0.0 {
        let rot = v[best].conj() / best_mag;
        v.iter_mut().for_each(|z| *z *= rot);
    }
}

/// Recovers `w` with `A ≈ w wᴴ` from the leading eigenpair.
///
/// Fails when the second singular value is not negligible against the first.
pub fn extract_rank_one(a: &Hermitian, rel_tol: f64) -> Result<CVector> {
    let eig = hermitian_eig(a);
    check_psd(&eig)?;
    let n = a.dim();
    let s1 = eig.values[0].max(0.0);
    let mut sv: Vec<f64> = eig.values.iter().map(|x| x.abs()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let s2 = sv.get(1).copied().unwrap_or(0.0);
    if s1 <= 0.0 {
        if sv[0] == 0.0 {
            return Ok(CVector::zeros(n));
        }
        return Err(NumericsError::RankToleranceExceeded { ratio: f64::INFINITY, tol: rel_tol });
    }
    let ratio = s2 / s1;
    if ratio > rel_tol {
        return Err(NumericsError::RankToleranceExceeded { ratio, tol: rel_tol });
    }
    let mut w = eig.vector(0) * C64::new(s1.sqrt(), 0.0);
    fix_global_phase(&mut w);
    Ok(w)
}

/// Real part of `aᴴ b`.
pub fn re_dot(a: &CVector, b: &CVector) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x.conj() * y).re).sum()
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    pub fn random_cvec<R: Rng>(rng: &mut R, n: usize) -> CVector {
        CVector::from_fn(n, |_, _| {
            C64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
        })
    }

    pub fn random_cmat<R: Rng>(rng: &mut R, r: usize, c: usize) -> CMatrix {
        CMatrix::from_fn(r, c, |_, _| {
            C64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
        })
    }

    pub fn random_hermitian<R: Rng>(rng: &mut R, n: usize) -> Hermitian {
        Hermitian::symmetrized(random_cmat(rng, n, n))
    }

    /// `B Bᴴ` with `B` of shape `n × rank`.
    pub fn random_psd<R: Rng>(rng: &mut R, n: usize, rank: usize) -> Hermitian {
        let b = random_cmat(rng, n, rank);
        Hermitian::symmetrized(&b * b.adjoint())
    }
}
