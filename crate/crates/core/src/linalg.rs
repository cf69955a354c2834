//! Small dense symmetric linear algebra.
//!
//! Everything here works on `nalgebra` dense matrices. Dimensions in this
//! crate are tiny (the flattened parameter dimension of a desk-scale deep
//! linear network is a few tens), so cubic-cost dense routines are used
//! throughout.

use nalgebra::{DMatrix, DVector};

use crate::error::{non_finite, Error, Result};

/// Relative asymmetry accepted by [`SymMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Relative clipping tolerance for [`psd_sqrt`].
pub const DEFAULT_CLIP_REL: f64 = 1e-10;

/// Dense real symmetric matrix. The stored entries are exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Validates squareness, finiteness and symmetry (to [`SYMMETRY_TOL`]
    /// relative Frobenius asymmetry), then stores the symmetrized matrix.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::Shape(format!(
                "symmetric matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(non_finite("symmetric matrix entries"));
        }
        let norm = m.norm();
        let asym = (&m - m.transpose()).norm();
        if norm > 0.0 && asym / norm > SYMMETRY_TOL {
            return Err(Error::NotSymmetric {
                asymmetry: asym / norm,
            });
        }
        Ok(Self::symmetrize(m))
    }

    /// Averages `m` with its transpose. The caller guarantees finiteness and
    /// that any asymmetry is accumulation roundoff.
    pub(crate) fn symmetrize(m: DMatrix<f64>) -> Self {
        let t = m.transpose();
        SymMatrix((m + t) * 0.5)
    }

    pub fn zeros(dim: usize) -> Self {
        SymMatrix(DMatrix::zeros(dim, dim))
    }

    pub fn identity(dim: usize) -> Self {
        SymMatrix(DMatrix::identity(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }
}

/// Eigenvalues in descending order with matching orthonormal eigenvector columns.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let lambda = DMatrix::from_diagonal(&DVector::from_column_slice(&self.eigenvalues));
        &self.eigenvectors * lambda * self.eigenvectors.transpose()
    }
}

pub fn sym_eigendecompose(m: &SymMatrix) -> Result<SymEigen> {
    if m.0.iter().any(|x| !x.is_finite()) {
        return Err(non_finite("eigendecomposition input"));
    }
    let n = m.dim();
    if n == 0 {
        return Ok(SymEigen {
            eigenvalues: Vec::new(),
            eigenvectors: DMatrix::zeros(0, 0),
        });
    }
    let eig = m.0.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let eigenvectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    Ok(SymEigen {
        eigenvalues,
        eigenvectors,
    })
}

/// Symmetric positive semidefinite square root of a PSD matrix.
#[derive(Debug, Clone)]
pub struct PsdRoot {
    pub root: DMatrix<f64>,
    pub source: SymMatrix,
}

impl PsdRoot {
    /// ‖root·rootᵀ − source‖_F / ‖source‖_F (absolute when the source is zero).
    pub fn reconstruction_error(&self) -> f64 {
        let diff = (&self.root * self.root.transpose() - &self.source.0).norm();
        let scale = self.source.0.norm();
        if scale > 0.0 {
            diff / scale
        } else {
            diff
        }
    }
}

/// Symmetric PSD root with the default clipping tolerance
/// `DEFAULT_CLIP_REL · max|λ|`.
pub fn psd_sqrt(m: &SymMatrix) -> Result<PsdRoot> {
    psd_sqrt_with(m, None)
}

/// Symmetric PSD root `Q √Λ⁺ Qᵀ`. Eigenvalues in `[-clip_tol, 0)` are clipped
/// to zero; anything more negative is rejected.
pub fn psd_sqrt_with(m: &SymMatrix, clip_tol: Option<f64>) -> Result<PsdRoot> {
    let eig = sym_eigendecompose(m)?;
    let spectral_radius = eig
        .eigenvalues
        .iter()
        .fold(0.0_f64, |acc, &l| acc.max(l.abs()));
    let tol = clip_tol.unwrap_or(DEFAULT_CLIP_REL * spectral_radius);
    if let Some(&lowest) = eig.eigenvalues.last() {
        if lowest < -tol {
            return Err(Error::NotPsd {
                eigenvalue: lowest,
                tolerance: tol,
            });
        }
    }
    let n = m.dim();
    let mut root = DMatrix::zeros(n, n);
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda <= 0.0 {
            continue;
        }
        let s = lambda.sqrt();
        let q = eig.eigenvectors.column(k);
        root += (q * q.transpose()) * s;
    }
    let root = SymMatrix::symmetrize(root).into_inner();
    Ok(PsdRoot {
        root,
        source: m.clone(),
    })
}

/// Smallest and largest eigenvalue.
pub fn lambda_extremes(m: &SymMatrix) -> Result<(f64, f64)> {
    let eig = sym_eigendecompose(m)?;
    match (eig.eigenvalues.last(), eig.eigenvalues.first()) {
        (Some(&lo), Some(&hi)) => Ok((lo, hi)),
        _ => Err(Error::Shape("empty matrix has no eigenvalues".into())),
    }
}

/// Spectral norm `√λ_max(mᵀm)`, computed on the smaller Gram matrix.
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows() == 1 || m.ncols() == 1 {
        return m.norm();
    }
    let gram = if m.nrows() < m.ncols() {
        m * m.transpose()
    } else {
        m.transpose() * m
    };
    let gram = SymMatrix::symmetrize(gram);
    let eig = gram.0.symmetric_eigen();
    eig.eigenvalues
        .iter()
        .fold(0.0_f64, |a, &l| a.max(l))
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_sym(n: usize, seed: u64) -> SymMatrix {
        let mut state = seed;
        let mut next = || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        let a = DMatrix::from_fn(n, n, |_, _| next());
        SymMatrix::symmetrize(&a + a.transpose())
    }

    #[test]
    fn identity_eigen() {
        let e = sym_eigendecompose(&SymMatrix::identity(2)).unwrap();
        assert_eq!(e.eigenvalues.len(), 2);
        for l in &e.eigenvalues {
            assert!((l - 1.0).abs() < 1e-15);
        }
        let qtq = e.eigenvectors.transpose() * &e.eigenvectors;
        assert!((qtq - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn diagonal_eigen_descending() {
        let m = SymMatrix::from_diagonal(&[4.0, 9.0]).unwrap();
        let e = sym_eigendecompose(&m).unwrap();
        assert_eq!(e.eigenvalues, vec![9.0, 4.0]);
        assert!((e.eigenvectors[(1, 0)].abs() - 1.0).abs() < 1e-15);
        assert!((e.eigenvectors[(0, 1)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn random_reconstruction() {
        let m = random_sym(5, 7);
        let e = sym_eigendecompose(&m).unwrap();
        let err = (e.reconstruct() - m.matrix()).norm() / m.matrix().norm();
        assert!(err <= 1e-10, "{err}");
        let qtq = e.eigenvectors.transpose() * &e.eigenvectors;
        assert!((qtq - DMatrix::identity(5, 5)).norm() <= 1e-10);
        assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn rejects_non_finite_and_asymmetric() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, f64::NAN, f64::NAN, 1.0]);
        assert!(matches!(SymMatrix::new(m), Err(Error::NonFinite { .. })));
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 0.0, 1.0]);
        assert!(matches!(SymMatrix::new(m), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn sqrt_of_zero_and_diagonal() {
        let z = psd_sqrt(&SymMatrix::zeros(3)).unwrap();
        assert_eq!(z.root, DMatrix::zeros(3, 3));
        let d = psd_sqrt(&SymMatrix::from_diagonal(&[4.0, 9.0]).unwrap()).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        assert!((d.root - expected).norm() < 1e-14);
    }

    #[test]
    fn sqrt_rejects_negative_spectrum() {
        let m = SymMatrix::from_diagonal(&[1.0, -0.5]).unwrap();
        match psd_sqrt(&m) {
            Err(Error::NotPsd { eigenvalue, .. }) => assert_eq!(eigenvalue, -0.5),
            other => panic!("expected NotPsd, got {other:?}"),
        }
    }

    #[test]
    fn sqrt_clips_roundoff_negativity() {
        let m = SymMatrix::from_diagonal(&[1.0, -1e-13]).unwrap();
        let r = psd_sqrt(&m).unwrap();
        assert_eq!(r.root[(1, 1)], 0.0);
        assert!(r.reconstruction_error() < 1e-12);
    }

    #[test]
    fn extremes() {
        assert_eq!(
            lambda_extremes(&SymMatrix::identity(3)).unwrap(),
            (1.0, 1.0)
        );
        let (lo, hi) = lambda_extremes(&SymMatrix::from_diagonal(&[4.0, 9.0]).unwrap()).unwrap();
        assert!((lo - 4.0).abs() < 1e-14 && (hi - 9.0).abs() < 1e-14);
    }

    #[test]
    fn norm_of_identity_and_rank_one() {
        assert!((operator_norm(&DMatrix::identity(4, 4)) - 1.0).abs() < 1e-14);
        let u = DVector::from_column_slice(&[1.0, 2.0, -2.0]);
        let v = DVector::from_column_slice(&[3.0, 4.0]);
        let m = &u * v.transpose();
        assert!((operator_norm(&m) - 15.0).abs() < 1e-12);
    }
}
