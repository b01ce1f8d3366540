//! Dense real linear algebra used throughout the crate.
//!
//! Everything here is a pure function of its inputs. The kernels are sized
//! for the small matrices that appear in 𝔰𝔬(n) with n up to a few dozen.

mod decomp;
mod expm;
mod logm;
mod matrix;

pub use decomp::{determinant, qr_decompose, symmetric_eigen, QR_RANK_TOL};
pub use expm::skew_exp;
pub use logm::so_log;
pub use matrix::DenseMatrix;

pub(crate) use decomp::Lu;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("size mismatch: expected {expected:?}, found {found:?}")]
    SizeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("rank deficient: |R[{index},{index}]| = {value:e} is below tolerance")]
    RankDeficient { index: usize, value: f64 },
    #[error("Jacobi iteration did not converge after {sweeps} sweeps (off-diagonal {off_diagonal:e})")]
    NoConvergence { sweeps: usize, off_diagonal: f64 },
    #[error("matrix is not symmetric (defect {defect:e})")]
    NotSymmetric { defect: f64 },
    #[error("matrix is not orthogonal (defect {defect:e})")]
    NotOrthogonal { defect: f64 },
    #[error("orthogonal matrix has determinant {det}, expected +1")]
    NegativeDeterminant { det: f64 },
    #[error("singular linear system")]
    Singular,
}

/// Tolerance on ‖QᵀQ − I‖_F accepted by [`SpecialOrthogonal::new`].
pub const ORTHOGONALITY_TOL: f64 = 1e-10;
/// Tolerance on |det Q − 1| accepted by [`SpecialOrthogonal::new`].
pub const DETERMINANT_TOL: f64 = 1e-8;

/// Element of 𝔰𝔬(n). Construction projects onto the skew part, so
/// `Aᵀ = −A` holds exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SkewMatrix(DenseMatrix);

impl SkewMatrix {
    pub fn new(m: &DenseMatrix) -> Result<Self, LinalgError> {
        if !m.is_square() {
            return Err(LinalgError::SizeMismatch {
                expected: (m.rows(), m.rows()),
                found: m.shape(),
            });
        }
        if !m.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self(m.skew_part()))
    }

    pub fn zeros(n: usize) -> Self {
        Self(DenseMatrix::zeros(n, n))
    }

    pub(crate) fn from_skew_unchecked(m: DenseMatrix) -> Self {
        Self(m)
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(self.0.scale(s))
    }
}

/// Element of SO(n).
#[derive(Clone, Debug, PartialEq)]
pub struct SpecialOrthogonal(DenseMatrix);

impl SpecialOrthogonal {
    /// Validates orthogonality and a positive unit determinant.
    pub fn new(m: DenseMatrix) -> Result<Self, LinalgError> {
        if !m.is_square() {
            return Err(LinalgError::SizeMismatch {
                expected: (m.rows(), m.rows()),
                found: m.shape(),
            });
        }
        if !m.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        let defect = m.orthogonality_defect();
        if defect > ORTHOGONALITY_TOL {
            return Err(LinalgError::NotOrthogonal { defect });
        }
        let det = determinant(&m);
        if det < 0.0 {
            return Err(LinalgError::NegativeDeterminant { det });
        }
        if (det - 1.0).abs() > DETERMINANT_TOL {
            return Err(LinalgError::NotOrthogonal {
                defect: (det - 1.0).abs(),
            });
        }
        Ok(Self(m))
    }

    pub fn identity(n: usize) -> Self {
        Self(DenseMatrix::identity(n))
    }

    pub(crate) fn from_matrix_unchecked(m: DenseMatrix) -> Self {
        Self(m)
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> DenseMatrix {
        self.0
    }

    pub fn compose(&self, rhs: &Self) -> Self {
        Self(self.0.matmul(&rhs.0))
    }
}
