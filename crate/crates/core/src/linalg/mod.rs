//! Dense complex linear algebra and the entanglement criteria built on it.
//!
//! Everything here is double precision. The certificates (PPT, realignment,
//! density-matrix validity) are always evaluated through this module,
//! independently of the precision the network engine runs in.

mod decomp;
mod eigen;
mod matrix;

use num_complex::Complex64;
use thiserror::Error;

pub use decomp::{qr, qr_unitary, singular_values};
pub use eigen::{
    hermitian_eigen, hermitian_eigenvalues, EigenDecomposition, Spectrum, HERMITIAN_TOL,
};
pub use matrix::{kron, ComplexMatrix};

/// Tolerance for the Hermitian, unit-trace and PSD checks of a state.
pub const STATE_TOL: f64 = 1e-10;

/// Default decision tolerance for [`is_ppt`].
pub const PPT_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("matrix is not square ({rows}x{cols})")]
    NonSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian (defect {defect:e})")]
    NotHermitian { defect: f64 },
    #[error("iterative solver did not converge")]
    NoConvergence,
    #[error("non-finite matrix entry")]
    NonFinite,
    #[error("not a density matrix: {0}")]
    InvalidState(String),
    #[error("local dimensions {dim_a}x{dim_b} do not factor a matrix of side {side}")]
    DimensionMismatch {
        dim_a: usize,
        dim_b: usize,
        side: usize,
    },
}

/// A bipartite density matrix on `C^dim_a ⊗ C^dim_b`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    dim_a: usize,
    dim_b: usize,
    mat: ComplexMatrix,
}

impl DensityMatrix {
    /// Validates Hermiticity, unit trace and positive semidefiniteness at
    /// [`STATE_TOL`].
    pub fn new(dim_a: usize, dim_b: usize, mat: ComplexMatrix) -> Result<Self, LinalgError> {
        let rho = Self::new_unchecked(dim_a, dim_b, mat)?;
        rho.validate(STATE_TOL)?;
        Ok(rho)
    }

    /// Checks only the shape. Used where validity holds by construction.
    pub fn new_unchecked(
        dim_a: usize,
        dim_b: usize,
        mat: ComplexMatrix,
    ) -> Result<Self, LinalgError> {
        if !mat.is_square() {
            return Err(LinalgError::NonSquare {
                rows: mat.rows(),
                cols: mat.cols(),
            });
        }
        if dim_a * dim_b != mat.rows() || dim_a == 0 || dim_b == 0 {
            return Err(LinalgError::DimensionMismatch {
                dim_a,
                dim_b,
                side: mat.rows(),
            });
        }
        Ok(Self { dim_a, dim_b, mat })
    }

    pub fn validate(&self, tol: f64) -> Result<(), LinalgError> {
        let defect = self.mat.hermiticity_defect();
        if defect > tol {
            return Err(LinalgError::InvalidState(format!(
                "hermiticity defect {defect:e}"
            )));
        }
        let tr = self.mat.trace();
        if (tr - Complex64::new(1.0, 0.0)).norm() > tol {
            return Err(LinalgError::InvalidState(format!("trace {tr}")));
        }
        let min = hermitian_eigenvalues(&self.mat)?.min();
        if min < -tol {
            return Err(LinalgError::InvalidState(format!("min eigenvalue {min:e}")));
        }
        Ok(())
    }

    pub fn maximally_mixed(dim_a: usize, dim_b: usize) -> Self {
        let n = dim_a * dim_b;
        Self {
            dim_a,
            dim_b,
            mat: ComplexMatrix::identity(n).scale_real(1.0 / n as f64),
        }
    }

    /// `|ψ⟩⟨ψ|` for a normalized (or normalizable) vector.
    pub fn pure(dim_a: usize, dim_b: usize, psi: &[Complex64]) -> Result<Self, LinalgError> {
        let norm2: f64 = psi.iter().map(|z| z.norm_sqr()).sum();
        if norm2 == 0.0 {
            return Err(LinalgError::InvalidState("zero vector".into()));
        }
        let mat = ComplexMatrix::projector(psi).scale_real(1.0 / norm2);
        Self::new_unchecked(dim_a, dim_b, mat)
    }

    /// Same matrix with different local dimension labels.
    pub fn with_dims(self, dim_a: usize, dim_b: usize) -> Result<Self, LinalgError> {
        Self::new_unchecked(dim_a, dim_b, self.mat)
    }

    #[inline]
    pub fn dim_a(&self) -> usize {
        self.dim_a
    }

    #[inline]
    pub fn dim_b(&self) -> usize {
        self.dim_b
    }

    /// Side length `dim_a * dim_b`.
    #[inline]
    pub fn side(&self) -> usize {
        self.mat.rows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.mat
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.mat
    }

    pub fn purity(&self) -> f64 {
        self.mat.as_slice().iter().map(|z| z.norm_sqr()).sum()
    }

    /// Reduced state on subsystem A.
    pub fn partial_trace_b(&self) -> ComplexMatrix {
        let (da, db) = (self.dim_a, self.dim_b);
        ComplexMatrix::from_fn(da, da, |i, j| {
            (0..db).map(|k| self.mat[(i * db + k, j * db + k)]).sum()
        })
    }

    /// Reduced state on subsystem B.
    pub fn partial_trace_a(&self) -> ComplexMatrix {
        let (da, db) = (self.dim_a, self.dim_b);
        ComplexMatrix::from_fn(db, db, |k, l| {
            (0..da).map(|i| self.mat[(i * db + k, i * db + l)]).sum()
        })
    }
}

/// Partial transpose on subsystem A: block `(i, j)` of the output is block
/// `(j, i)` of the input.
pub fn partial_transpose(rho: &DensityMatrix) -> ComplexMatrix {
    partial_transpose_matrix(rho.matrix(), rho.dim_a(), rho.dim_b())
}

pub fn partial_transpose_matrix(m: &ComplexMatrix, dim_a: usize, dim_b: usize) -> ComplexMatrix {
    assert_eq!(m.rows(), dim_a * dim_b, "partial transpose dimensions");
    ComplexMatrix::from_fn(m.rows(), m.cols(), |r, c| {
        let (i, k) = (r / dim_b, r % dim_b);
        let (j, l) = (c / dim_b, c % dim_b);
        m[(j * dim_b + k, i * dim_b + l)]
    })
}

/// PPT verdict together with the smallest eigenvalue of the partial transpose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PptReport {
    pub is_ppt: bool,
    pub min_pt_eigenvalue: f64,
}

pub fn is_ppt(rho: &DensityMatrix, tol: f64) -> Result<PptReport, LinalgError> {
    let min = min_pt_eigenvalue(rho)?;
    Ok(PptReport {
        is_ppt: min >= -tol,
        min_pt_eigenvalue: min,
    })
}

pub fn min_pt_eigenvalue(rho: &DensityMatrix) -> Result<f64, LinalgError> {
    Ok(hermitian_eigenvalues(&partial_transpose(rho))?.min())
}

/// Realigned matrix `R(ρ)_{(i,j),(k,l)} = ρ_{(i,k),(j,l)}` (requires equal local dimensions).
pub fn realign(rho: &DensityMatrix) -> Result<ComplexMatrix, LinalgError> {
    let d = rho.dim_a();
    if rho.dim_b() != d {
        return Err(LinalgError::DimensionMismatch {
            dim_a: rho.dim_a(),
            dim_b: rho.dim_b(),
            side: rho.side(),
        });
    }
    let m = rho.matrix();
    Ok(ComplexMatrix::from_fn(d * d, d * d, |r, c| {
        let (i, j) = (r / d, r % d);
        let (k, l) = (c / d, c % d);
        m[(i * d + k, j * d + l)]
    }))
}

/// Sum of singular values of the realigned matrix. Values above 1 certify
/// entanglement; values at or below 1 are inconclusive.
pub fn realignment_ccnr(rho: &DensityMatrix) -> Result<f64, LinalgError> {
    Ok(singular_values(&realign(rho)?)?.iter().sum())
}

/// Von Neumann entropy in nats, with `0 log 0 = 0`.
pub fn von_neumann_entropy(rho: &DensityMatrix) -> Result<f64, LinalgError> {
    let spec = hermitian_eigenvalues(rho.matrix())?;
    Ok(-spec
        .values()
        .iter()
        .map(|&l| l.max(0.0))
        .filter(|&l| l > 0.0)
        .map(|l| l * l.ln())
        .sum::<f64>())
}

/// Mean absolute difference over the two-channel (real, imaginary)
/// representation: `Σ (|Re Δ| + |Im Δ|) / (2 · len)`.
pub fn elementwise_l1(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<f64, LinalgError> {
    a.check_same_shape(b)?;
    let n = a.as_slice().len();
    if n == 0 {
        return Ok(0.0);
    }
    let total: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| (x.re - y.re).abs() + (x.im - y.im).abs())
        .sum();
    Ok(total / (2 * n) as f64)
}

/// Bell state `|Φ⁻⟩ = (|01⟩ − |10⟩)/√2` (the singlet).
pub fn bell_phi_minus() -> DensityMatrix {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let psi = [
        Complex64::new(0.0, 0.0),
        Complex64::new(s, 0.0),
        Complex64::new(-s, 0.0),
        Complex64::new(0.0, 0.0),
    ];
    DensityMatrix::pure(2, 2, &psi).expect("bell state is normalized")
}
