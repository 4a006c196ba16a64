//! Dense complex matrix kernels for two-level (and general d-level) open
//! quantum systems: Pauli/Bloch utilities and the three superoperators
//! `D`, `M`, `H` consumed by every stochastic-master-equation step.

use nalgebra::DMatrix;
use num_complex::Complex64;
use thiserror::Error;

/// Tolerance for Hermiticity checks.
pub const HERM_TOL: f64 = 1e-12;
/// Tolerance on |Tr(rho) - 1| for normalized states.
pub const TRACE_TOL: f64 = 1e-9;
/// Eigenvalues above this are considered nonnegative.
pub const PSD_TOL: f64 = -1e-8;

#[derive(Debug, Error)]
pub enum QmathError {
    #[error("dimension mismatch: {0}x{0} vs {1}x{1}")]
    DimensionMismatch(usize, usize),
    #[error("entry count {got} does not match dim {dim} (expected {})", dim * dim)]
    BadEntryCount { dim: usize, got: usize },
    #[error("operator is not Hermitian (max |A - A^dag| = {0:.3e})")]
    NotHermitian(f64),
    #[error("non-finite input: {0}")]
    NonFinite(&'static str),
    #[error("invalid quantum state: {0}")]
    InvalidState(String),
    #[error("operation requires a 2x2 operator, got {0}x{0}")]
    NotTwoLevel(usize),
}

/// Pauli axis selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

/// Anticommutator ordering used inside the dissipator.
///
/// `FFdag` uses FF^dag in the anticommutator; `StandardFdagF` is the
/// conventional Lindblad F^dag F. The two coincide for Hermitian F.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DissipatorOrdering {
    #[default]
    FFdag,
    StandardFdagF,
}

/// Dense complex square matrix, row-major semantics via nalgebra storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    mat: DMatrix<Complex64>,
}

impl Operator {
    pub fn from_matrix(mat: DMatrix<Complex64>) -> Result<Self, QmathError> {
        if !mat.is_square() {
            return Err(QmathError::DimensionMismatch(mat.nrows(), mat.ncols()));
        }
        Ok(Self { mat })
    }

    /// Build from row-major entries.
    pub fn from_rows(dim: usize, entries: &[Complex64]) -> Result<Self, QmathError> {
        if entries.len() != dim * dim {
            return Err(QmathError::BadEntryCount {
                dim,
                got: entries.len(),
            });
        }
        let mat = DMatrix::from_row_slice(dim, dim, entries);
        Ok(Self { mat })
    }

    /// Build from row-major entries and verify Hermiticity to [`HERM_TOL`].
    pub fn hermitian_from_rows(dim: usize, entries: &[Complex64]) -> Result<Self, QmathError> {
        let op = Self::from_rows(dim, entries)?;
        let dev = op.hermiticity_deviation();
        if dev > HERM_TOL {
            return Err(QmathError::NotHermitian(dev));
        }
        Ok(op)
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            mat: DMatrix::zeros(dim, dim),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            mat: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<Complex64> {
        &self.mat
    }

    pub fn matrix_mut(&mut self) -> &mut DMatrix<Complex64> {
        &mut self.mat
    }

    pub fn into_matrix(self) -> DMatrix<Complex64> {
        self.mat
    }

    pub fn adjoint(&self) -> Self {
        Self {
            mat: self.mat.adjoint(),
        }
    }

    pub fn trace(&self) -> Complex64 {
        self.mat.trace()
    }

    pub fn scale(&self, c: Complex64) -> Self {
        Self {
            mat: &self.mat * c,
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self, QmathError> {
        self.check_dims(other)?;
        Ok(Self {
            mat: &self.mat + &other.mat,
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self, QmathError> {
        self.check_dims(other)?;
        Ok(Self {
            mat: &self.mat - &other.mat,
        })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, QmathError> {
        self.check_dims(other)?;
        Ok(Self {
            mat: &self.mat * &other.mat,
        })
    }

    /// [A, B] = AB - BA.
    pub fn commutator(&self, other: &Self) -> Result<Self, QmathError> {
        self.check_dims(other)?;
        Ok(Self {
            mat: &self.mat * &other.mat - &other.mat * &self.mat,
        })
    }

    pub fn check_dims(&self, other: &Self) -> Result<(), QmathError> {
        if self.dim() != other.dim() {
            return Err(QmathError::DimensionMismatch(self.dim(), other.dim()));
        }
        Ok(())
    }

    /// max_ij |A_ij - (A^dag)_ij|
    pub fn hermiticity_deviation(&self) -> f64 {
        let n = self.dim();
        let mut dev = 0.0f64;
        for i in 0..n {
            for j in i..n {
                let d = (self.mat[(i, j)] - self.mat[(j, i)].conj()).norm();
                dev = dev.max(d);
            }
        }
        dev
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_deviation() <= tol
    }

    /// max_ij |A_ij - B_ij|
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.mat
            .iter()
            .zip(other.mat.iter())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    pub fn max_abs(&self) -> f64 {
        self.mat.iter().map(|a| a.norm()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.mat
            .iter()
            .all(|c| c.re.is_finite() && c.im.is_finite())
    }

    /// A <- (A + A^dag) / 2, suppressing Hermiticity drift.
    pub fn symmetrize(&mut self) {
        let n = self.dim();
        for i in 0..n {
            let d = self.mat[(i, i)];
            self.mat[(i, i)] = Complex64::new(d.re, 0.0);
            for j in (i + 1)..n {
                let avg = 0.5 * (self.mat[(i, j)] + self.mat[(j, i)].conj());
                self.mat[(i, j)] = avg;
                self.mat[(j, i)] = avg.conj();
            }
        }
    }

    /// Eigenvalues of a Hermitian operator, ascending. 2x2 is handled in
    /// closed form; larger dims go through nalgebra's self-adjoint solver.
    pub fn hermitian_eigenvalues(&self) -> Vec<f64> {
        if self.dim() == 2 {
            let a = self.mat[(0, 0)].re;
            let d = self.mat[(1, 1)].re;
            let b = self.mat[(0, 1)].norm_sqr();
            let mid = 0.5 * (a + d);
            let rad = (0.25 * (a - d) * (a - d) + b).sqrt();
            vec![mid - rad, mid + rad]
        } else {
            let mut eig: Vec<f64> = self
                .mat
                .clone()
                .symmetric_eigen()
                .eigenvalues
                .iter()
                .copied()
                .collect();
            eig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            eig
        }
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.hermitian_eigenvalues()[0]
    }

    /// Project onto the PSD cone by clipping negative eigenvalues.
    pub fn psd_projected(&self) -> Self {
        let eig = self.mat.clone().symmetric_eigen();
        let n = self.dim();
        let mut diag = DMatrix::<Complex64>::zeros(n, n);
        for i in 0..n {
            diag[(i, i)] = Complex64::new(eig.eigenvalues[i].max(0.0), 0.0);
        }
        let v = &eig.eigenvectors;
        let mat = v * diag * v.adjoint();
        let mut op = Self { mat };
        op.symmetrize();
        op
    }
}

/// Bloch-sphere coordinates of a qubit state.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlochVector {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl BlochVector {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, QmathError> {
        if !(x.is_finite() && y.is_finite() && z.is_finite()) {
            return Err(QmathError::NonFinite("bloch vector"));
        }
        let v = Self { x, y, z };
        if v.norm_sqr() > 1.0 + 1e-9 {
            return Err(QmathError::InvalidState(format!(
                "bloch vector norm {} exceeds 1",
                v.norm_sqr().sqrt()
            )));
        }
        Ok(v)
    }

    pub fn norm_sqr(&self) -> f64 {
        self.x * self.x + self.y * self.y + self.z * self.z
    }
}

/// Density matrix with normalization bookkeeping. For unnormalized evolution
/// the accumulated trace lives in `log_trace` while `op` is kept rescaled to
/// unit trace.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityState {
    pub op: Operator,
    pub normalized: bool,
    pub log_trace: f64,
}

impl DensityState {
    /// A normalized state: Hermitian, unit trace, PSD within tolerance.
    pub fn normalized(op: Operator) -> Result<Self, QmathError> {
        let dev = op.hermiticity_deviation();
        if dev > HERM_TOL {
            return Err(QmathError::NotHermitian(dev));
        }
        let tr = op.trace();
        if (tr.re - 1.0).abs() > TRACE_TOL || tr.im.abs() > TRACE_TOL {
            return Err(QmathError::InvalidState(format!(
                "trace {} is not 1 within {}",
                tr, TRACE_TOL
            )));
        }
        if op.min_eigenvalue() < PSD_TOL {
            return Err(QmathError::InvalidState(format!(
                "min eigenvalue {:.3e} below tolerance",
                op.min_eigenvalue()
            )));
        }
        Ok(Self {
            op,
            normalized: true,
            log_trace: 0.0,
        })
    }

    /// An unnormalized state seeded from a unit-trace matrix; the running
    /// trace is tracked in log-space.
    pub fn unnormalized(op: Operator) -> Result<Self, QmathError> {
        let mut s = Self::normalized(op)?;
        s.normalized = false;
        s
            .log_trace = 0.0;
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.op.dim()
    }

    pub fn trace(&self) -> f64 {
        self.op.trace().re
    }
}

/// The 2x2 Pauli matrix along `axis`.
pub fn pauli(axis: Axis) -> Operator {
    let i = Complex64::i();
    let one = Complex64::new(1.0, 0.0);
    let zero = Complex64::new(0.0, 0.0);
    let entries = match axis {
        Axis::X => [zero, one, one, zero],
        Axis::Y => [zero, -i, i, zero],
        Axis::Z => [one, zero, zero, -one],
    };
    Operator::from_rows(2, &entries).unwrap()
}

/// H = (omega/2) sigma_x + (delta/2) sigma_z, frequencies in units of gamma.
pub fn build_hamiltonian(omega: f64, delta: f64) -> Result<Operator, QmathError> {
    if !omega.is_finite() {
        return Err(QmathError::NonFinite("omega"));
    }
    if !delta.is_finite() {
        return Err(QmathError::NonFinite("delta"));
    }
    let half = |v: f64| Complex64::new(0.5 * v, 0.0);
    let sx = pauli(Axis::X).scale(half(omega));
    let sz = pauli(Axis::Z).scale(half(delta));
    sx.add(&sz)
}

/// rho = (I + x sigma_x + y sigma_y + z sigma_z) / 2.
pub fn bloch_to_density(b: BlochVector) -> Result<DensityState, QmathError> {
    if b.norm_sqr() > 1.0 + 1e-9 {
        return Err(QmathError::InvalidState(format!(
            "bloch vector norm {} exceeds 1",
            b.norm_sqr().sqrt()
        )));
    }
    let half = Complex64::new(0.5, 0.0);
    let mut op = Operator::identity(2);
    op = op
        .add(&pauli(Axis::X).scale(Complex64::new(b.x, 0.0)))?
        .add(&pauli(Axis::Y).scale(Complex64::new(b.y, 0.0)))?
        .add(&pauli(Axis::Z).scale(Complex64::new(b.z, 0.0)))?
        .scale(half);
    op.symmetrize();
    DensityState::normalized(op)
}

/// (Tr(rho sigma_x), Tr(rho sigma_y), Tr(rho sigma_z)).
pub fn density_to_bloch(rho: &DensityState) -> Result<BlochVector, QmathError> {
    if rho.dim() != 2 {
        return Err(QmathError::NotTwoLevel(rho.dim()));
    }
    let m = rho.op.matrix();
    let x = (m[(0, 1)] + m[(1, 0)]).re;
    let y = (Complex64::i() * (m[(0, 1)] - m[(1, 0)])).re;
    let z = (m[(0, 0)] - m[(1, 1)]).re;
    Ok(BlochVector { x, y, z })
}

/// D[F]rho with the anticommutator ordering selected by `ordering`.
pub fn dissipator(
    f: &Operator,
    rho: &DensityState,
    ordering: DissipatorOrdering,
) -> Result<Operator, QmathError> {
    f.check_dims(&rho.op)?;
    let fdag = f.adjoint();
    let sandwich = f.matmul(&rho.op)?.matmul(&fdag)?;
    let anti_op = match ordering {
        DissipatorOrdering::FFdag => f.matmul(&fdag)?,
        DissipatorOrdering::StandardFdagF => fdag.matmul(f)?,
    };
    let half = Complex64::new(0.5, 0.0);
    let anti = anti_op
        .matmul(&rho.op)?
        .add(&rho.op.matmul(&anti_op)?)?
        .scale(half);
    sandwich.sub(&anti)
}

/// M[F]rho = F rho + rho F^dag, plus its trace (the measured-signal drift).
pub fn msuperop(f: &Operator, rho: &DensityState) -> Result<(Operator, f64), QmathError> {
    f.check_dims(&rho.op)?;
    let m = f.matmul(&rho.op)?.add(&rho.op.matmul(&f.adjoint())?)?;
    let tr = m.trace().re;
    Ok((m, tr))
}

/// H[F]rho = M[F]rho - Tr(M[F]rho) rho, the traceless innovation term.
pub fn innovation(f: &Operator, rho: &DensityState) -> Result<Operator, QmathError> {
    if !rho.normalized {
        return Err(QmathError::InvalidState(
            "innovation requires a normalized state".into(),
        ));
    }
    let (m, tr) = msuperop(f, rho)?;
    m.sub(&rho.op.scale(Complex64::new(tr, 0.0)))
}
