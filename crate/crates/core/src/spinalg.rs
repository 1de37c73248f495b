//! Dense operator algebra for 1 to 4 spin-1/2 particles.
//!
//! Hamiltonians are stored in angular-frequency units (rad/s). Matrix
//! exponentials go through the Hermitian eigendecomposition, which is exact
//! up to rounding at these dimensions.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use thiserror::Error;

pub type C64 = Complex64;

pub const MAX_DIM: usize = 16;
pub const MAX_SITES: usize = 4;
const HERMITIAN_TOL: f64 = 1e-12;
const UNIT_TOL: f64 = 1e-9;
pub const STEP_GUARD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpinError {
    #[error("site {site} out of range for {n_sites} sites")]
    SiteOutOfRange { site: usize, n_sites: usize },
    #[error("at most {MAX_SITES} sites are supported, got {0}")]
    TooManySites(usize),
    #[error("axis vector has norm {0}, expected 1")]
    NonUnitAxis(f64),
    #[error("dimension {0} is not a power of two in [2, 16]")]
    InvalidDimension(usize),
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("operator is not Hermitian (relative defect {0:e})")]
    NonHermitian(f64),
    #[error("step guard violated: dt*|H| = {0} > {STEP_GUARD}")]
    StepGuard(f64),
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("invalid density matrix: {0}")]
    InvalidState(String),
}

pub type Result<T> = std::result::Result<T, SpinError>;

fn check_dim(dim: usize) -> Result<()> {
    if (2..=MAX_DIM).contains(&dim) && dim.is_power_of_two() {
        Ok(())
    } else {
        Err(SpinError::InvalidDimension(dim))
    }
}

/// Spin direction for [`embed_single_site`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Axis {
    X,
    Y,
    Z,
    Dir([f64; 3]),
}

impl Axis {
    fn vector(self) -> [f64; 3] {
        match self {
            Axis::X => [1.0, 0.0, 0.0],
            Axis::Y => [0.0, 1.0, 0.0],
            Axis::Z => [0.0, 0.0, 1.0],
            Axis::Dir(v) => v,
        }
    }
}

/// Square complex matrix on a Hilbert space of dimension 2..=16.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    m: DMatrix<C64>,
}

impl Operator {
    pub fn from_matrix(m: DMatrix<C64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(SpinError::DimensionMismatch(m.nrows(), m.ncols()));
        }
        check_dim(m.nrows())?;
        Ok(Self { m })
    }

    pub fn zeros(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self { m: DMatrix::zeros(dim, dim) })
    }

    pub fn identity(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self { m: DMatrix::identity(dim, dim) })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.m
    }

    pub fn get(&self, i: usize, j: usize) -> C64 {
        self.m[(i, j)]
    }

    pub fn adjoint(&self) -> Self {
        Self { m: self.m.adjoint() }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { m: self.m.map(|z| z * s) }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_dim(other)?;
        Ok(Self { m: &self.m + &other.m })
    }

    /// `self + s * other`, in place.
    pub fn add_scaled(&mut self, other: &Self, s: f64) -> Result<()> {
        self.same_dim(other)?;
        self.m.zip_apply(&other.m, |a, b| *a += b * s);
        Ok(())
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_dim(other)?;
        Ok(Self { m: &self.m - &other.m })
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_dim(other)?;
        Ok(Self { m: &self.m * &other.m })
    }

    /// `[self, other]`.
    pub fn commutator(&self, other: &Self) -> Result<Self> {
        self.same_dim(other)?;
        Ok(Self { m: &self.m * &other.m - &other.m * &self.m })
    }

    pub fn kron(&self, other: &Self) -> Result<Self> {
        Self::from_matrix(self.m.kronecker(&other.m))
    }

    pub fn trace(&self) -> C64 {
        self.m.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
    }

    /// `||H - H^dagger||_F / ||H||_F`, zero for the zero operator.
    pub fn hermiticity_defect(&self) -> f64 {
        let n = self.frobenius_norm();
        if n == 0.0 {
            return 0.0;
        }
        let d = (&self.m - self.m.adjoint()).iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        d / n
    }

    pub fn is_hermitian(&self) -> bool {
        self.hermiticity_defect() <= HERMITIAN_TOL
    }

    pub fn ensure_hermitian(&self) -> Result<()> {
        let d = self.hermiticity_defect();
        if d > HERMITIAN_TOL {
            Err(SpinError::NonHermitian(d))
        } else {
            Ok(())
        }
    }

    /// Eigenvalues (ascending) and eigenvectors of a Hermitian operator.
    pub fn eigh(&self) -> Result<(Vec<f64>, DMatrix<C64>)> {
        self.ensure_hermitian()?;
        let herm = (&self.m + self.m.adjoint()).map(|z| z * 0.5);
        let eig = SymmetricEigen::new(herm);
        let mut idx: Vec<usize> = (0..self.dim()).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let vals = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
        let vecs = DMatrix::from_fn(self.dim(), self.dim(), |r, c| eig.eigenvectors[(r, idx[c])]);
        Ok((vals, vecs))
    }

    /// Largest absolute eigenvalue of a Hermitian operator.
    pub fn spectral_norm(&self) -> Result<f64> {
        let (vals, _) = self.eigh()?;
        Ok(vals.iter().fold(0.0_f64, |a, v| a.max(v.abs())))
    }

    /// `exp(-i H dt)` for Hermitian `H`, without the step guard.
    pub fn unitary_exp(&self, dt: f64) -> Result<Self> {
        let (vals, vecs) = self.eigh()?;
        let dim = self.dim();
        let mut scaled = vecs.clone();
        for (c, lam) in vals.iter().enumerate() {
            let ph = C64::from_polar(1.0, -lam * dt);
            for r in 0..dim {
                scaled[(r, c)] *= ph;
            }
        }
        Ok(Self { m: scaled * vecs.adjoint() })
    }

    fn same_dim(&self, other: &Self) -> Result<()> {
        if self.dim() == other.dim() {
            Ok(())
        } else {
            Err(SpinError::DimensionMismatch(self.dim(), other.dim()))
        }
    }
}

/// Density matrix: Hermitian, unit trace, positive semidefinite.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityState {
    m: DMatrix<C64>,
}

impl DensityState {
    pub fn from_matrix(m: DMatrix<C64>) -> Result<Self> {
        let op = Operator::from_matrix(m)?;
        let s = Self { m: op.into_matrix() };
        s.validate()?;
        Ok(s)
    }

    /// Checks the invariants: Hermitian, trace 1 within 1e-10, eigenvalues above -1e-10.
    pub fn validate(&self) -> Result<()> {
        let op = Operator { m: self.m.clone() };
        let herm = op.hermiticity_defect();
        if herm > 1e-10 {
            return Err(SpinError::InvalidState(format!("hermiticity defect {herm:e}")));
        }
        let tr = self.m.trace();
        if (tr.re - 1.0).abs() > 1e-10 || tr.im.abs() > 1e-10 {
            return Err(SpinError::InvalidState(format!("trace {tr}")));
        }
        let (vals, _) = Operator { m: (&self.m + self.m.adjoint()).map(|z| z * 0.5) }.eigh()?;
        if vals[0] < -1e-10 {
            return Err(SpinError::InvalidState(format!("negative eigenvalue {}", vals[0])));
        }
        Ok(())
    }

    /// `|psi><psi|` for a normalised (or normalisable) state vector.
    pub fn pure(psi: &[C64]) -> Result<Self> {
        check_dim(psi.len())?;
        let norm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(SpinError::InvalidState("zero vector".into()));
        }
        let v = DVector::from_iterator(psi.len(), psi.iter().map(|z| z / norm));
        Ok(Self { m: &v * v.adjoint() })
    }

    pub fn maximally_mixed(dim: usize) -> Result<Self> {
        check_dim(dim)?;
        Ok(Self { m: DMatrix::identity(dim, dim).map(|z: C64| z / dim as f64) })
    }

    /// Single spin with Bloch vector `(sin th cos ph, sin th sin ph, cos th)`.
    pub fn bloch(theta: f64, phi: f64) -> Self {
        let psi = bloch_spinor(theta, phi);
        Self::pure(&psi).expect("dimension 2 is valid")
    }

    /// Tensor product, first factor is site 0.
    pub fn product(states: &[DensityState]) -> Result<Self> {
        let mut it = states.iter();
        let first = it.next().ok_or_else(|| SpinError::InvalidState("empty product".into()))?;
        let mut m = first.m.clone();
        for s in it {
            m = m.kronecker(&s.m);
        }
        check_dim(m.nrows())?;
        Ok(Self { m })
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.m
    }

    pub fn trace(&self) -> C64 {
        self.m.trace()
    }

    /// `Tr(rho^2)`.
    pub fn purity(&self) -> f64 {
        (&self.m * &self.m).trace().re
    }

    /// `(1/2) ||rho - sigma||_1`.
    pub fn trace_distance(&self, other: &Self) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(SpinError::DimensionMismatch(self.dim(), other.dim()));
        }
        let d = Operator { m: &self.m - &other.m };
        let herm = Operator { m: (d.m.clone() + d.m.adjoint()).map(|z| z * 0.5) };
        let (vals, _) = herm.eigh()?;
        Ok(0.5 * vals.iter().map(|v| v.abs()).sum::<f64>())
    }

    /// `U rho U^dagger` without any checks on `U`.
    pub fn conjugate(&self, u: &Operator) -> Result<Self> {
        if u.dim() != self.dim() {
            return Err(SpinError::DimensionMismatch(u.dim(), self.dim()));
        }
        Ok(Self { m: &u.m * &self.m * u.m.adjoint() })
    }
}

/// Spinor with Bloch angles `(theta, phi)` in the `|up>, |down>` basis.
pub fn bloch_spinor(theta: f64, phi: f64) -> [C64; 2] {
    let (s, c) = (0.5 * theta).sin_cos();
    [C64::new(c, 0.0), C64::from_polar(s, phi)]
}

fn pauli_combination(v: [f64; 3]) -> DMatrix<C64> {
    let [x, y, z] = v;
    DMatrix::from_row_slice(
        2,
        2,
        &[
            C64::new(0.5 * z, 0.0),
            C64::new(0.5 * x, -0.5 * y),
            C64::new(0.5 * x, 0.5 * y),
            C64::new(-0.5 * z, 0.0),
        ],
    )
}

/// `I^site_axis = (1/2) axis . sigma` on `site`, identity on the other sites.
pub fn embed_single_site(axis: Axis, site: usize, n_sites: usize) -> Result<Operator> {
    let v = axis.vector();
    let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(SpinError::NonUnitAxis(norm));
    }
    spin_component(v, site, n_sites)
}

/// Like [`embed_single_site`] but for an arbitrary (not necessarily unit) vector,
/// i.e. `v . I^site`.
pub fn spin_component(v: [f64; 3], site: usize, n_sites: usize) -> Result<Operator> {
    if n_sites == 0 || n_sites > MAX_SITES {
        return Err(SpinError::TooManySites(n_sites));
    }
    if site >= n_sites {
        return Err(SpinError::SiteOutOfRange { site, n_sites });
    }
    let local = pauli_combination(v);
    let mut m = DMatrix::<C64>::identity(1, 1);
    for k in 0..n_sites {
        let factor = if k == site { local.clone() } else { DMatrix::identity(2, 2) };
        m = m.kronecker(&factor);
    }
    Ok(Operator { m })
}

/// `exp(-i H dt)` with the Hermiticity check and the step guard `dt*|H| <= 0.5`.
pub fn propagator(h: &Operator, dt: f64) -> Result<Operator> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(SpinError::NonPositiveStep(dt));
    }
    let (vals, vecs) = h.eigh()?;
    let norm = vals.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    if norm * dt > STEP_GUARD {
        return Err(SpinError::StepGuard(norm * dt));
    }
    let dim = h.dim();
    let mut scaled = vecs.clone();
    for (c, lam) in vals.iter().enumerate() {
        let ph = C64::from_polar(1.0, -lam * dt);
        for r in 0..dim {
            scaled[(r, c)] *= ph;
        }
    }
    Ok(Operator { m: scaled * vecs.adjoint() })
}

/// One exact piecewise-constant step `rho -> U rho U^dagger`, `U = exp(-i H dt)`.
pub fn evolve_step(state: &DensityState, h: &Operator, dt: f64) -> Result<DensityState> {
    if state.dim() != h.dim() {
        return Err(SpinError::DimensionMismatch(state.dim(), h.dim()));
    }
    let u = propagator(h, dt)?;
    Ok(DensityState { m: &u.m * &state.m * u.m.adjoint() })
}

/// `Re Tr(rho op)`.
pub fn expectation(state: &DensityState, op: &Operator) -> Result<f64> {
    if state.dim() != op.dim() {
        return Err(SpinError::DimensionMismatch(state.dim(), op.dim()));
    }
    Ok((&state.m * &op.m).trace().re)
}

/// `Tr(rho op)` including the imaginary residue.
pub fn expectation_complex(state: &DensityState, op: &Operator) -> Result<C64> {
    if state.dim() != op.dim() {
        return Err(SpinError::DimensionMismatch(state.dim(), op.dim()));
    }
    Ok((&state.m * &op.m).trace())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iz_is_diagonal_half() {
        let iz = embed_single_site(Axis::Z, 0, 1).unwrap();
        assert_eq!(iz.get(0, 0), C64::new(0.5, 0.0));
        assert_eq!(iz.get(1, 1), C64::new(-0.5, 0.0));
        assert_eq!(iz.get(0, 1), C64::new(0.0, 0.0));
    }

    #[test]
    fn rejects_bad_site_and_axis() {
        assert!(matches!(
            embed_single_site(Axis::X, 2, 2),
            Err(SpinError::SiteOutOfRange { .. })
        ));
        assert!(matches!(
            embed_single_site(Axis::Dir([1.0, 1.0, 0.0]), 0, 1),
            Err(SpinError::NonUnitAxis(_))
        ));
        assert!(embed_single_site(Axis::X, 0, 5).is_err());
    }

    #[test]
    fn invalid_dimensions() {
        assert!(Operator::zeros(3).is_err());
        assert!(Operator::zeros(32).is_err());
        assert!(Operator::zeros(1).is_err());
    }
}
