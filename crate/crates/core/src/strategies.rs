//! Co-adapted coupling strategies.
//!
//! Every co-adapted coupling of two n-dimensional Brownian motions can be
//! written as `dA = J^T dB + K^T dC` with `C` independent of `B` and
//! `J^T J + K^T K = I`. A strategy is a predictable rule producing the pair
//! `(J, K)` from the current state `(t, X, Y)`.
//!
//! Custom strategies only ever supply `J`; the matching `K` is always the
//! symmetric square root of `I - J^T J`, obtained by [`spectral_complete`].

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use thiserror::Error;

/// Tolerance accepted by [`DriveMatrices::new`].
pub const DRIVE_TOL: f64 = 1e-10;
/// Eigenvalues of `J^T J` closer than this are merged into one projection.
pub const EIGEN_CLUSTER_TOL: f64 = 1e-9;
/// Eigenvalues of `J^T J` at or above `1 - UNIT_EIGEN_TOL` count as 1.
pub const UNIT_EIGEN_TOL: f64 = 1e-9;
/// Entries of the pseudo-inverse are capped at this magnitude.
pub const PINV_CAP: f64 = 1e9;
/// Below this separation the direction `e = (X - Y)/|X - Y|` is undefined
/// and strategies fall back to the synchronous drive.
pub const COINCIDENT_DIST: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error("direction vector has zero length")]
    ZeroVector,
    #[error("not a contraction: largest singular value {0} exceeds 1")]
    NotAContraction(f64),
    #[error("drive matrices violate J^T J + K^T K = I (residual {0:.3e})")]
    ConstraintViolation(f64),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid strategy parameters: {0}")]
    InvalidParameters(String),
}

/// The pair `(J, K)` of one co-adapted coupling step.
#[derive(Debug, Clone, PartialEq)]
pub struct DriveMatrices {
    j: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl DriveMatrices {
    pub fn new(j: DMatrix<f64>, k: DMatrix<f64>) -> Result<Self, StrategyError> {
        if !j.is_square() || j.shape() != k.shape() {
            return Err(StrategyError::DimensionMismatch { expected: j.nrows(), got: k.nrows() });
        }
        let drive = Self { j, k };
        let r = drive.constraint_residual();
        if !(r <= DRIVE_TOL) {
            return Err(StrategyError::ConstraintViolation(r));
        }
        Ok(drive)
    }

    /// Build without checking the constraint (callers that check later).
    pub fn new_unchecked(j: DMatrix<f64>, k: DMatrix<f64>) -> Self {
        Self { j, k }
    }

    pub fn j(&self) -> &DMatrix<f64> {
        &self.j
    }

    pub fn k(&self) -> &DMatrix<f64> {
        &self.k
    }

    pub fn dim(&self) -> usize {
        self.j.nrows()
    }

    /// Largest absolute entry of `J^T J + K^T K - I`.
    pub fn constraint_residual(&self) -> f64 {
        let n = self.j.nrows();
        let m = self.j.transpose() * &self.j + self.k.transpose() * &self.k - DMatrix::identity(n, n);
        m.amax()
    }
}

fn unit(e: &DVector<f64>) -> Result<DVector<f64>, StrategyError> {
    let n = e.norm();
    if !(n > 0.0) || !n.is_finite() {
        return Err(StrategyError::ZeroVector);
    }
    Ok(e / n)
}

/// `J = I - 2 e e^T`, `K = 0`: the partner's noise mirrored in the
/// hyperplane bisecting the segment between the particles.
pub fn reflection_drive(e: &DVector<f64>) -> Result<DriveMatrices, StrategyError> {
    let e = unit(e)?;
    let n = e.len();
    let j = DMatrix::identity(n, n) - (&e * e.transpose()) * 2.0;
    Ok(DriveMatrices::new_unchecked(j, DMatrix::zeros(n, n)))
}

/// `J = -I + 2 e e^T`, `K = 0`: the inter-particle distance has no
/// martingale part.
pub fn perverse_drive(e: &DVector<f64>) -> Result<DriveMatrices, StrategyError> {
    let e = unit(e)?;
    let n = e.len();
    let j = (&e * e.transpose()) * 2.0 - DMatrix::identity(n, n);
    Ok(DriveMatrices::new_unchecked(j, DMatrix::zeros(n, n)))
}

pub fn synchronous_drive(n: usize) -> DriveMatrices {
    DriveMatrices::new_unchecked(DMatrix::identity(n, n), DMatrix::zeros(n, n))
}

pub fn independent_drive(n: usize) -> DriveMatrices {
    DriveMatrices::new_unchecked(DMatrix::zeros(n, n), DMatrix::identity(n, n))
}

/// One rung `lambda^2 H` of the spectral decomposition of `J^T J`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralComponent {
    pub lambda_sq: f64,
    pub projection: DMatrix<f64>,
}

/// Completion of a contraction `J` to a drive pair, with the pseudo-inverse
/// of `K` needed to recover the independent driver.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCompletion {
    /// Symmetric PSD square root of `I - J^T J`.
    pub k: DMatrix<f64>,
    pub k_pinv: DMatrix<f64>,
    /// Projection onto the eigenspace of `J^T J` for eigenvalue 1.
    pub h1: DMatrix<f64>,
    /// Projection onto the null space of `J^T J`.
    pub h0: DMatrix<f64>,
    /// Components with `0 < lambda^2 < 1`, in decreasing order.
    pub ladder: Vec<SpectralComponent>,
    /// Set when a pseudo-inverse entry hit [`PINV_CAP`].
    pub pinv_capped: bool,
}

impl SpectralCompletion {
    pub fn drive(&self, j: &DMatrix<f64>) -> DriveMatrices {
        DriveMatrices::new_unchecked(j.clone(), self.k.clone())
    }
}

fn largest_singular_value(j: &DMatrix<f64>) -> f64 {
    let g = j.transpose() * j;
    SymmetricEigen::new(g).eigenvalues.max().max(0.0).sqrt()
}

fn check_contraction(j: &DMatrix<f64>) -> Result<(), StrategyError> {
    if !j.is_square() {
        return Err(StrategyError::DimensionMismatch { expected: j.nrows(), got: j.ncols() });
    }
    let s = largest_singular_value(j);
    if !(s <= 1.0 + DRIVE_TOL) {
        return Err(StrategyError::NotAContraction(s));
    }
    Ok(())
}

/// Spectral completion of a contraction via a symmetric eigendecomposition
/// of `J^T J`. `K` is built eigenpair by eigenpair; the projections and the
/// pseudo-inverse use eigenvalue clusters.
pub fn spectral_complete(j: &DMatrix<f64>) -> Result<SpectralCompletion, StrategyError> {
    check_contraction(j)?;
    let n = j.nrows();
    let g = j.transpose() * j;
    let eig = SymmetricEigen::new(g.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    // group eigenvectors with eigenvalues within the clustering tolerance
    let mut groups: Vec<(f64, Vec<usize>)> = Vec::new();
    for &i in &order {
        let lam = eig.eigenvalues[i].clamp(0.0, 1.0);
        match groups.last_mut() {
            Some((rep, members)) if (*rep - lam).abs() <= EIGEN_CLUSTER_TOL => members.push(i),
            _ => groups.push((lam, vec![i])),
        }
    }

    let mut h1 = DMatrix::zeros(n, n);
    let mut h0 = DMatrix::zeros(n, n);
    let mut k = DMatrix::zeros(n, n);
    let mut k_pinv = DMatrix::zeros(n, n);
    let mut ladder = Vec::new();
    let mut pinv_capped = false;
    for (_, members) in groups {
        let mean = members.iter().map(|&i| eig.eigenvalues[i].clamp(0.0, 1.0)).sum::<f64>() / members.len() as f64;
        let unit = mean >= 1.0 - UNIT_EIGEN_TOL;
        let mut proj = DMatrix::zeros(n, n);
        for &i in &members {
            let v = eig.eigenvectors.column(i);
            let vv = v * v.transpose();
            let root = (1.0 - eig.eigenvalues[i].clamp(0.0, 1.0)).sqrt();
            k += &vv * root;
            if !unit {
                let mut inv = 1.0 / root;
                if inv > PINV_CAP {
                    inv = PINV_CAP;
                    pinv_capped = true;
                }
                k_pinv += &vv * inv;
            }
            proj += vv;
        }
        if unit {
            h1 += proj;
        } else if mean <= EIGEN_CLUSTER_TOL {
            h0 += proj;
        } else {
            ladder.push(SpectralComponent { lambda_sq: mean, projection: proj });
        }
    }
    Ok(SpectralCompletion { k, k_pinv, h1, h0, ladder, pinv_capped })
}

/// The iterative construction of the decomposition `J^T J = H_1 + sum
/// lambda_i^2 H_i`: `H_1` is the limit of `(J^T J)^k`; each following
/// projection is the limit of renormalized powers of the remainder.
///
/// Returned components include `H_1` (with `lambda_sq = 1`) when present,
/// in decreasing order of `lambda_sq`; the null-space projection is
/// whatever is left over. Intended for matrices with well-separated
/// eigenvalues; convergence degrades as gaps close.
pub fn spectral_ladder_by_powers(j: &DMatrix<f64>) -> Result<Vec<SpectralComponent>, StrategyError> {
    check_contraction(j)?;
    let n = j.nrows();
    let g = j.transpose() * j;
    let mut out = Vec::new();

    let mut m = g.clone();
    for _ in 0..64 {
        let next = &m * &m;
        let change = (&next - &m).amax();
        m = next;
        if change < 1e-15 {
            break;
        }
    }
    let mut rem = g.clone();
    if m.trace() > 0.5 {
        rem -= &m;
        out.push(SpectralComponent { lambda_sq: 1.0, projection: m });
    }

    while out.len() < n && rem.amax() > 1e-12 {
        let mut p = &rem / rem.norm();
        for _ in 0..200 {
            let mut next = &p * &p;
            let nn = next.norm();
            next /= nn;
            let change = (&next - &p).amax();
            p = next;
            if change < 1e-15 {
                break;
            }
        }
        // p converges to H / sqrt(rank), whose trace is sqrt(rank)
        let h = &p * p.trace();
        let lambda_sq = (&rem * &h).trace() / h.trace();
        rem -= &h * lambda_sq;
        out.push(SpectralComponent { lambda_sq, projection: h });
    }
    Ok(out)
}

/// Recover the increment of the independent driver:
/// `dC = K^+ (dA - J^T dB) + H_1 dD`.
pub fn recover_driver(
    d_a: &DVector<f64>,
    d_b: &DVector<f64>,
    completion: &SpectralCompletion,
    j: &DMatrix<f64>,
    d_d: &DVector<f64>,
) -> Result<DVector<f64>, StrategyError> {
    let n = j.nrows();
    for v in [d_a, d_b, d_d] {
        if v.len() != n {
            return Err(StrategyError::DimensionMismatch { expected: n, got: v.len() });
        }
    }
    if completion.k_pinv.nrows() != n {
        return Err(StrategyError::DimensionMismatch { expected: n, got: completion.k_pinv.nrows() });
    }
    Ok(&completion.k_pinv * (d_a - j.transpose() * d_b) + &completion.h1 * d_d)
}

/// A predictable state-feedback rule for the drive matrices.
pub trait CouplingStrategy: Send + Sync {
    fn name(&self) -> String;
    fn drive(&self, t: f64, x: &DVector<f64>, y: &DVector<f64>) -> Result<DriveMatrices, StrategyError>;
}

/// The closed-form strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Builtin {
    Reflection,
    Perverse,
    Synchronous,
    Independent,
}

impl Builtin {
    pub const ALL: [Builtin; 4] = [Builtin::Reflection, Builtin::Perverse, Builtin::Synchronous, Builtin::Independent];

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "reflection" => Some(Self::Reflection),
            "perverse" => Some(Self::Perverse),
            "synchronous" => Some(Self::Synchronous),
            "independent" => Some(Self::Independent),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Reflection => "reflection",
            Self::Perverse => "perverse",
            Self::Synchronous => "synchronous",
            Self::Independent => "independent",
        }
    }
}

impl CouplingStrategy for Builtin {
    fn name(&self) -> String {
        self.as_str().to_string()
    }

    fn drive(&self, _t: f64, x: &DVector<f64>, y: &DVector<f64>) -> Result<DriveMatrices, StrategyError> {
        let n = x.len();
        match self {
            Self::Synchronous => Ok(synchronous_drive(n)),
            Self::Independent => Ok(independent_drive(n)),
            Self::Reflection | Self::Perverse => {
                let d = x - y;
                if d.norm() < COINCIDENT_DIST {
                    return Ok(synchronous_drive(n));
                }
                if *self == Self::Reflection {
                    reflection_drive(&d)
                } else {
                    perverse_drive(&d)
                }
            }
        }
    }
}

/// `J = scale * R(angle)`, a rotation acting in the first two coordinates
/// (identity on the rest), scaled into a contraction. `K` is completed
/// spectrally.
#[derive(Debug, Clone)]
pub struct RotationStrategy {
    angle: f64,
    scale: f64,
}

impl RotationStrategy {
    pub fn new(angle: f64, scale: f64) -> Result<Self, StrategyError> {
        if !angle.is_finite() || !(0.0..=1.0).contains(&scale) {
            return Err(StrategyError::InvalidParameters(format!(
                "rotation needs a finite angle and scale in [0, 1], got angle={angle}, scale={scale}"
            )));
        }
        Ok(Self { angle, scale })
    }

    pub fn matrix(&self, n: usize) -> DMatrix<f64> {
        let mut j = DMatrix::identity(n, n);
        let (s, c) = self.angle.sin_cos();
        j[(0, 0)] = c;
        j[(0, 1)] = -s;
        j[(1, 0)] = s;
        j[(1, 1)] = c;
        j * self.scale
    }
}

impl CouplingStrategy for RotationStrategy {
    fn name(&self) -> String {
        format!("custom-rotation(angle={}, scale={})", self.angle, self.scale)
    }

    fn drive(&self, _t: f64, x: &DVector<f64>, _y: &DVector<f64>) -> Result<DriveMatrices, StrategyError> {
        let j = self.matrix(x.len());
        Ok(spectral_complete(&j)?.drive(&j))
    }
}

/// A fixed contraction `J` given as a table; `K` is completed once.
#[derive(Debug, Clone)]
pub struct MatrixStrategy {
    drive: DriveMatrices,
}

impl MatrixStrategy {
    pub fn new(j: DMatrix<f64>) -> Result<Self, StrategyError> {
        let completion = spectral_complete(&j)?;
        Ok(Self { drive: completion.drive(&j) })
    }

    /// Row-major table of `n * n` entries.
    pub fn from_row_major(n: usize, entries: &[f64]) -> Result<Self, StrategyError> {
        if entries.len() != n * n {
            return Err(StrategyError::DimensionMismatch { expected: n * n, got: entries.len() });
        }
        Self::new(DMatrix::from_row_slice(n, n, entries))
    }
}

impl CouplingStrategy for MatrixStrategy {
    fn name(&self) -> String {
        "custom-matrix".to_string()
    }

    fn drive(&self, _t: f64, x: &DVector<f64>, _y: &DVector<f64>) -> Result<DriveMatrices, StrategyError> {
        if x.len() != self.drive.dim() {
            return Err(StrategyError::DimensionMismatch { expected: self.drive.dim(), got: x.len() });
        }
        Ok(self.drive.clone())
    }
}
