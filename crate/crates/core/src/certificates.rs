//! Lyapunov certificates forcing every co-adapted coupling to ε-couple.
//!
//! A certificate is a function `Phi` on
//! `F = {(x, y) in closure(D)^2 : |x - y| >= eps}` whose differential has
//! volatility at least `a dt` and drift at most `b dt` under every
//! co-adapted coupling. Then `Psi = c (1 - exp(-lambda Phi))` makes
//! `Psi + t` a supermartingale up to the exit time from `F`.
//!
//! Two constructions are provided:
//! - [`SimpleCertificate`]: one hyperbolic perturbation
//!   `V(x, y) = |x-y|^2/2 + delta <x-y, (x+y)/2 - p>` for domains whose
//!   boundary has no straight pieces;
//! - [`PlanarCertificate`]: the minimum of damped perturbations over poles
//!   built from the straight boundary pieces of a planar domain.
//!
//! All inequalities are checked on deterministic grids and reported in a
//! [`VerificationReport`].

use crate::dynamics::CoupledTrajectory;
use crate::geometry::{sphere_directions, BoundarySegment, ConvexDomain, GeometryError, Pole};
use crate::strategies::DriveMatrices;
use nalgebra::{DVector, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;
use thiserror::Error;

/// Safety factor applied below the largest admissible `delta`.
pub const SAFETY_FACTOR: f64 = 0.9;
/// Smallest `delta` tried before declaring the drift inequalities infeasible.
pub const DELTA_MIN: f64 = 1e-8;
/// Margins up to `VERIFY_TOL * diam^2` count as nonpositive (rounding of
/// configurations where the exact margin is zero).
pub const VERIFY_TOL: f64 = 1e-12;
/// Largest number of halvings of `eta` (planar) or of `delta` after a failed
/// re-verification.
const MAX_HALVINGS: usize = 40;
/// One-sided normal quantile used to flag windows with positive drift.
const DRIFT_FLAG_Z: f64 = 2.5758293035489004;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CertificateError {
    #[error("invalid certificate parameters: {0}")]
    InvalidParameters(String),
    #[error("delta {delta} violates the bound delta < {bound}")]
    DeltaTooLarge { delta: f64, bound: f64 },
    #[error("pole must lie outside the closed domain")]
    PoleInside,
    #[error(
        "no feasible delta: boundary drift check still fails at delta = {delta:e} (worst margin {worst_margin:.3e}); \
         the boundary contains line segments or the grid is too coarse"
    )]
    NoFeasibleDelta { delta: f64, worst_margin: f64 },
    #[error("circle radius {radius} too small: need R > {required}")]
    RadiusTooSmall { radius: f64, required: f64 },
    #[error("criterion ratio {ratio} <= 1 at x = {x:?}, y = {y:?}; increase R")]
    CriterionRatioFailure { ratio: f64, x: [f64; 2], y: [f64; 2] },
    #[error("localization fails for every eta down to {eta:e}; increase R")]
    LocalizationFailure { eta: f64 },
    #[error("certificate has no poles")]
    EmptyPoleList,
    #[error("inner products for the compared poles do not have the same sign")]
    SameSignViolation,
    #[error("window of {window} samples is too short (need at least {min})")]
    WindowTooShort { window: usize, min: usize },
    #[error("trajectory carries no certificate series")]
    MissingCertificateSeries,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

// ---------------------------------------------------------------------------
// Pointwise functions

/// `|x-y|^2/2 + (delta/2)(|x-p|^2 - |y-p|^2)`.
pub fn eval_v(p: &DVector<f64>, delta: f64, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    0.5 * (x - y).norm_squared() + 0.5 * delta * ((x - p).norm_squared() - (y - p).norm_squared())
}

/// `|x-y|^2/2 + delta <x-y, (x+y)/2 - p>`; equal to [`eval_v`].
pub fn eval_v_inner(p: &DVector<f64>, delta: f64, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let d = x - y;
    let z = (x + y) * 0.5 - p;
    0.5 * d.norm_squared() + delta * d.dot(&z)
}

/// Damped coefficient `delta exp(-|(x+y)/2 - p| / s)`.
pub fn kappa(p: &DVector<f64>, delta: f64, s: f64, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    delta * (-((x + y) * 0.5 - p).norm() / s).exp()
}

/// `|x-y|^2/2 + kappa <x-y, (x+y)/2 - p>`.
pub fn eval_vtilde(p: &DVector<f64>, delta: f64, s: f64, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let k = kappa(p, delta, s, x, y);
    eval_v_inner(p, k, x, y)
}

/// `|x-y|^2/2 + (kappa/2)(|x-p|^2 - |y-p|^2)`; equal to [`eval_vtilde`].
pub fn eval_vtilde_norms(p: &DVector<f64>, delta: f64, s: f64, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
    let k = kappa(p, delta, s, x, y);
    eval_v(p, k, x, y)
}

/// Gradients of `V` with respect to `x` and `y`.
pub fn grad_v(p: &DVector<f64>, delta: f64, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    let d = x - y;
    let gx = &d + (x - p) * delta;
    let gy = -d - (y - p) * delta;
    (gx, gy)
}

/// Gradients of `Vtilde` with respect to `x` and `y`:
/// `x-y + kappa(x-p) - (kappa/2s)<x-y,Z> e` and
/// `y-x - kappa(y-p) - (kappa/2s)<x-y,Z> e`, with `Z = (x+y)/2 - p`,
/// `e = Z/|Z|`.
pub fn grad_vtilde(
    p: &DVector<f64>,
    delta: f64,
    s: f64,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> (DVector<f64>, DVector<f64>) {
    let d = x - y;
    let z = (x + y) * 0.5 - p;
    let nz = z.norm();
    let k = delta * (-nz / s).exp();
    let shared = if nz > 0.0 { &z * (k / (2.0 * s) * d.dot(&z) / nz) } else { DVector::zeros(x.len()) };
    let gx = &d + (x - p) * k - &shared;
    let gy = -d - (y - p) * k - shared;
    (gx, gy)
}

/// `(dPhi)^2/dt = |gx + J gy|^2 + |K gy|^2` for drive matrices `(J, K)`.
pub fn volatility_rate(gx: &DVector<f64>, gy: &DVector<f64>, drive: &DriveMatrices) -> f64 {
    (gx + drive.j() * gy).norm_squared() + (drive.k() * gy).norm_squared()
}

/// Interior drift rate of `Phi`: `n - tr J` (the Hessian term shared by
/// every hyperbolic perturbation).
pub fn interior_drift_rate(drive: &DriveMatrices) -> f64 {
    drive.dim() as f64 - drive.j().trace()
}

fn grad_vtilde_v2(
    p: &Vector2<f64>,
    delta: f64,
    s: f64,
    x: &Vector2<f64>,
    y: &Vector2<f64>,
) -> (Vector2<f64>, Vector2<f64>) {
    let d = x - y;
    let z = (x + y) * 0.5 - p;
    let nz = z.norm();
    let k = delta * (-nz / s).exp();
    let shared = if nz > 0.0 { z * (k / (2.0 * s) * d.dot(&z) / nz) } else { Vector2::zeros() };
    (d + (x - p) * k - shared, -d - (y - p) * k - shared)
}

/// Damped inner product `exp(-|m - p|/s) <x - y, m - p>` with `m` the
/// midpoint; the pole-dependent part of `Vtilde` up to the factor `delta`.
fn damped_inner(p: &Vector2<f64>, s: f64, x: &Vector2<f64>, y: &Vector2<f64>) -> f64 {
    let z = (x + y) * 0.5 - p;
    (-z.norm() / s).exp() * (x - y).dot(&z)
}

// ---------------------------------------------------------------------------
// Lemma constants and Psi

/// Constants turning a volatility floor `a` and drift ceiling `b` into the
/// supermartingale `Psi + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LemmaConstants {
    pub a: f64,
    pub b: f64,
    pub lambda: f64,
    /// Natural log of `c`.
    pub log_c: f64,
    /// Upper bound on `Phi` over `F`.
    pub max_phi: f64,
}

impl LemmaConstants {
    /// `b = 2n`, `lambda = 2 (2b/a)`, and `c` twice the smallest admissible
    /// value `2 exp(lambda max_phi) / (lambda (lambda a - 2b))`.
    pub fn new(a: f64, n: usize, max_phi: f64) -> Self {
        let b = 2.0 * n as f64;
        let lambda = 2.0 * (2.0 * b / a);
        let mut out = Self { a, b, lambda, log_c: 0.0, max_phi };
        out.log_c = out.log_c_threshold() + LN_2;
        out
    }

    /// `log(2/lambda) + lambda max_phi - log(lambda a - 2b)`; `log_c` must
    /// exceed it.
    pub fn log_c_threshold(&self) -> f64 {
        (2.0 / self.lambda).ln() + self.lambda * self.max_phi - (self.lambda * self.a - 2.0 * self.b).ln()
    }
}

/// Value of `Psi = c (1 - exp(-lambda Phi))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsiValue {
    /// `Psi`, clamped to `+-f64::MAX` when it overflows.
    pub value: f64,
    /// `ln Psi` for `Phi > 0`, `-inf` at `Phi = 0`, NaN for `Phi < 0`.
    pub log_value: f64,
    pub saturated: bool,
}

/// `Psi` evaluated in log space.
pub fn eval_psi(log_c: f64, lambda: f64, phi: f64) -> PsiValue {
    let x = lambda * phi;
    // ln |1 - exp(-x)|
    let log_frac = if x > 0.0 {
        (-(-x).exp_m1()).ln()
    } else if x < 0.0 {
        -x + (-(x.exp())).ln_1p()
    } else {
        f64::NEG_INFINITY
    };
    let log_mag = log_c + log_frac;
    let sign = if x >= 0.0 { 1.0 } else { -1.0 };
    let saturated = log_mag > f64::MAX.ln();
    let value = if saturated { sign * f64::MAX } else { sign * log_mag.exp() };
    PsiValue { value, log_value: if x >= 0.0 { log_mag } else { f64::NAN }, saturated }
}

/// A function certifying ε-coupling through the supermartingale `Psi + t`.
pub trait LyapunovCertificate: Send + Sync {
    fn phi(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64;

    /// Gradients of the term of `Phi` active at `(x, y)`.
    fn phi_gradients(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>);

    fn constants(&self) -> &LemmaConstants;

    fn epsilon(&self) -> f64;

    fn volatility_floor(&self) -> f64 {
        self.constants().a
    }

    fn lambda(&self) -> f64 {
        self.constants().lambda
    }

    fn log_c(&self) -> f64 {
        self.constants().log_c
    }

    fn psi(&self, phi: f64) -> PsiValue {
        eval_psi(self.log_c(), self.lambda(), phi)
    }

    fn log_psi(&self, phi: f64) -> f64 {
        self.psi(phi).log_value
    }
}

// ---------------------------------------------------------------------------
// Verification reports

/// Worst value of one inequality `margin <= 0` over a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginEntry {
    pub name: String,
    /// Grid spacing used.
    pub resolution: f64,
    /// Configurations evaluated.
    pub samples: usize,
    /// Largest margin found; `-inf` when the grid is empty.
    pub worst_margin: f64,
    /// Configuration attaining it (`x` then `y`, concatenated).
    pub arg_worst: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub entries: Vec<MarginEntry>,
    /// Absolute tolerance on margins.
    pub tolerance: f64,
    pub pass: bool,
}

impl VerificationReport {
    pub fn new(entries: Vec<MarginEntry>, tolerance: f64) -> Self {
        let pass = entries.iter().all(|e| e.worst_margin <= tolerance);
        Self { entries, tolerance, pass }
    }

    pub fn entry(&self, name: &str) -> Option<&MarginEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Largest margin over all entries.
    pub fn worst_margin(&self) -> f64 {
        self.entries.iter().map(|e| e.worst_margin).fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, Clone)]
struct Worst {
    margin: f64,
    arg: Vec<f64>,
    samples: usize,
}

impl Worst {
    fn new() -> Self {
        Self { margin: f64::NEG_INFINITY, arg: Vec::new(), samples: 0 }
    }

    fn update(&mut self, margin: f64, arg: impl FnOnce() -> Vec<f64>) {
        self.samples += 1;
        if margin > self.margin || (margin.is_nan() && !self.margin.is_nan()) {
            self.margin = margin;
            self.arg = arg();
        }
    }

    /// Sequential merge; ties keep the earlier entry.
    fn merge(mut self, other: Worst) -> Worst {
        let samples = self.samples + other.samples;
        if other.margin > self.margin {
            self = other;
        }
        self.samples = samples;
        self
    }

    fn into_entry(self, name: &str, resolution: f64) -> MarginEntry {
        MarginEntry { name: name.into(), resolution, samples: self.samples, worst_margin: self.margin, arg_worst: self.arg }
    }
}

fn concat(x: &[f64], y: &[f64]) -> Vec<f64> {
    x.iter().chain(y.iter()).copied().collect()
}

/// Sweep all ordered pairs of `points` at distance at least `eps`,
/// returning the worst value of each of the `K` margins.
fn pair_sweep<const K: usize>(
    points: &[DVector<f64>],
    eps: f64,
    f: impl Fn(&DVector<f64>, &DVector<f64>) -> [f64; K] + Sync,
) -> [Worst; K] {
    let eps2 = eps * eps;
    let parts: Vec<[Worst; K]> = points
        .par_iter()
        .map(|x| {
            let mut w: [Worst; K] = std::array::from_fn(|_| Worst::new());
            for y in points {
                if (x - y).norm_squared() < eps2 {
                    continue;
                }
                let m = f(x, y);
                for k in 0..K {
                    w[k].update(m[k], || concat(x.as_slice(), y.as_slice()));
                }
            }
            w
        })
        .collect();
    parts.into_iter().fold(std::array::from_fn(|_| Worst::new()), |acc, w| {
        let mut acc = acc;
        for (k, wk) in w.into_iter().enumerate() {
            acc[k] = std::mem::replace(&mut acc[k], Worst::new()).merge(wk);
        }
        acc
    })
}

/// Grid for the volatility and maximum checks: interior lattice plus
/// boundary samples.
fn coarse_points(domain: &ConvexDomain, spacing: f64) -> Result<Vec<DVector<f64>>, GeometryError> {
    let mut pts = domain.interior_grid(spacing)?;
    pts.extend(domain.boundary_samples(spacing)?.into_iter().map(|(q, _)| q));
    Ok(pts)
}

fn coarse_spacing(domain: &ConvexDomain, spacing: f64) -> f64 {
    spacing.max(domain.diameter() / 30.0)
}

// ---------------------------------------------------------------------------
// Simple certificate

/// `a = (delta eps^2 / ((2 + delta) diam + delta sup))^2`, valid for
/// `delta < eps / (2 sup)`.
pub fn simple_volatility_floor(eps: f64, delta: f64, diam: f64, sup: f64) -> Result<f64, CertificateError> {
    let bound = eps / (2.0 * sup);
    if !(delta > 0.0) || !(delta < bound) {
        return Err(CertificateError::DeltaTooLarge { delta, bound });
    }
    Ok((delta * eps * eps / ((2.0 + delta) * diam + delta * sup)).powi(2))
}

/// Certificate `Phi = V_{p,delta}` for a domain without straight boundary
/// pieces.
#[derive(Debug, Clone, PartialEq)]
pub struct SimpleCertificate {
    pub domain: ConvexDomain,
    pub pole: DVector<f64>,
    pub delta: f64,
    pub epsilon: f64,
    /// `sup { |p - w| : w in D }`.
    pub sup_dist: f64,
    pub constants: LemmaConstants,
    pub grid_spacing: f64,
    pub report: Option<VerificationReport>,
}

impl SimpleCertificate {
    /// Assemble a certificate from its defining scalars without running the
    /// grid verification.
    pub fn from_parts(
        domain: &ConvexDomain,
        pole: DVector<f64>,
        delta: f64,
        epsilon: f64,
        grid_spacing: f64,
    ) -> Result<Self, CertificateError> {
        let n = domain.dimension();
        if pole.len() != n {
            return Err(GeometryError::DimensionMismatch { expected: n, got: pole.len() }.into());
        }
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(CertificateError::InvalidParameters(format!("epsilon must be positive, got {epsilon}")));
        }
        if !(grid_spacing > 0.0) {
            return Err(CertificateError::InvalidParameters("grid spacing must be positive".into()));
        }
        if domain.contains(&pole) {
            return Err(CertificateError::PoleInside);
        }
        let sup = domain.sup_dist(&pole);
        let diam = domain.diameter();
        let a = simple_volatility_floor(epsilon, delta, diam, sup)?;
        let max_phi = 0.5 * diam * diam + delta * diam * sup;
        Ok(Self {
            domain: domain.clone(),
            pole,
            delta,
            epsilon,
            sup_dist: sup,
            constants: LemmaConstants::new(a, n, max_phi),
            grid_spacing,
            report: None,
        })
    }

    /// `eps / (2 sup)`: the strict upper bound on `delta`.
    pub fn delta_cap(&self) -> f64 {
        self.epsilon / (2.0 * self.sup_dist)
    }

    /// Boundary drift inequalities, volatility floor and the bound on `Phi`
    /// swept at the given spacing.
    pub fn verify(&self, spacing: f64) -> Result<VerificationReport, CertificateError> {
        let mut entries = simple_drift_entries(&self.domain, &self.pole, self.delta, self.epsilon, spacing)?;
        let cs = coarse_spacing(&self.domain, spacing);
        let pts = coarse_points(&self.domain, cs)?;
        let a = self.constants.a;
        let max_phi = self.constants.max_phi;
        let [vol, maxp] = pair_sweep(&pts, self.epsilon, |x, y| {
            let (gx, gy) = grad_v(&self.pole, self.delta, x, y);
            [a - (gx.norm() - gy.norm()).powi(2), eval_v(&self.pole, self.delta, x, y) - max_phi]
        });
        entries.push(vol.into_entry("volatility", cs));
        entries.push(maxp.into_entry("max_phi", cs));
        Ok(VerificationReport::new(entries, VERIFY_TOL * self.domain.diameter().powi(2)))
    }
}

/// The two boundary drift inequalities
/// `<x-y+delta(x-p), nu(x)> <= 0` (x on the boundary) and
/// `<y-x-delta(y-p), nu(y)> <= 0` (y on the boundary), for partners at
/// distance at least `eps`.
///
/// Both are affine in the partner, so their maximum over the partner set
/// `closure(D) minus ball(q, eps)` is attained on its boundary: boundary
/// points or points of the sphere of radius `eps` about `q`.
fn simple_drift_entries(
    domain: &ConvexDomain,
    p: &DVector<f64>,
    delta: f64,
    eps: f64,
    spacing: f64,
) -> Result<Vec<MarginEntry>, CertificateError> {
    let bnd = domain.boundary_samples(spacing)?;
    let circle = sphere_directions(domain.dimension(), eps, spacing)?;
    let eps2 = eps * eps;
    let parts: Vec<(Worst, Worst)> = bnd
        .par_iter()
        .map(|(q, nu)| {
            let qn = q.dot(nu);
            let c = (q - p).dot(nu);
            // best partner: maximize <q - w, nu>
            let mut best = f64::NEG_INFINITY;
            let mut arg: Option<DVector<f64>> = None;
            let mut count = 0usize;
            let mut visit = |w: &DVector<f64>| {
                if (q - w).norm_squared() < eps2 {
                    return;
                }
                count += 1;
                let v = qn - w.dot(nu);
                if v > best {
                    best = v;
                    arg = Some(w.clone());
                }
            };
            for (w, _) in &bnd {
                visit(w);
            }
            for u in &circle {
                let w = q + u * eps;
                if domain.contains(&w) {
                    visit(&w);
                }
            }
            let mut wx = Worst::new();
            let mut wy = Worst::new();
            if let Some(w) = arg {
                wx.update(best + delta * c, || concat(q.as_slice(), w.as_slice()));
                wy.update(best - delta * c, || concat(w.as_slice(), q.as_slice()));
                wx.samples = count;
                wy.samples = count;
            }
            (wx, wy)
        })
        .collect();
    let (wx, wy) = parts
        .into_iter()
        .fold((Worst::new(), Worst::new()), |(ax, ay), (bx, by)| (ax.merge(bx), ay.merge(by)));
    Ok(vec![wx.into_entry("drift_x", spacing), wy.into_entry("drift_y", spacing)])
}

/// Largest `delta` (with safety factor) below `eps / (2 sup)` whose boundary
/// drift sweep passes, found by bisection.
pub fn select_simple_certificate(
    domain: &ConvexDomain,
    eps: f64,
    pole: &DVector<f64>,
    spacing: f64,
) -> Result<SimpleCertificate, CertificateError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(CertificateError::InvalidParameters(format!("epsilon must be positive, got {eps}")));
    }
    if !(spacing > 0.0) {
        return Err(CertificateError::InvalidParameters("grid spacing must be positive".into()));
    }
    if pole.len() != domain.dimension() {
        return Err(GeometryError::DimensionMismatch { expected: domain.dimension(), got: pole.len() }.into());
    }
    if domain.contains(pole) {
        return Err(CertificateError::PoleInside);
    }
    let tol = VERIFY_TOL * domain.diameter().powi(2);
    let sup = domain.sup_dist(pole);
    let worst = |delta: f64| -> Result<f64, CertificateError> {
        let e = simple_drift_entries(domain, pole, delta, eps, spacing)?;
        Ok(e.iter().map(|e| e.worst_margin).fold(f64::NEG_INFINITY, f64::max))
    };
    let hi0 = eps / (2.0 * sup) * (1.0 - 1e-9);
    let mut delta = if worst(hi0)? <= tol {
        SAFETY_FACTOR * hi0
    } else {
        let w = worst(DELTA_MIN)?;
        if w > tol {
            return Err(CertificateError::NoFeasibleDelta { delta: DELTA_MIN, worst_margin: w });
        }
        // margins are nondecreasing in delta: geometric bisection
        let (mut lo, mut hi) = (DELTA_MIN, hi0);
        while hi / lo > 1.0 + 1e-6 {
            let mid = (lo * hi).sqrt();
            if worst(mid)? <= tol {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        SAFETY_FACTOR * hi
    };
    let mut cert = SimpleCertificate::from_parts(domain, pole.clone(), delta, eps, spacing)?;
    let mut report = cert.verify(spacing)?;
    let mut halvings = 0;
    while !report.pass {
        halvings += 1;
        if halvings > MAX_HALVINGS || delta / 2.0 < DELTA_MIN {
            return Err(CertificateError::NoFeasibleDelta { delta, worst_margin: report.worst_margin() });
        }
        delta /= 2.0;
        cert = SimpleCertificate::from_parts(domain, pole.clone(), delta, eps, spacing)?;
        report = cert.verify(spacing)?;
    }
    cert.report = Some(report);
    Ok(cert)
}

impl LyapunovCertificate for SimpleCertificate {
    fn phi(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        eval_v(&self.pole, self.delta, x, y)
    }

    fn phi_gradients(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        grad_v(&self.pole, self.delta, x, y)
    }

    fn constants(&self) -> &LemmaConstants {
        &self.constants
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

// ---------------------------------------------------------------------------
// Planar certificate

/// Which term of the pole minimum is active: index `2 k + swapped` for pole
/// `k`, where `swapped` means the arguments enter as `Vtilde(y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActiveTerm {
    pub index: usize,
    pub pole: usize,
    pub swapped: bool,
}

/// Upper bounds on `delta` for the planar certificate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaBounds {
    /// `eps / sup`.
    pub sup_bound: f64,
    /// `eps / (sup + diam/2)`.
    pub half_diam_bound: f64,
    /// `xi / ((diam + R)(1 + diam/(2S)))`.
    pub normal_bound: f64,
    /// `eps (sqrt(1 - eta^2/eps^2) - eta/eps) / ((diam + R)(1 + diam/(2S)))`.
    pub tube_bound: f64,
}

impl DeltaBounds {
    pub fn min(&self) -> f64 {
        self.sup_bound.min(self.half_diam_bound).min(self.normal_bound).min(self.tube_bound)
    }
}

/// Smallest ratio of damped inner products between a segment's own pole and
/// the poles of parallel segments, over pairs on the segment.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioScan {
    pub min_ratio: f64,
    pub x: Vector2<f64>,
    pub y: Vector2<f64>,
    pub owner: usize,
    pub competitor: usize,
    pub pairs: usize,
}

/// Outcome of a localization sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationCheck {
    pub checked: usize,
    pub failures: usize,
    pub first_failure: Option<(Vector2<f64>, Vector2<f64>, usize)>,
}

/// Certificate `Phi = min` over poles of `Vtilde(x, y)` and `Vtilde(y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanarCertificate {
    pub domain: ConvexDomain,
    pub epsilon: f64,
    /// Pole circle radius `R`.
    pub radius: f64,
    /// `sigma = S / R`.
    pub sigma: f64,
    /// Damping scale `S`.
    pub s: f64,
    pub center: [f64; 2],
    /// `phi` with `3 phi` the smallest nonzero angle between segment lines.
    pub phi_angle: Option<f64>,
    pub eta: f64,
    pub xi: f64,
    pub delta: f64,
    pub segments: Vec<BoundarySegment>,
    pub poles: Vec<Pole>,
    /// Largest `sup_dist` over the poles.
    pub sup_dist: f64,
    pub delta_bounds: DeltaBounds,
    pub constants: LemmaConstants,
    pub grid_spacing: f64,
    pub ratio_scan: Option<RatioScan>,
    pub report: Option<VerificationReport>,
}

/// Either certificate kind.
#[derive(Debug, Clone, PartialEq)]
pub enum Certificate {
    Simple(SimpleCertificate),
    Planar(PlanarCertificate),
}

impl Certificate {
    pub fn verify(&self, spacing: f64) -> Result<VerificationReport, CertificateError> {
        match self {
            Self::Simple(c) => c.verify(spacing),
            Self::Planar(c) => c.verify(spacing),
        }
    }

    pub fn report(&self) -> Option<&VerificationReport> {
        match self {
            Self::Simple(c) => c.report.as_ref(),
            Self::Planar(c) => c.report.as_ref(),
        }
    }

    pub fn domain(&self) -> &ConvexDomain {
        match self {
            Self::Simple(c) => &c.domain,
            Self::Planar(c) => &c.domain,
        }
    }

    pub fn delta(&self) -> f64 {
        match self {
            Self::Simple(c) => c.delta,
            Self::Planar(c) => c.delta,
        }
    }
}

impl LyapunovCertificate for Certificate {
    fn phi(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        match self {
            Self::Simple(c) => c.phi(x, y),
            Self::Planar(c) => c.phi(x, y),
        }
    }

    fn phi_gradients(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        match self {
            Self::Simple(c) => c.phi_gradients(x, y),
            Self::Planar(c) => c.phi_gradients(x, y),
        }
    }

    fn constants(&self) -> &LemmaConstants {
        match self {
            Self::Simple(c) => &c.constants,
            Self::Planar(c) => &c.constants,
        }
    }

    fn epsilon(&self) -> f64 {
        match self {
            Self::Simple(c) => c.epsilon,
            Self::Planar(c) => c.epsilon,
        }
    }
}

/// `sqrt(1 - eta^2/eps^2) - eta/eps`.
pub fn tube_factor(eta: f64, eps: f64) -> f64 {
    (1.0 - (eta / eps).powi(2)).max(0.0).sqrt() - eta / eps
}

/// Volatility floor of the planar certificate:
/// `(2 eps^2 (1 - sup/S) min_k k(1 - k sup/eps) / (2(diam + delta sup (1 + diam/(2S)))))^2`
/// with `k` ranging over `[delta exp(-sup/S), delta]`.
pub fn planar_volatility_floor(eps: f64, delta: f64, s: f64, diam: f64, sup: f64) -> f64 {
    let g = |k: f64| k * (1.0 - k * sup / eps);
    let k_min = delta * (-sup / s).exp();
    let gap = 2.0 * eps * eps * (1.0 - sup / s) * g(k_min).min(g(delta));
    let norms = 2.0 * (diam + delta * sup * (1.0 + diam / (2.0 * s)));
    (gap / norms).powi(2)
}

impl PlanarCertificate {
    /// Assemble a certificate from its defining scalars, recomputing poles,
    /// bounds and constants, without running the grid verification.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        domain: &ConvexDomain,
        epsilon: f64,
        radius: f64,
        sigma: f64,
        center: [f64; 2],
        eta: f64,
        xi: f64,
        delta: f64,
        grid_spacing: f64,
    ) -> Result<Self, CertificateError> {
        check_planar_inputs(domain, epsilon, radius, sigma, grid_spacing)?;
        let segments = domain.maximal_segments(epsilon)?;
        let poles = make_poles(domain, epsilon, radius, &center)?;
        if poles.is_empty() {
            return Err(CertificateError::EmptyPoleList);
        }
        let s = sigma * radius;
        let sup = pole_sup(domain, &poles);
        if !(s > sup) {
            return Err(CertificateError::RadiusTooSmall { radius, required: (sup - radius) / (sigma - 1.0) });
        }
        if !(eta > 0.0 && tube_factor(eta, epsilon) > 0.0) {
            return Err(CertificateError::InvalidParameters(format!("eta = {eta} violates sqrt(1-eta^2/eps^2) > eta/eps")));
        }
        if !(xi > 0.0) {
            return Err(CertificateError::InvalidParameters(format!("xi must be positive, got {xi}")));
        }
        let diam = domain.diameter();
        let tail = (diam + radius) * (1.0 + diam / (2.0 * s));
        let bounds = DeltaBounds {
            sup_bound: epsilon / sup,
            half_diam_bound: epsilon / (sup + 0.5 * diam),
            normal_bound: xi / tail,
            tube_bound: epsilon * tube_factor(eta, epsilon) / tail,
        };
        if !(delta > 0.0) || !(delta < bounds.min()) {
            return Err(CertificateError::DeltaTooLarge { delta, bound: bounds.min() });
        }
        let a = planar_volatility_floor(epsilon, delta, s, diam, sup);
        let max_phi = 0.5 * diam * diam + delta * diam * sup;
        Ok(Self {
            domain: domain.clone(),
            epsilon,
            radius,
            sigma,
            s,
            center,
            phi_angle: crate::geometry::min_nonzero_line_angle(&segments).map(|t| t / 3.0),
            eta,
            xi,
            delta,
            segments,
            poles,
            sup_dist: sup,
            delta_bounds: bounds,
            constants: LemmaConstants::new(a, 2, max_phi),
            grid_spacing,
            ratio_scan: None,
            report: None,
        })
    }

    /// Value of `Phi` and the active term on planar points.
    pub fn phi_active(&self, x: &Vector2<f64>, y: &Vector2<f64>) -> (f64, ActiveTerm) {
        phi_over_poles(&self.poles, self.delta, self.s, x, y)
    }

    /// Gradients of the active term.
    pub fn active_gradients(&self, x: &Vector2<f64>, y: &Vector2<f64>) -> (Vector2<f64>, Vector2<f64>, ActiveTerm) {
        let (_, t) = self.phi_active(x, y);
        let p = &self.poles[t.pole].point;
        if t.swapped {
            let (g1, g2) = grad_vtilde_v2(p, self.delta, self.s, y, x);
            (g2, g1, t)
        } else {
            let (g1, g2) = grad_vtilde_v2(p, self.delta, self.s, x, y);
            (g1, g2, t)
        }
    }

    /// Localization sweep at tube width `eta`; see [`localization_check`].
    pub fn localization(&self, eta: f64, spacing: f64) -> Result<LocalizationCheck, CertificateError> {
        localization_check(&self.domain, &self.segments, &self.poles, self.s, self.epsilon, eta, spacing)
    }

    /// Singular drift with the active pole at boundary points, volatility
    /// floor and the bound on `Phi`, swept at the given spacing.
    pub fn verify(&self, spacing: f64) -> Result<VerificationReport, CertificateError> {
        let bnd = self.domain.boundary_samples(spacing)?;
        let cs = coarse_spacing(&self.domain, spacing);
        let mut partners: Vec<Vector2<f64>> =
            self.domain.interior_grid(spacing.max(self.domain.diameter() / 100.0))?.iter().map(v2).collect();
        partners.extend(bnd.iter().map(|(q, _)| v2(q)));
        let circle: Vec<Vector2<f64>> = sphere_directions(2, self.epsilon, spacing)?.iter().map(v2).collect();
        let eps2 = self.epsilon * self.epsilon;

        let parts: Vec<(Worst, Worst)> = bnd
            .par_iter()
            .map(|(q, nu)| {
                let q = v2(q);
                let nu = v2(nu);
                let mut wx = Worst::new();
                let mut wy = Worst::new();
                let mut visit = |w: &Vector2<f64>| {
                    if (q - w).norm_squared() < eps2 {
                        return;
                    }
                    // q plays x
                    let (gx, _, _) = self.active_gradients(&q, w);
                    wx.update(gx.dot(&nu), || vec![q.x, q.y, w.x, w.y]);
                    // q plays y
                    let (_, gy, _) = self.active_gradients(w, &q);
                    wy.update(gy.dot(&nu), || vec![w.x, w.y, q.x, q.y]);
                };
                for w in &partners {
                    visit(w);
                }
                for u in &circle {
                    let w = q + u;
                    if self.domain.contains(&dv(&w)) {
                        visit(&w);
                    }
                }
                (wx, wy)
            })
            .collect();
        let (wx, wy) = parts
            .into_iter()
            .fold((Worst::new(), Worst::new()), |(ax, ay), (bx, by)| (ax.merge(bx), ay.merge(by)));

        let pts = coarse_points(&self.domain, cs)?;
        let a = self.constants.a;
        let max_phi = self.constants.max_phi;
        let [vol, maxp] = pair_sweep(&pts, self.epsilon, |x, y| {
            let (x, y) = (v2(x), v2(y));
            let (gx, gy, _) = self.active_gradients(&x, &y);
            let (phi, _) = self.phi_active(&x, &y);
            [a - (gx.norm() - gy.norm()).powi(2), phi - max_phi]
        });
        let entries = vec![
            wx.into_entry("drift_x", spacing),
            wy.into_entry("drift_y", spacing),
            vol.into_entry("volatility", cs),
            maxp.into_entry("max_phi", cs),
        ];
        Ok(VerificationReport::new(entries, VERIFY_TOL * self.domain.diameter().powi(2)))
    }
}

impl LyapunovCertificate for PlanarCertificate {
    fn phi(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        self.phi_active(&v2(x), &v2(y)).0
    }

    fn phi_gradients(&self, x: &DVector<f64>, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (gx, gy, _) = self.active_gradients(&v2(x), &v2(y));
        (dv(&gx), dv(&gy))
    }

    fn constants(&self) -> &LemmaConstants {
        &self.constants
    }

    fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

fn v2(z: &DVector<f64>) -> Vector2<f64> {
    Vector2::new(z[0], z[1])
}

fn dv(z: &Vector2<f64>) -> DVector<f64> {
    DVector::from_vec(vec![z.x, z.y])
}

fn phi_over_poles(poles: &[Pole], delta: f64, s: f64, x: &Vector2<f64>, y: &Vector2<f64>) -> (f64, ActiveTerm) {
    let d = x - y;
    let m = (x + y) * 0.5;
    let half = 0.5 * d.norm_squared();
    let mut best = f64::INFINITY;
    let mut index = 0;
    for (k, pole) in poles.iter().enumerate() {
        let z = m - pole.point;
        let g = delta * (-z.norm() / s).exp() * d.dot(&z);
        if half + g < best {
            best = half + g;
            index = 2 * k;
        }
        if half - g < best {
            best = half - g;
            index = 2 * k + 1;
        }
    }
    (best, ActiveTerm { index, pole: index / 2, swapped: index % 2 == 1 })
}

/// `Phi` and its active term for a planar certificate.
pub fn eval_phi(
    cert: &PlanarCertificate,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<(f64, ActiveTerm), CertificateError> {
    if cert.poles.is_empty() {
        return Err(CertificateError::EmptyPoleList);
    }
    Ok(cert.phi_active(&v2(x), &v2(y)))
}

/// Ratio of damped inner products `exp(-|m - p|/S) <x - y, m - p>` for
/// poles `i` and `j`, which must give inner products of the same sign.
pub fn criterion_ratio(
    cert: &PlanarCertificate,
    x: &DVector<f64>,
    y: &DVector<f64>,
    i: usize,
    j: usize,
) -> Result<f64, CertificateError> {
    criterion_ratio_raw(&cert.poles, cert.s, &v2(x), &v2(y), i, j)
}

/// [`criterion_ratio`] on an explicit pole list.
pub fn criterion_ratio_raw(
    poles: &[Pole],
    s: f64,
    x: &Vector2<f64>,
    y: &Vector2<f64>,
    i: usize,
    j: usize,
) -> Result<f64, CertificateError> {
    if i >= poles.len() || j >= poles.len() {
        return Err(CertificateError::InvalidParameters(format!("pole index out of range ({} poles)", poles.len())));
    }
    if i == j {
        return Ok(1.0);
    }
    let fi = damped_inner(&poles[i].point, s, x, y);
    let fj = damped_inner(&poles[j].point, s, x, y);
    if !(fi * fj > 0.0) {
        return Err(CertificateError::SameSignViolation);
    }
    Ok(fi / fj)
}

/// Points along a segment at spacing at most `spacing`, endpoints included.
fn segment_points(seg: &BoundarySegment, spacing: f64) -> Vec<Vector2<f64>> {
    let k = (seg.length / spacing).ceil().max(1.0) as usize;
    (0..=k).map(|j| seg.start + seg.direction * (seg.length * j as f64 / k as f64)).collect()
}

fn parallel(a: &BoundarySegment, b: &BoundarySegment) -> bool {
    (a.direction.x * b.direction.y - a.direction.y * b.direction.x).abs() < 1e-12
}

/// For every segment with a parallel partner, the smallest ratio of the
/// larger damped inner product of its own two poles to that of each pole of
/// a parallel segment, over pairs on the segment at distance at least `eps`.
/// Returns `None` when no two segments are parallel.
pub fn scan_parallel_ratios(
    segments: &[BoundarySegment],
    poles: &[Pole],
    s: f64,
    eps: f64,
    spacing: f64,
) -> Option<RatioScan> {
    let mut out: Option<RatioScan> = None;
    for (i, seg) in segments.iter().enumerate() {
        let rivals: Vec<usize> = poles
            .iter()
            .enumerate()
            .filter(|(_, p)| p.segment != i && parallel(seg, &segments[p.segment]))
            .map(|(k, _)| k)
            .collect();
        if rivals.is_empty() {
            continue;
        }
        let own: Vec<usize> = poles.iter().enumerate().filter(|(_, p)| p.segment == i).map(|(k, _)| k).collect();
        let pts = segment_points(seg, spacing);
        for x in &pts {
            for y in &pts {
                if (x - y).norm() < eps {
                    continue;
                }
                let (owner, f_own) = own
                    .iter()
                    .map(|&k| (k, damped_inner(&poles[k].point, s, x, y).abs()))
                    .fold((own[0], f64::NEG_INFINITY), |acc, v| if v.1 > acc.1 { v } else { acc });
                for &r in &rivals {
                    let ratio = f_own / damped_inner(&poles[r].point, s, x, y).abs();
                    let better = out.as_ref().is_none_or(|o| ratio < o.min_ratio);
                    if better {
                        out = Some(RatioScan { min_ratio: ratio, x: *x, y: *y, owner, competitor: r, pairs: 0 });
                    }
                }
                if let Some(o) = out.as_mut() {
                    o.pairs += 1;
                }
            }
        }
    }
    out
}

/// Check that for `x`, `y` within `eta` of a common segment, one of them on
/// the boundary and `|x - y| >= eps`, the active term of `Phi` uses a pole
/// of that segment. The sweep takes boundary points near the segment for one
/// point and inward offsets `0, eta/2, eta` along the segment (plus the same
/// boundary points) for the other.
pub fn localization_check(
    domain: &ConvexDomain,
    segments: &[BoundarySegment],
    poles: &[Pole],
    s: f64,
    eps: f64,
    eta: f64,
    spacing: f64,
) -> Result<LocalizationCheck, CertificateError> {
    let bnd: Vec<Vector2<f64>> = domain.boundary_samples(spacing)?.iter().map(|(q, _)| v2(q)).collect();
    let mut total = LocalizationCheck { checked: 0, failures: 0, first_failure: None };
    for (i, seg) in segments.iter().enumerate() {
        let near: Vec<Vector2<f64>> = bnd.iter().filter(|q| seg.distance_to(q) <= eta).copied().collect();
        let inward = Vector2::new(-seg.direction.y, seg.direction.x);
        let mut others = near.clone();
        for off in [0.0, 0.5 * eta, eta] {
            for q in segment_points(seg, spacing) {
                let w = q + inward * off;
                if domain.contains(&dv(&w)) {
                    others.push(w);
                }
            }
        }
        let part: Vec<LocalizationCheck> = near
            .par_iter()
            .map(|y| {
                let mut c = LocalizationCheck { checked: 0, failures: 0, first_failure: None };
                for x in &others {
                    if (x - y).norm() < eps {
                        continue;
                    }
                    c.checked += 1;
                    // delta cancels in the comparison of terms
                    let (_, t) = phi_over_poles(poles, 1.0, s, x, y);
                    if poles[t.pole].segment != i {
                        c.failures += 1;
                        if c.first_failure.is_none() {
                            c.first_failure = Some((*x, *y, i));
                        }
                    }
                }
                c
            })
            .collect();
        for c in part {
            total.checked += c.checked;
            total.failures += c.failures;
            if total.first_failure.is_none() {
                total.first_failure = c.first_failure;
            }
        }
    }
    Ok(total)
}

/// `min <x - y, nu(y)>` over boundary points `y` with inward normal `nu` and
/// partners `x` at distance at least `eps` that do not share an `eta`-tube
/// with `y`.
///
/// The objective is affine in `x`, so the minimum over the closed partner
/// region is attained on its boundary, which consists of boundary points of
/// `D`, the circle of radius `eps` about `y` and the tube boundaries (offset
/// lines and end caps); all three are sampled.
pub fn compute_xi(
    domain: &ConvexDomain,
    segments: &[BoundarySegment],
    eps: f64,
    eta: f64,
    spacing: f64,
) -> Result<(f64, [f64; 4]), CertificateError> {
    let bnd: Vec<(Vector2<f64>, Vector2<f64>)> =
        domain.boundary_samples(spacing)?.iter().map(|(q, n)| (v2(q), v2(n))).collect();
    let mut cands: Vec<Vector2<f64>> = bnd.iter().map(|(q, _)| *q).collect();
    let cap_dirs: Vec<Vector2<f64>> = sphere_directions(2, eta, spacing)?.iter().map(v2).collect();
    for seg in segments {
        let inward = Vector2::new(-seg.direction.y, seg.direction.x);
        for q in segment_points(seg, spacing) {
            cands.push(q + inward * eta);
        }
        for end in [seg.start, seg.end] {
            for u in &cap_dirs {
                cands.push(end + u * eta);
            }
        }
    }
    let cands: Vec<Vector2<f64>> = cands.into_iter().filter(|w| domain.contains(&dv(w))).collect();
    let circle: Vec<Vector2<f64>> = sphere_directions(2, eps, spacing)?.iter().map(v2).collect();
    let inner = eta * (1.0 - 1e-9);
    let parts: Vec<(f64, [f64; 4])> = bnd
        .par_iter()
        .map(|(y, nu)| {
            let tubes: Vec<&BoundarySegment> = segments.iter().filter(|s| s.distance_to(y) <= eta).collect();
            let mut best = (f64::INFINITY, [0.0; 4]);
            let mut visit = |x: &Vector2<f64>| {
                if (x - y).norm() < eps || tubes.iter().any(|s| s.distance_to(x) < inner) {
                    return;
                }
                let v = (x - y).dot(nu);
                if v < best.0 {
                    best = (v, [x.x, x.y, y.x, y.y]);
                }
            };
            for x in &cands {
                visit(x);
            }
            for u in &circle {
                let x = y + u;
                if domain.contains(&dv(&x)) {
                    visit(&x);
                }
            }
            best
        })
        .collect();
    Ok(parts.into_iter().fold((f64::INFINITY, [0.0; 4]), |a, b| if b.0 < a.0 { b } else { a }))
}

fn check_planar_inputs(
    domain: &ConvexDomain,
    epsilon: f64,
    radius: f64,
    sigma: f64,
    spacing: f64,
) -> Result<(), CertificateError> {
    if domain.dimension() != 2 {
        return Err(GeometryError::UnsupportedDimension(domain.dimension()).into());
    }
    if !(sigma > 1.0 && sigma < 2.0) {
        return Err(CertificateError::InvalidParameters(format!("sigma = S/R must lie in (1, 2), got {sigma}")));
    }
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(CertificateError::InvalidParameters(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(CertificateError::InvalidParameters(format!("radius must be positive, got {radius}")));
    }
    if !(spacing > 0.0) {
        return Err(CertificateError::InvalidParameters("grid spacing must be positive".into()));
    }
    Ok(())
}

fn make_poles(domain: &ConvexDomain, eps: f64, radius: f64, center: &[f64; 2]) -> Result<Vec<Pole>, CertificateError> {
    domain.build_poles(eps, radius, &Vector2::new(center[0], center[1])).map_err(|e| match e {
        GeometryError::RadiusTooSmall { radius, required } => CertificateError::RadiusTooSmall { radius, required },
        other => other.into(),
    })
}

fn pole_sup(domain: &ConvexDomain, poles: &[Pole]) -> f64 {
    poles.iter().map(|p| domain.sup_dist(&dv(&p.point))).fold(0.0, f64::max)
}

/// Build the planar certificate: poles on the circle of radius `radius`
/// about `center` (default: the domain's reference center), damping scale
/// `S = sigma R`, tube width `eta` halved from `eps/4` until localization
/// holds, `xi` from [`compute_xi`], and `delta` a safety factor below every
/// bound. Domains without straight pieces of length at least `eps` fall
/// back to [`select_simple_certificate`] with the pole at `center + (R, 0)`.
pub fn build_planar_certificate(
    domain: &ConvexDomain,
    eps: f64,
    radius: f64,
    sigma: f64,
    center: Option<[f64; 2]>,
    spacing: f64,
) -> Result<Certificate, CertificateError> {
    check_planar_inputs(domain, eps, radius, sigma, spacing)?;
    let center = center.unwrap_or_else(|| {
        let c = domain.reference_center();
        [c[0], c[1]]
    });
    let segments = domain.maximal_segments(eps)?;
    if segments.is_empty() {
        if !(radius > domain.diameter()) {
            return Err(CertificateError::RadiusTooSmall { radius, required: domain.diameter() });
        }
        let pole = DVector::from_vec(vec![center[0] + radius, center[1]]);
        return Ok(Certificate::Simple(select_simple_certificate(domain, eps, &pole, spacing)?));
    }
    let poles = make_poles(domain, eps, radius, &center)?;
    let s = sigma * radius;
    let sup = pole_sup(domain, &poles);
    if !(s > sup) {
        return Err(CertificateError::RadiusTooSmall { radius, required: (sup - radius) / (sigma - 1.0) });
    }

    let ratio_scan = scan_parallel_ratios(&segments, &poles, s, eps, spacing);
    if let Some(r) = &ratio_scan {
        if !(r.min_ratio > 1.0) {
            return Err(CertificateError::CriterionRatioFailure {
                ratio: r.min_ratio,
                x: [r.x.x, r.x.y],
                y: [r.y.x, r.y.y],
            });
        }
    }

    let mut eta = eps / 4.0;
    let mut halvings = 0;
    loop {
        let check = localization_check(domain, &segments, &poles, s, eps, eta, spacing)?;
        if check.failures == 0 && tube_factor(eta, eps) > 0.0 {
            break;
        }
        halvings += 1;
        if halvings > MAX_HALVINGS {
            return Err(CertificateError::LocalizationFailure { eta });
        }
        eta /= 2.0;
    }

    let (xi, _) = compute_xi(domain, &segments, eps, eta, spacing)?;
    if !(xi > 0.0) {
        return Err(CertificateError::NoFeasibleDelta { delta: 0.0, worst_margin: -xi });
    }
    let diam = domain.diameter();
    let tail = (diam + radius) * (1.0 + diam / (2.0 * s));
    let bound = (eps / sup)
        .min(eps / (sup + 0.5 * diam))
        .min(xi / tail)
        .min(eps * tube_factor(eta, eps) / tail);
    let mut delta = SAFETY_FACTOR * bound;
    let mut halvings = 0;
    loop {
        let mut cert = PlanarCertificate::from_parts(domain, eps, radius, sigma, center, eta, xi, delta, spacing)?;
        let report = cert.verify(spacing)?;
        if report.pass {
            cert.ratio_scan = ratio_scan;
            cert.report = Some(report);
            return Ok(Certificate::Planar(cert));
        }
        halvings += 1;
        if halvings > MAX_HALVINGS {
            return Err(CertificateError::NoFeasibleDelta { delta, worst_margin: report.worst_margin() });
        }
        delta /= 2.0;
    }
}

// ---------------------------------------------------------------------------
// Path diagnostics

/// Statistics of one window of a recorded path.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowStats {
    pub t_start: f64,
    pub t_end: f64,
    /// Realized quadratic variation of `Phi` per unit time.
    pub phi_qv_rate: f64,
    /// Mean increment of `Phi` per unit time.
    pub phi_drift_rate: f64,
    /// Mean increment per unit time of the normalized `Z` series.
    pub z_drift_rate: Option<f64>,
    /// Window increment of the normalized `Z` series is significantly
    /// positive.
    pub z_drift_flag: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathDiagnostics {
    pub windows: Vec<WindowStats>,
    pub floor: f64,
    pub below_floor: usize,
    pub drift_flags: usize,
}

impl PathDiagnostics {
    /// Fraction of windows with realized volatility rate at least `a`.
    pub fn fraction_above_floor(&self) -> f64 {
        if self.windows.is_empty() {
            return 1.0;
        }
        1.0 - self.below_floor as f64 / self.windows.len() as f64
    }
}

/// Windowed realized volatility and drift of `Phi` (and of the normalized
/// `Z` series when present) over complete windows of `window` samples. All
/// recorded samples precede the exit time, which is the last sample.
pub fn path_drift_volatility(
    cert: &dyn LyapunovCertificate,
    traj: &CoupledTrajectory,
    window: usize,
) -> Result<PathDiagnostics, CertificateError> {
    if window < 2 {
        return Err(CertificateError::WindowTooShort { window, min: 2 });
    }
    let series = traj.certificate.as_ref().ok_or(CertificateError::MissingCertificateSeries)?;
    let phi = &series.phi;
    let zhat = (series.zhat.len() == phi.len()).then_some(&series.zhat);
    let floor = cert.volatility_floor();
    let mut out = PathDiagnostics { windows: Vec::new(), floor, below_floor: 0, drift_flags: 0 };
    let n = phi.len();
    if n < 2 {
        return Ok(out);
    }
    let mut start = 0;
    while start + window < n {
        let end = start + window;
        let dt = traj.t[end] - traj.t[start];
        let mut qv = 0.0;
        for k in start..end {
            qv += (phi[k + 1] - phi[k]).powi(2);
        }
        let (z_rate, flag) = match zhat {
            Some(z) => {
                let incs: Vec<f64> = (start..end).map(|k| z[k + 1] - z[k]).collect();
                let m = incs.iter().sum::<f64>() / incs.len() as f64;
                let var = incs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (incs.len() - 1) as f64;
                let se = (var / incs.len() as f64).sqrt();
                (Some((z[end] - z[start]) / dt), m - DRIFT_FLAG_Z * se > 0.0)
            }
            None => (None, false),
        };
        let w = WindowStats {
            t_start: traj.t[start],
            t_end: traj.t[end],
            phi_qv_rate: qv / dt,
            phi_drift_rate: (phi[end] - phi[start]) / dt,
            z_drift_rate: z_rate,
            z_drift_flag: flag,
        };
        if w.phi_qv_rate < floor {
            out.below_floor += 1;
        }
        if flag {
            out.drift_flags += 1;
        }
        out.windows.push(w);
        start = end;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{CertificateSeries, StopReason};
    use approx::assert_relative_eq;

    fn v(c: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(c)
    }

    #[test]
    fn v_examples() {
        let p = v(&[-2.0, 0.0]);
        let (x, y) = (v(&[1.0, 0.0]), v(&[0.0, 0.0]));
        assert_relative_eq!(eval_v(&p, 0.1, &x, &y), 0.75, epsilon = 1e-15);
        assert_relative_eq!(eval_v_inner(&p, 0.1, &x, &y), 0.75, epsilon = 1e-15);
        assert_eq!(eval_v(&p, 0.3, &x, &x), 0.0);
        let z = v(&[0.3, -0.7]);
        assert_relative_eq!(eval_v(&p, 0.2, &x, &z) + eval_v(&p, 0.2, &z, &x), (&x - &z).norm_squared(), epsilon = 1e-14);
    }

    #[test]
    fn vtilde_examples() {
        let p = v(&[-2.0, 0.0]);
        let (x, y) = (v(&[1.0, 0.0]), v(&[0.0, 0.0]));
        assert_relative_eq!(kappa(&p, 0.1, 5.0, &x, &y), 0.1 * (-0.5f64).exp(), epsilon = 1e-15);
        assert_relative_eq!(eval_vtilde(&p, 0.1, 5.0, &x, &y), 0.651633, epsilon = 1e-6);
        assert_relative_eq!(eval_vtilde_norms(&p, 0.1, 5.0, &x, &y), 0.651633, epsilon = 1e-6);
        assert_relative_eq!(eval_vtilde(&p, 0.1, 1e12, &x, &y), eval_v(&p, 0.1, &x, &y), epsilon = 1e-10);
        assert_eq!(eval_vtilde(&p, 0.1, 5.0, &y, &y), 0.0);
    }

    #[test]
    fn psi_examples() {
        assert_eq!(eval_psi(3.0, 10.0, 0.0).value, 0.0);
        assert_eq!(eval_psi(3.0, 10.0, 0.0).log_value, f64::NEG_INFINITY);
        let big = eval_psi(3.0, 10.0, 100.0);
        assert_relative_eq!(big.value, 3f64.exp(), max_relative = 1e-12);
        assert!(!big.saturated);
        let huge = eval_psi(1e6, 1e6, 1.0);
        assert!(huge.saturated && huge.value == f64::MAX);
        assert_relative_eq!(huge.log_value, 1e6, max_relative = 1e-12);
        let mut prev = f64::NEG_INFINITY;
        for k in 1..50 {
            let v = eval_psi(2.0, 7.0, k as f64 * 0.01).value;
            assert!(v > prev);
            prev = v;
        }
        assert!(eval_psi(0.0, 1.0, -1.0).value < 0.0);
        assert!(eval_psi(0.0, 1.0, -1.0).log_value.is_nan());
    }

    #[test]
    fn lemma_constants_satisfy_inequalities() {
        let c = LemmaConstants::new(4.938e-4, 2, 3.0);
        assert_eq!(c.b, 4.0);
        assert!(c.lambda > 2.0 * c.b / c.a);
        assert!(c.log_c > c.log_c_threshold());
    }

    #[test]
    fn simple_floor_examples() {
        let a = simple_volatility_floor(1.0, 0.1, 2.0, 3.0).unwrap();
        assert_relative_eq!(a, (0.1f64 / 4.5).powi(2), max_relative = 1e-12);
        assert_relative_eq!(a, 4.938e-4, max_relative = 1e-3);
        let a1 = simple_volatility_floor(1.0, 1e-4, 2.0, 3.0).unwrap();
        let a2 = simple_volatility_floor(1.0, 5e-5, 2.0, 3.0).unwrap();
        assert_relative_eq!(a1 / a2, 4.0, max_relative = 1e-3);
        assert!(matches!(simple_volatility_floor(1.0, 0.2, 2.0, 3.0), Err(CertificateError::DeltaTooLarge { .. })));
    }

    #[test]
    fn disc_certificate_selected_and_reverified() {
        let d = ConvexDomain::unit_disc();
        let p = v(&[2.0, 0.0]);
        let c = select_simple_certificate(&d, 0.5, &p, 0.02).unwrap();
        assert!(c.delta < c.delta_cap());
        assert!(c.report.as_ref().unwrap().pass);
        assert_eq!(c.constants.b, 4.0);
        assert!(c.verify(0.01).unwrap().pass);
    }

    #[test]
    fn square_has_no_simple_certificate() {
        let d = ConvexDomain::square(-1.0, 1.0).unwrap();
        let p = v(&[3.0, 0.5]);
        assert!(matches!(select_simple_certificate(&d, 0.5, &p, 0.05), Err(CertificateError::NoFeasibleDelta { .. })));
    }

    #[test]
    fn huge_epsilon_is_vacuous() {
        let d = ConvexDomain::unit_disc();
        let c = SimpleCertificate::from_parts(&d, v(&[2.0, 0.0]), 0.1, 5.0, 0.05).unwrap();
        let r = c.verify(0.05).unwrap();
        assert!(r.pass);
        assert!(r.entries.iter().all(|e| e.worst_margin == f64::NEG_INFINITY));
    }

    #[test]
    fn planar_rejects_sigma_outside_range() {
        let d = ConvexDomain::square(-1.0, 1.0).unwrap();
        assert!(matches!(
            build_planar_certificate(&d, 0.5, 100.0, 2.5, None, 0.05),
            Err(CertificateError::InvalidParameters(_))
        ));
    }

    #[test]
    fn planar_disc_falls_back_to_simple() {
        let d = ConvexDomain::unit_disc();
        let c = build_planar_certificate(&d, 0.5, 10.0, 1.5, None, 0.05).unwrap();
        assert!(matches!(c, Certificate::Simple(_)));
    }

    #[test]
    fn criterion_ratio_self_is_one() {
        let d = ConvexDomain::square(-1.0, 1.0).unwrap();
        let poles = d.build_poles(0.5, 100.0, &Vector2::zeros()).unwrap();
        let (x, y) = (Vector2::new(0.5, -1.0), Vector2::new(-0.5, -1.0));
        assert_eq!(criterion_ratio_raw(&poles, 150.0, &x, &y, 3, 3).unwrap(), 1.0);
    }

    #[test]
    fn synchronous_path_has_zero_volatility() {
        let d = ConvexDomain::unit_disc();
        let c = SimpleCertificate::from_parts(&d, v(&[2.0, 0.0]), 0.05, 0.5, 0.05).unwrap();
        let n = 41;
        let traj = CoupledTrajectory {
            dim: 2,
            t: (0..n).map(|k| k as f64 * 1e-3).collect(),
            x: vec![0.1; 2 * n],
            y: vec![0.1; 2 * n],
            lx: vec![0.0; n],
            ly: vec![0.0; n],
            dist: vec![0.0; n],
            certificate: Some(CertificateSeries { phi: vec![0.0; n], log_psi: vec![f64::NEG_INFINITY; n], zhat: vec![0.0; n] }),
            h: 1e-3,
            record_stride: 1,
            seed: 0,
            replica: 0,
            strategy: "synchronous".into(),
            epsilon: 0.0,
            stop_reason: StopReason::TimeHorizon,
            coupling_time: None,
        };
        let diag = path_drift_volatility(&c, &traj, 10).unwrap();
        assert_eq!(diag.windows.len(), 4);
        assert!(diag.windows.iter().all(|w| w.phi_qv_rate == 0.0));
        assert!(matches!(path_drift_volatility(&c, &traj, 1), Err(CertificateError::WindowTooShort { .. })));
    }
}
