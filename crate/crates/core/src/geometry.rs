//! Bounded convex domains and the geometric primitives consumed by the
//! reflected dynamics and by the Lyapunov certificates.
//!
//! Supported shapes:
//! - convex polygons (counterclockwise vertex list, planar),
//! - Euclidean balls in any dimension `n >= 2`,
//! - ellipses and superellipses `|u/a|^q + |v/b|^q <= 1` with `q >= 2`.
//!
//! Smooth planar shapes are handled through their support map: the boundary
//! point with outward normal `(cos t, sin t)` has a closed form, which gives
//! exact normals for boundary sampling and a one-dimensional root-finding
//! problem for Euclidean projection.
//!
//! A point is treated as lying on the boundary when it is within
//! `1e-9 * diameter` of it.

use nalgebra::{DVector, Vector2};
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};
use thiserror::Error;

/// Relative boundary tolerance (multiplied by the diameter).
pub const BOUNDARY_TOL: f64 = 1e-9;

/// Dense angular scan used to bracket one-dimensional optimizations on
/// smooth boundaries.
const SMOOTH_SCAN: usize = 720;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),
    #[error("point is not on the boundary (distance {distance:.3e} exceeds tolerance {tolerance:.3e})")]
    NotOnBoundary { distance: f64, tolerance: f64 },
    #[error("operation requires a planar domain, got dimension {0}")]
    UnsupportedDimension(usize),
    #[error("dimension mismatch: domain has dimension {expected}, point has {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("circle radius {radius} too small: need R > diam(D) csc(phi) = {required}")]
    RadiusTooSmall { radius: f64, required: f64 },
    #[error("circle center is not interior to the domain")]
    CenterNotInterior,
}

/// Shape parameters of a [`ConvexDomain`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DomainShape {
    Polygon { vertices: Vec<[f64; 2]> },
    Ball { center: Vec<f64>, radius: f64 },
    Ellipse { center: [f64; 2], semi_axes: [f64; 2] },
    Superellipse { center: [f64; 2], semi_axes: [f64; 2], exponent: f64 },
}

/// Inward-pointing normal data at a boundary point.
///
/// A smooth point or the interior of a polygon edge has one generator; a
/// polygon corner has the two adjacent edge normals, and the cone is their
/// nonnegative hull.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalCone {
    pub point: DVector<f64>,
    pub generators: Vec<DVector<f64>>,
}

impl NormalCone {
    pub fn is_corner(&self) -> bool {
        self.generators.len() > 1
    }
}

/// A maximal straight piece of the boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundarySegment {
    pub start: Vector2<f64>,
    pub end: Vector2<f64>,
    pub length: f64,
    /// Unit direction from `start` to `end` (counterclockwise orientation).
    pub direction: Vector2<f64>,
}

impl BoundarySegment {
    /// Point on the segment nearest to `z`.
    pub fn nearest_point(&self, z: &Vector2<f64>) -> Vector2<f64> {
        let t = (z - self.start).dot(&self.direction).clamp(0.0, self.length);
        self.start + self.direction * t
    }

    pub fn distance_to(&self, z: &Vector2<f64>) -> f64 {
        (z - self.nearest_point(z)).norm()
    }

    /// Angle of the supporting line, reduced modulo pi.
    pub fn line_angle(&self) -> f64 {
        self.direction.y.atan2(self.direction.x).rem_euclid(PI)
    }
}

/// Which end of the extended segment line a pole sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoleSign {
    /// Ahead of the segment along its counterclockwise direction.
    Plus,
    /// Behind the segment.
    Minus,
}

/// Intersection of an extended boundary segment with the pole circle.
#[derive(Debug, Clone, PartialEq)]
pub struct Pole {
    pub point: Vector2<f64>,
    pub segment: usize,
    pub sign: PoleSign,
}

/// A bounded convex region with nonempty interior. Immutable after
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexDomain {
    shape: DomainShape,
    diameter: f64,
}

impl ConvexDomain {
    pub fn new(shape: DomainShape) -> Result<Self, GeometryError> {
        validate_shape(&shape)?;
        let diameter = compute_diameter(&shape);
        if !(diameter.is_finite() && diameter > 0.0) {
            return Err(GeometryError::InvalidDomain("degenerate diameter".into()));
        }
        Ok(Self { shape, diameter })
    }

    pub fn polygon(vertices: &[[f64; 2]]) -> Result<Self, GeometryError> {
        Self::new(DomainShape::Polygon { vertices: vertices.to_vec() })
    }

    pub fn ball(center: &[f64], radius: f64) -> Result<Self, GeometryError> {
        Self::new(DomainShape::Ball { center: center.to_vec(), radius })
    }

    pub fn disc(center: [f64; 2], radius: f64) -> Result<Self, GeometryError> {
        Self::ball(&center, radius)
    }

    pub fn unit_disc() -> Self {
        Self::disc([0.0, 0.0], 1.0).expect("unit disc is valid")
    }

    pub fn ellipse(center: [f64; 2], semi_axes: [f64; 2]) -> Result<Self, GeometryError> {
        Self::new(DomainShape::Ellipse { center, semi_axes })
    }

    pub fn superellipse(
        center: [f64; 2],
        semi_axes: [f64; 2],
        exponent: f64,
    ) -> Result<Self, GeometryError> {
        Self::new(DomainShape::Superellipse { center, semi_axes, exponent })
    }

    /// Axis-aligned square `[lo, hi]^2`.
    pub fn square(lo: f64, hi: f64) -> Result<Self, GeometryError> {
        Self::polygon(&[[lo, lo], [hi, lo], [hi, hi], [lo, hi]])
    }

    /// Regular polygon with `sides` sides of length `side`, centered at the origin.
    pub fn regular_polygon(sides: usize, side: f64) -> Result<Self, GeometryError> {
        if sides < 3 {
            return Err(GeometryError::InvalidDomain("need at least 3 sides".into()));
        }
        let circumradius = side / (2.0 * (PI / sides as f64).sin());
        let vertices: Vec<[f64; 2]> = (0..sides)
            .map(|k| {
                let t = TAU * k as f64 / sides as f64;
                [circumradius * t.cos(), circumradius * t.sin()]
            })
            .collect();
        Self::polygon(&vertices)
    }

    pub fn shape(&self) -> &DomainShape {
        &self.shape
    }

    pub fn dimension(&self) -> usize {
        match &self.shape {
            DomainShape::Ball { center, .. } => center.len(),
            _ => 2,
        }
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    /// Absolute tolerance for "on the boundary".
    pub fn boundary_tolerance(&self) -> f64 {
        BOUNDARY_TOL * self.diameter
    }

    /// A canonical interior point: vertex centroid for polygons, the
    /// center otherwise.
    pub fn reference_center(&self) -> DVector<f64> {
        match &self.shape {
            DomainShape::Polygon { vertices } => {
                let m = vertices.len() as f64;
                let (sx, sy) = vertices.iter().fold((0.0, 0.0), |(a, b), v| (a + v[0], b + v[1]));
                DVector::from_vec(vec![sx / m, sy / m])
            }
            DomainShape::Ball { center, .. } => DVector::from_column_slice(center),
            DomainShape::Ellipse { center, .. } | DomainShape::Superellipse { center, .. } => {
                DVector::from_column_slice(center)
            }
        }
    }

    fn check_dim(&self, z: &DVector<f64>) -> Result<(), GeometryError> {
        if z.len() != self.dimension() {
            return Err(GeometryError::DimensionMismatch { expected: self.dimension(), got: z.len() });
        }
        Ok(())
    }

    /// Whether `z` lies in the closed domain, up to a relative slack of
    /// `1e-12` that absorbs rounding in [`project`](Self::project).
    pub fn contains(&self, z: &DVector<f64>) -> bool {
        let slack = 1e-12 * self.diameter;
        match &self.shape {
            DomainShape::Polygon { vertices } => {
                let p = to_v2(z);
                edges(vertices).all(|(a, b)| inward_edge_normal(&a, &b).dot(&(p - a)) >= -slack)
            }
            DomainShape::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                (z - c).norm() <= *radius + slack
            }
            _ => {
                let s = SmoothShape::from_shape(&self.shape);
                s.level(&to_v2(z)) <= 1.0 + 1e-12
            }
        }
    }

    /// Euclidean projection onto the closed domain. Points already inside
    /// are returned unchanged.
    pub fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut out = z.clone();
        self.project_into(z, &mut out);
        out
    }

    /// Allocation-free variant of [`project`](Self::project); `out` must
    /// have the domain's dimension.
    pub fn project_into(&self, z: &DVector<f64>, out: &mut DVector<f64>) {
        match &self.shape {
            DomainShape::Ball { center, radius } => {
                let mut r2 = 0.0;
                for (zi, ci) in z.iter().zip(center) {
                    r2 += (zi - ci) * (zi - ci);
                }
                let r = r2.sqrt();
                if r <= *radius {
                    out.copy_from(z);
                } else {
                    let scale = radius / r;
                    for i in 0..center.len() {
                        out[i] = center[i] + (z[i] - center[i]) * scale;
                    }
                }
            }
            DomainShape::Polygon { vertices } => {
                let p = to_v2(z);
                let q = project_polygon(vertices, &p);
                out[0] = q.x;
                out[1] = q.y;
            }
            _ => {
                let s = SmoothShape::from_shape(&self.shape);
                let q = s.project(&to_v2(z));
                out[0] = q.x;
                out[1] = q.y;
            }
        }
    }

    /// Distance from `z` to the boundary (for points on either side).
    pub fn distance_to_boundary(&self, z: &DVector<f64>) -> f64 {
        if !self.contains(z) {
            return (z - self.project(z)).norm();
        }
        match &self.shape {
            DomainShape::Ball { center, radius } => {
                radius - (z - DVector::from_column_slice(center)).norm()
            }
            DomainShape::Polygon { vertices } => {
                let p = to_v2(z);
                edges(vertices)
                    .map(|(a, b)| inward_edge_normal(&a, &b).dot(&(p - a)))
                    .fold(f64::INFINITY, f64::min)
            }
            _ => SmoothShape::from_shape(&self.shape).interior_depth(&to_v2(z)),
        }
    }

    /// Inward normal cone at a boundary point.
    pub fn inward_normals(&self, y: &DVector<f64>) -> Result<NormalCone, GeometryError> {
        self.check_dim(y)?;
        let tol = self.boundary_tolerance();
        let distance = self.distance_to_boundary(y);
        if distance > tol {
            return Err(GeometryError::NotOnBoundary { distance, tolerance: tol });
        }
        let generators = match &self.shape {
            DomainShape::Ball { center, .. } => {
                let c = DVector::from_column_slice(center);
                let d = &c - y;
                vec![&d / d.norm()]
            }
            DomainShape::Polygon { vertices } => {
                let p = to_v2(y);
                let near: Vec<Vector2<f64>> = edges(vertices)
                    .filter(|(a, b)| point_segment_distance(&p, a, b) <= tol)
                    .map(|(a, b)| inward_edge_normal(&a, &b))
                    .collect();
                near.into_iter().map(|v| from_v2(&v)).collect()
            }
            _ => {
                let s = SmoothShape::from_shape(&self.shape);
                vec![from_v2(&s.inward_normal_at(&to_v2(y)))]
            }
        };
        Ok(NormalCone { point: y.clone(), generators })
    }

    /// Maximal straight boundary pieces of length at least `min_length`.
    pub fn maximal_segments(&self, min_length: f64) -> Result<Vec<BoundarySegment>, GeometryError> {
        if self.dimension() != 2 {
            return Err(GeometryError::UnsupportedDimension(self.dimension()));
        }
        match &self.shape {
            DomainShape::Polygon { vertices } => Ok(edges(vertices)
                .map(|(a, b)| {
                    let length = (b - a).norm();
                    BoundarySegment { start: a, end: b, length, direction: (b - a) / length }
                })
                .filter(|s| s.length >= min_length)
                .collect()),
            _ => Ok(Vec::new()),
        }
    }

    /// `sup { |p - w| : w in closure(D) }`.
    pub fn sup_dist(&self, p: &DVector<f64>) -> f64 {
        match &self.shape {
            DomainShape::Ball { center, radius } => {
                (p - DVector::from_column_slice(center)).norm() + radius
            }
            DomainShape::Polygon { vertices } => {
                let q = to_v2(p);
                vertices
                    .iter()
                    .map(|v| (Vector2::new(v[0], v[1]) - q).norm())
                    .fold(0.0, f64::max)
            }
            _ => {
                let s = SmoothShape::from_shape(&self.shape);
                let q = to_v2(p);
                maximize_periodic(|t| (s.support_point(t) - q).norm())
            }
        }
    }

    /// Boundary samples with spacing at most `spacing`, each paired with an
    /// inward unit normal. Polygon corners appear once per adjacent edge
    /// normal, so that every cone generator is represented.
    pub fn boundary_samples(&self, spacing: f64) -> Result<Vec<(DVector<f64>, DVector<f64>)>, GeometryError> {
        if !(spacing > 0.0) {
            return Err(GeometryError::InvalidDomain("sample spacing must be positive".into()));
        }
        match &self.shape {
            DomainShape::Polygon { vertices } => {
                let mut out = Vec::new();
                for (a, b) in edges(vertices) {
                    let nrm = from_v2(&inward_edge_normal(&a, &b));
                    let len = (b - a).norm();
                    let k = (len / spacing).ceil().max(1.0) as usize;
                    for j in 0..=k {
                        let t = j as f64 / k as f64;
                        out.push((from_v2(&(a + (b - a) * t)), nrm.clone()));
                    }
                }
                Ok(out)
            }
            DomainShape::Ball { center, radius } => {
                let c = DVector::from_column_slice(center);
                let dirs = sphere_directions(center.len(), *radius, spacing)?;
                Ok(dirs.into_iter().map(|u| (&c + &u * *radius, -u)).collect())
            }
            _ => {
                let s = SmoothShape::from_shape(&self.shape);
                Ok(s.boundary_samples(spacing)
                    .into_iter()
                    .map(|(p, n)| (from_v2(&p), from_v2(&n)))
                    .collect())
            }
        }
    }

    /// Points of the closed domain on a uniform grid of the given spacing
    /// (planar domains and balls of dimension at most 3).
    pub fn interior_grid(&self, spacing: f64) -> Result<Vec<DVector<f64>>, GeometryError> {
        let n = self.dimension();
        if n > 3 {
            return Err(GeometryError::UnsupportedDimension(n));
        }
        let (lo, hi) = self.bounding_box();
        let counts: Vec<usize> = (0..n).map(|i| ((hi[i] - lo[i]) / spacing).ceil() as usize + 1).collect();
        let mut out = Vec::new();
        let mut idx = vec![0usize; n];
        loop {
            let z = DVector::from_iterator(n, (0..n).map(|i| (lo[i] + idx[i] as f64 * spacing).min(hi[i])));
            if self.contains(&z) {
                out.push(z);
            }
            let mut k = 0;
            loop {
                if k == n {
                    return Ok(out);
                }
                idx[k] += 1;
                if idx[k] < counts[k] {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }

    pub fn bounding_box(&self) -> (Vec<f64>, Vec<f64>) {
        match &self.shape {
            DomainShape::Polygon { vertices } => {
                let mut lo = vec![f64::INFINITY; 2];
                let mut hi = vec![f64::NEG_INFINITY; 2];
                for v in vertices {
                    for i in 0..2 {
                        lo[i] = lo[i].min(v[i]);
                        hi[i] = hi[i].max(v[i]);
                    }
                }
                (lo, hi)
            }
            DomainShape::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            DomainShape::Ellipse { center, semi_axes }
            | DomainShape::Superellipse { center, semi_axes, .. } => (
                vec![center[0] - semi_axes[0], center[1] - semi_axes[1]],
                vec![center[0] + semi_axes[0], center[1] + semi_axes[1]],
            ),
        }
    }

    /// Poles for the planar certificate: intersections of each maximal
    /// segment line (segments of length at least `epsilon`) with the circle
    /// of radius `radius` about `center`.
    ///
    /// Requires `radius > diam(D) csc(phi)` where `3 phi` is the smallest
    /// nonzero angle (mod pi) between segment lines.
    pub fn build_poles(
        &self,
        epsilon: f64,
        radius: f64,
        center: &Vector2<f64>,
    ) -> Result<Vec<Pole>, GeometryError> {
        let segments = self.maximal_segments(epsilon)?;
        if !self.contains(&from_v2(center)) || self.distance_to_boundary(&from_v2(center)) <= self.boundary_tolerance() {
            return Err(GeometryError::CenterNotInterior);
        }
        let required = self.pole_radius_bound(&segments);
        if !(radius > required) {
            return Err(GeometryError::RadiusTooSmall { radius, required });
        }
        let mut poles = Vec::with_capacity(2 * segments.len());
        for (i, seg) in segments.iter().enumerate() {
            let w = seg.start - center;
            let b = w.dot(&seg.direction);
            let disc = b * b - w.norm_squared() + radius * radius;
            // radius > diam guarantees two real intersections
            let root = disc.max(0.0).sqrt();
            poles.push(Pole { point: seg.start + seg.direction * (-b + root), segment: i, sign: PoleSign::Plus });
            poles.push(Pole { point: seg.start + seg.direction * (-b - root), segment: i, sign: PoleSign::Minus });
        }
        Ok(poles)
    }

    /// `diam(D) csc(phi)` for the given segment set (the lower bound on the
    /// pole-circle radius). With no pair of non-parallel lines, only
    /// `R > diam(D)` is required.
    pub fn pole_radius_bound(&self, segments: &[BoundarySegment]) -> f64 {
        match min_nonzero_line_angle(segments) {
            Some(three_phi) => self.diameter / (three_phi / 3.0).sin(),
            None => self.diameter,
        }
    }
}

/// Smallest nonzero angle, modulo pi, between the supporting lines.
pub fn min_nonzero_line_angle(segments: &[BoundarySegment]) -> Option<f64> {
    let mut best: Option<f64> = None;
    for i in 0..segments.len() {
        for j in (i + 1)..segments.len() {
            let d = (segments[i].line_angle() - segments[j].line_angle()).abs() % PI;
            let d = d.min(PI - d);
            if d > 1e-12 {
                best = Some(best.map_or(d, |b: f64| b.min(d)));
            }
        }
    }
    best
}

pub(crate) fn to_v2(z: &DVector<f64>) -> Vector2<f64> {
    Vector2::new(z[0], z[1])
}

pub(crate) fn from_v2(v: &Vector2<f64>) -> DVector<f64> {
    DVector::from_vec(vec![v.x, v.y])
}

fn edges(vertices: &[[f64; 2]]) -> impl Iterator<Item = (Vector2<f64>, Vector2<f64>)> + '_ {
    let m = vertices.len();
    (0..m).map(move |i| {
        let a = vertices[i];
        let b = vertices[(i + 1) % m];
        (Vector2::new(a[0], a[1]), Vector2::new(b[0], b[1]))
    })
}

/// Inward unit normal of a counterclockwise edge.
fn inward_edge_normal(a: &Vector2<f64>, b: &Vector2<f64>) -> Vector2<f64> {
    let d = b - a;
    Vector2::new(-d.y, d.x) / d.norm()
}

fn point_segment_distance(p: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>) -> f64 {
    let d = b - a;
    let t = ((p - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
    (p - (a + d * t)).norm()
}

fn project_polygon(vertices: &[[f64; 2]], p: &Vector2<f64>) -> Vector2<f64> {
    if edges(vertices).all(|(a, b)| inward_edge_normal(&a, &b).dot(&(p - a)) >= 0.0) {
        return *p;
    }
    let mut best = *p;
    let mut best_d = f64::INFINITY;
    for (a, b) in edges(vertices) {
        let d = b - a;
        let t = ((p - a).dot(&d) / d.norm_squared()).clamp(0.0, 1.0);
        let q = a + d * t;
        let dq = (p - q).norm_squared();
        if dq < best_d {
            best_d = dq;
            best = q;
        }
    }
    best
}

fn validate_shape(shape: &DomainShape) -> Result<(), GeometryError> {
    let bad = |m: &str| Err(GeometryError::InvalidDomain(m.to_string()));
    match shape {
        DomainShape::Polygon { vertices } => {
            if vertices.len() < 3 {
                return bad("polygon needs at least 3 vertices");
            }
            if vertices.iter().flatten().any(|c| !c.is_finite()) {
                return bad("non-finite vertex coordinate");
            }
            let m = vertices.len();
            let scale = vertices
                .iter()
                .flat_map(|a| vertices.iter().map(move |b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()))
                .fold(0.0, f64::max);
            let mut turning = 0.0;
            for i in 0..m {
                let a = Vector2::new(vertices[i][0], vertices[i][1]);
                let b = Vector2::new(vertices[(i + 1) % m][0], vertices[(i + 1) % m][1]);
                let c = Vector2::new(vertices[(i + 2) % m][0], vertices[(i + 2) % m][1]);
                let (u, v) = (b - a, c - b);
                if u.norm() <= 1e-12 * scale {
                    return bad("repeated vertex");
                }
                let cross = u.x * v.y - u.y * v.x;
                if cross <= 1e-12 * scale * scale {
                    return bad("vertices must be in strictly convex counterclockwise position (collinear or reflex triple found)");
                }
                turning += cross.atan2(u.dot(&v));
            }
            if (turning - TAU).abs() > 1e-6 {
                return bad("vertex list winds more than once");
            }
            Ok(())
        }
        DomainShape::Ball { center, radius } => {
            if center.len() < 2 {
                return bad("ball dimension must be at least 2");
            }
            if !(radius.is_finite() && *radius > 0.0) || center.iter().any(|c| !c.is_finite()) {
                return bad("ball needs a finite center and positive radius");
            }
            Ok(())
        }
        DomainShape::Ellipse { center, semi_axes } => {
            if !(semi_axes[0] > 0.0 && semi_axes[1] > 0.0) || semi_axes.iter().chain(center).any(|c| !c.is_finite()) {
                return bad("ellipse semi-axes must be positive");
            }
            Ok(())
        }
        DomainShape::Superellipse { center, semi_axes, exponent } => {
            if !(semi_axes[0] > 0.0 && semi_axes[1] > 0.0) || semi_axes.iter().chain(center).any(|c| !c.is_finite()) {
                return bad("superellipse semi-axes must be positive");
            }
            if !(exponent.is_finite() && *exponent >= 2.0) {
                return bad("superellipse exponent must be finite and >= 2");
            }
            Ok(())
        }
    }
}

fn compute_diameter(shape: &DomainShape) -> f64 {
    match shape {
        DomainShape::Polygon { vertices } => {
            let mut d: f64 = 0.0;
            for a in vertices {
                for b in vertices {
                    d = d.max(((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt());
                }
            }
            d
        }
        DomainShape::Ball { radius, .. } => 2.0 * radius,
        DomainShape::Ellipse { semi_axes, .. } => 2.0 * semi_axes[0].max(semi_axes[1]),
        DomainShape::Superellipse { .. } => {
            // centrally symmetric: diameter is twice the largest radius
            let s = SmoothShape::from_shape(shape);
            let c = s.center;
            2.0 * maximize_periodic(|t| (s.support_point(t) - c).norm())
        }
    }
}

/// Unit directions covering the sphere of the given radius with roughly the
/// requested spacing (circle in 2D, Fibonacci lattice in 3D).
pub(crate) fn sphere_directions(n: usize, radius: f64, spacing: f64) -> Result<Vec<DVector<f64>>, GeometryError> {
    match n {
        2 => {
            let k = ((TAU * radius) / spacing).ceil().max(8.0) as usize;
            Ok((0..k)
                .map(|j| {
                    let t = TAU * j as f64 / k as f64;
                    DVector::from_vec(vec![t.cos(), t.sin()])
                })
                .collect())
        }
        3 => {
            let area = 4.0 * PI * radius * radius;
            let k = (area / (spacing * spacing)).ceil().max(32.0) as usize;
            let golden = PI * (3.0 - 5f64.sqrt());
            Ok((0..k)
                .map(|j| {
                    let z = 1.0 - 2.0 * (j as f64 + 0.5) / k as f64;
                    let r = (1.0 - z * z).sqrt();
                    let t = golden * j as f64;
                    DVector::from_vec(vec![r * t.cos(), r * t.sin(), z])
                })
                .collect())
        }
        _ => Err(GeometryError::UnsupportedDimension(n)),
    }
}

/// Maximize a smooth 2pi-periodic function by dense scan plus golden-section
/// refinement around the best sample.
fn maximize_periodic(f: impl Fn(f64) -> f64) -> f64 {
    let step = TAU / SMOOTH_SCAN as f64;
    let (mut best_t, mut best) = (0.0, f64::NEG_INFINITY);
    for k in 0..SMOOTH_SCAN {
        let t = k as f64 * step;
        let v = f(t);
        if v > best {
            best = v;
            best_t = t;
        }
    }
    let t = golden_max(&f, best_t - step, best_t + step);
    f(t).max(best)
}

fn golden_max(f: &impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - g * (hi - lo);
    let mut b = lo + g * (hi - lo);
    let (mut fa, mut fb) = (f(a), f(b));
    for _ in 0..100 {
        if fa > fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - g * (hi - lo);
            fa = f(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + g * (hi - lo);
            fb = f(b);
        }
        if hi - lo < 1e-14 {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Planar smooth convex shape `|u/a|^q + |v/b|^q <= 1` (ellipse when q = 2),
/// handled through its support map.
#[derive(Debug, Clone, Copy)]
struct SmoothShape {
    center: Vector2<f64>,
    a: f64,
    b: f64,
    q: f64,
}

impl SmoothShape {
    fn from_shape(shape: &DomainShape) -> Self {
        match shape {
            DomainShape::Ellipse { center, semi_axes } => Self {
                center: Vector2::new(center[0], center[1]),
                a: semi_axes[0],
                b: semi_axes[1],
                q: 2.0,
            },
            DomainShape::Superellipse { center, semi_axes, exponent } => Self {
                center: Vector2::new(center[0], center[1]),
                a: semi_axes[0],
                b: semi_axes[1],
                q: *exponent,
            },
            _ => unreachable!("not a smooth planar shape"),
        }
    }

    fn level(&self, z: &Vector2<f64>) -> f64 {
        let d = z - self.center;
        (d.x / self.a).abs().powf(self.q) + (d.y / self.b).abs().powf(self.q)
    }

    /// Boundary point with outward normal `(cos t, sin t)`.
    fn support_point(&self, t: f64) -> Vector2<f64> {
        let p = self.q / (self.q - 1.0);
        let alpha = self.a * t.cos();
        let beta = self.b * t.sin();
        let norm_p = (alpha.abs().powf(p) + beta.abs().powf(p)).powf(1.0 / p);
        let s = alpha.signum() * (alpha.abs() / norm_p).powf(p - 1.0);
        let r = beta.signum() * (beta.abs() / norm_p).powf(p - 1.0);
        self.center + Vector2::new(self.a * s, self.b * r)
    }

    fn support_value(&self, t: f64) -> f64 {
        let n = Vector2::new(t.cos(), t.sin());
        n.dot(&self.support_point(t))
    }

    fn inward_normal_at(&self, y: &Vector2<f64>) -> Vector2<f64> {
        let d = y - self.center;
        let (s, r) = (d.x / self.a, d.y / self.b);
        let g = Vector2::new(
            s.signum() * s.abs().powf(self.q - 1.0) / self.a,
            r.signum() * r.abs().powf(self.q - 1.0) / self.b,
        );
        -g / g.norm()
    }

    /// Nearest boundary point: maximize `<n, z> - h(n)` over unit normals;
    /// the maximizer's support point is the projection.
    fn project(&self, z: &Vector2<f64>) -> Vector2<f64> {
        if self.level(z) <= 1.0 + 1e-12 {
            return *z;
        }
        let gap = |t: f64| Vector2::new(t.cos(), t.sin()).dot(z) - self.support_value(t);
        let step = TAU / SMOOTH_SCAN as f64;
        let (mut best_t, mut best) = (0.0, f64::NEG_INFINITY);
        for k in 0..SMOOTH_SCAN {
            let t = k as f64 * step;
            let v = gap(t);
            if v > best {
                best = v;
                best_t = t;
            }
        }
        // derivative of the gap: tangential component of z - y(t)
        let slope = |t: f64| {
            let tangent = Vector2::new(-t.sin(), t.cos());
            tangent.dot(&(z - self.support_point(t)))
        };
        let (mut lo, mut hi) = (best_t - step, best_t + step);
        let t = if slope(lo) > 0.0 && slope(hi) < 0.0 {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if slope(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
                if hi - lo < 1e-15 {
                    break;
                }
            }
            0.5 * (lo + hi)
        } else {
            golden_max(&gap, lo, hi)
        };
        self.support_point(t)
    }

    /// Distance from an interior point to the boundary: `min_n h(n) - <n, z>`.
    fn interior_depth(&self, z: &Vector2<f64>) -> f64 {
        -maximize_periodic(|t| Vector2::new(t.cos(), t.sin()).dot(z) - self.support_value(t))
    }

    fn boundary_samples(&self, spacing: f64) -> Vec<(Vector2<f64>, Vector2<f64>)> {
        // dense support-map sweep, thinned by arc length
        let perimeter_bound = 4.0 * (self.a + self.b);
        let dense = ((perimeter_bound / spacing).ceil() as usize * 8).max(4 * SMOOTH_SCAN);
        let mut out = Vec::new();
        let mut last: Option<Vector2<f64>> = None;
        let first = self.support_point(0.0);
        for k in 0..dense {
            let t = TAU * k as f64 / dense as f64;
            let p = self.support_point(t);
            let keep = last.is_none_or(|l| (p - l).norm() >= spacing * 0.999);
            if keep && (k == 0 || (p - first).norm() >= 0.5 * spacing) {
                out.push((p, -Vector2::new(t.cos(), t.sin())));
                last = Some(p);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn v(c: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(c)
    }

    #[test]
    fn projection_examples() {
        let disc = ConvexDomain::unit_disc();
        assert_relative_eq!(disc.project(&v(&[2.0, 0.0])), v(&[1.0, 0.0]), epsilon = 1e-15);
        let sq = ConvexDomain::square(0.0, 1.0).unwrap();
        assert_relative_eq!(sq.project(&v(&[1.5, 0.5])), v(&[1.0, 0.5]), epsilon = 1e-15);
        assert_relative_eq!(sq.project(&v(&[2.0, 2.0])), v(&[1.0, 1.0]), epsilon = 1e-15);
        let inside = v(&[0.3, 0.7]);
        assert_eq!(sq.project(&inside), inside);
    }

    #[test]
    fn normal_examples() {
        let disc = ConvexDomain::unit_disc();
        let cone = disc.inward_normals(&v(&[1.0, 0.0])).unwrap();
        assert_eq!(cone.generators.len(), 1);
        assert_relative_eq!(cone.generators[0], v(&[-1.0, 0.0]), epsilon = 1e-15);

        let sq = ConvexDomain::square(0.0, 1.0).unwrap();
        let cone = sq.inward_normals(&v(&[0.5, 0.0])).unwrap();
        assert_eq!(cone.generators, vec![v(&[0.0, 1.0])]);
        let corner = sq.inward_normals(&v(&[0.0, 0.0])).unwrap();
        assert!(corner.is_corner());
        assert!(corner.generators.contains(&v(&[1.0, 0.0])));
        assert!(corner.generators.contains(&v(&[0.0, 1.0])));

        assert!(matches!(
            sq.inward_normals(&v(&[0.5, 0.5])),
            Err(GeometryError::NotOnBoundary { .. })
        ));
    }

    #[test]
    fn segment_examples() {
        assert!(ConvexDomain::unit_disc().maximal_segments(0.1).unwrap().is_empty());
        let sq = ConvexDomain::square(0.0, 2.0).unwrap();
        let segs = sq.maximal_segments(0.5).unwrap();
        assert_eq!(segs.len(), 4);
        assert!(segs.iter().all(|s| (s.length - 2.0).abs() < 1e-15));
        let hex = ConvexDomain::regular_polygon(6, 1.0).unwrap();
        assert!(hex.maximal_segments(1.5).unwrap().is_empty());
        assert_eq!(hex.maximal_segments(0.99).unwrap().len(), 6);
        let ball3 = ConvexDomain::ball(&[0.0, 0.0, 0.0], 1.0).unwrap();
        assert_eq!(ball3.maximal_segments(0.1), Err(GeometryError::UnsupportedDimension(3)));
    }

    #[test]
    fn diameter_and_sup_dist() {
        let sq = ConvexDomain::square(0.0, 2.0).unwrap();
        assert_relative_eq!(sq.diameter(), 2.0 * 2f64.sqrt(), epsilon = 1e-15);
        let disc = ConvexDomain::unit_disc();
        assert_relative_eq!(disc.sup_dist(&v(&[2.0, 0.0])), 3.0);
        let ell = ConvexDomain::ellipse([0.0, 0.0], [2.0, 1.0]).unwrap();
        assert_relative_eq!(ell.diameter(), 4.0);
        assert_relative_eq!(ell.sup_dist(&v(&[3.0, 0.0])), 5.0, epsilon = 1e-9);
        // |u|^4 + |v|^4 <= 1 reaches radius 2^(1/4) on the diagonal
        let se = ConvexDomain::superellipse([0.0, 0.0], [1.0, 1.0], 4.0).unwrap();
        assert_relative_eq!(se.diameter(), 2.0 * 2f64.powf(0.25), epsilon = 1e-9);
    }

    #[test]
    fn degenerate_polygons_rejected() {
        let collinear = ConvexDomain::polygon(&[[0.0, 0.0], [1.0, 0.0], [2.0, 0.0], [1.0, 1.0]]);
        assert!(matches!(collinear, Err(GeometryError::InvalidDomain(_))));
        let clockwise = ConvexDomain::polygon(&[[0.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]]);
        assert!(clockwise.is_err());
        let reflex = ConvexDomain::polygon(&[[0.0, 0.0], [2.0, 0.0], [1.0, 0.5], [2.0, 2.0], [0.0, 2.0]]);
        assert!(reflex.is_err());
        assert!(ConvexDomain::ellipse([0.0, 0.0], [1.0, 0.0]).is_err());
        assert!(ConvexDomain::superellipse([0.0, 0.0], [1.0, 1.0], 1.5).is_err());
    }

    #[test]
    fn pole_examples() {
        let sq = ConvexDomain::square(-1.0, 1.0).unwrap();
        let poles = sq.build_poles(0.5, 10.0, &Vector2::zeros()).unwrap();
        assert_eq!(poles.len(), 8);
        let r = 99f64.sqrt();
        // line x = 1 meets the circle at (1, +-sqrt(99)): closed form
        for expect in [Vector2::new(1.0, r), Vector2::new(1.0, -r), Vector2::new(-1.0, r), Vector2::new(r, -1.0)] {
            assert!(
                poles.iter().any(|p| (p.point - expect).norm() < 1e-12),
                "missing pole {expect:?}"
            );
        }
        for p in &poles {
            assert_relative_eq!(p.point.norm(), 10.0, epsilon = 1e-12);
        }
        // phi = pi/6, bound 2 sqrt(2) csc(pi/6) = 4 sqrt(2)
        match sq.build_poles(0.5, 5.0, &Vector2::zeros()) {
            Err(GeometryError::RadiusTooSmall { required, .. }) => {
                assert_relative_eq!(required, 4.0 * 2f64.sqrt(), epsilon = 1e-12)
            }
            other => panic!("expected RadiusTooSmall, got {other:?}"),
        }
        assert!(ConvexDomain::unit_disc().build_poles(0.3, 10.0, &Vector2::zeros()).unwrap().is_empty());
    }

    #[test]
    fn pole_signs_follow_orientation() {
        let sq = ConvexDomain::square(-1.0, 1.0).unwrap();
        let poles = sq.build_poles(0.5, 10.0, &Vector2::zeros()).unwrap();
        let segs = sq.maximal_segments(0.5).unwrap();
        for p in &poles {
            let s = &segs[p.segment];
            let t = (p.point - s.start).dot(&s.direction);
            match p.sign {
                PoleSign::Plus => assert!(t > s.length),
                PoleSign::Minus => assert!(t < 0.0),
            }
        }
    }

    #[test]
    fn smooth_projection_is_nearest() {
        let ell = ConvexDomain::ellipse([0.5, -0.2], [2.0, 1.0]).unwrap();
        let z = v(&[3.0, 2.0]);
        let q = ell.project(&z);
        let best = ell
            .boundary_samples(1e-4)
            .unwrap()
            .into_iter()
            .map(|(b, _)| (b - &z).norm())
            .fold(f64::INFINITY, f64::min);
        assert!((q.clone() - &z).norm() <= best + 1e-9);
        assert!(ell.distance_to_boundary(&q) < 1e-9);
        let cone = ell.inward_normals(&q).unwrap();
        // the displacement is along the outward normal
        let disp = (&z - &q).normalize();
        assert_relative_eq!(disp.dot(&cone.generators[0]), -1.0, epsilon = 1e-7);
    }

    #[test]
    fn boundary_samples_lie_on_boundary() {
        for d in [
            ConvexDomain::unit_disc(),
            ConvexDomain::square(-1.0, 1.0).unwrap(),
            ConvexDomain::ellipse([0.0, 0.0], [1.5, 0.7]).unwrap(),
            ConvexDomain::superellipse([0.0, 0.0], [1.0, 2.0], 4.0).unwrap(),
            ConvexDomain::ball(&[0.0, 0.0, 0.0], 1.0).unwrap(),
        ] {
            let samples = d.boundary_samples(0.05).unwrap();
            assert!(samples.len() > 50);
            for (p, n) in &samples {
                assert!(d.distance_to_boundary(p) <= 1e-8, "{p}");
                assert_relative_eq!(n.norm(), 1.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn interior_grid_points_inside() {
        let d = ConvexDomain::regular_polygon(5, 1.0).unwrap();
        let g = d.interior_grid(0.05).unwrap();
        assert!(g.len() > 100);
        assert!(g.iter().all(|z| d.contains(z)));
    }
}
