//! Projected Euler discretization of reflected Brownian motion and of
//! co-adaptively coupled pairs.
//!
//! One step moves a particle by its Brownian increment and projects the raw
//! position back onto the closed domain. The projection displacement is the
//! discrete boundary push: its length is the local-time increment and its
//! direction is the realized inward normal (at polygon corners this picks a
//! direction inside the normal cone without any arbitrary choice).
//!
//! A coupled pair uses `dX = dB`, `dY = J^T dB + K^T dC` with `(J, K)`
//! evaluated at the left end of each step. Both Gaussian vectors are drawn
//! every step whatever the strategy, so a given seed drives `X` identically
//! under every strategy.

use crate::certificates::LyapunovCertificate;
use crate::geometry::ConvexDomain;
use crate::strategies::{CouplingStrategy, StrategyError};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt;
use std::io::{BufRead, Write};
use thiserror::Error;

/// Residual of `J^T J + K^T K - I` tolerated during simulation.
pub const CONTRACT_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid simulation config: {0}")]
    InvalidConfig(String),
    #[error("strategy contract violated at step {step}: residual {residual:.3e}")]
    StrategyContractViolation { step: usize, residual: f64 },
    #[error("strategy error: {0}")]
    Strategy(#[from] StrategyError),
    #[error("malformed trajectory file: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// A single reflected particle.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleState {
    pub position: DVector<f64>,
    pub local_time: f64,
    pub time: f64,
}

impl ParticleState {
    pub fn new(position: DVector<f64>) -> Self {
        Self { position, local_time: 0.0, time: 0.0 }
    }
}

/// One projected Euler step. Returns the new state; the local time grows by
/// the projection displacement.
pub fn step_reflected(domain: &ConvexDomain, state: &ParticleState, increment: &DVector<f64>, h: f64) -> ParticleState {
    let mut next = state.clone();
    let mut raw = state.position.clone();
    step_in_place(domain, &mut next, increment, h, &mut raw);
    next
}

/// In-place step; `raw` is scratch of the right dimension. Returns the
/// local-time increment.
fn step_in_place(
    domain: &ConvexDomain,
    state: &mut ParticleState,
    increment: &DVector<f64>,
    h: f64,
    raw: &mut DVector<f64>,
) -> f64 {
    raw.copy_from(&state.position);
    *raw += increment;
    domain.project_into(raw, &mut state.position);
    let mut push2 = 0.0;
    for i in 0..raw.len() {
        let d = raw[i] - state.position[i];
        push2 += d * d;
    }
    let push = push2.sqrt();
    state.local_time += push;
    state.time += h;
    push
}

/// Parameters of one coupled run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub x0: DVector<f64>,
    pub y0: DVector<f64>,
    /// Time step.
    pub h: f64,
    /// Time horizon.
    pub horizon: f64,
    /// Coupling distance; the run stops at the first grid time with
    /// `dist <= epsilon`.
    pub epsilon: f64,
    pub seed: u64,
    /// Record every `record_stride`-th step (the final state is always kept).
    pub record_stride: usize,
}

impl SimConfig {
    pub fn validate(&self, domain: &ConvexDomain) -> Result<(), DynamicsError> {
        let bad = |m: String| Err(DynamicsError::InvalidConfig(m));
        let n = domain.dimension();
        if self.x0.len() != n || self.y0.len() != n {
            return bad(format!("start points must have dimension {n}"));
        }
        let outside = |z: &DVector<f64>| (domain.project(z) - z).norm() > domain.boundary_tolerance();
        if outside(&self.x0) || outside(&self.y0) {
            return bad("start points must lie in the closed domain".into());
        }
        if !(self.h > 0.0 && self.h.is_finite()) {
            return bad(format!("step h must be positive, got {}", self.h));
        }
        if !(self.horizon >= 0.0 && self.horizon.is_finite()) {
            return bad(format!("horizon must be nonnegative, got {}", self.horizon));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be nonnegative, got {}", self.epsilon));
        }
        if self.record_stride == 0 {
            return bad("record_stride must be at least 1".into());
        }
        Ok(())
    }

    /// Overshoot allowance for discrete detection: `10 sqrt(h) / epsilon`.
    pub fn detection_tolerance(&self) -> f64 {
        if self.epsilon > 0.0 {
            10.0 * self.h.sqrt() / self.epsilon
        } else {
            0.0
        }
    }

    pub fn steps(&self) -> usize {
        (self.horizon / self.h).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    EpsCoupled,
    TimeHorizon,
    /// The state became non-finite and the pair left the region where the
    /// dynamics are defined.
    ExitOfF,
}

impl StopReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::EpsCoupled => "eps-coupled",
            Self::TimeHorizon => "time-horizon",
            Self::ExitOfF => "exit-of-F",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "eps-coupled" => Some(Self::EpsCoupled),
            "time-horizon" => Some(Self::TimeHorizon),
            "exit-of-F" => Some(Self::ExitOfF),
            _ => None,
        }
    }
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Certificate series recorded alongside a trajectory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CertificateSeries {
    pub phi: Vec<f64>,
    /// Natural log of `Psi`.
    pub log_psi: Vec<f64>,
    /// Cumulative increment of `Z = Psi + t` divided step by step by the
    /// predictable factor `c lambda exp(-lambda Phi)`:
    /// `sum dPhi - lambda/2 (dPhi)^2 + h exp(lambda Phi - log c)/lambda`.
    /// Its drift has the sign of the drift of `Z`.
    pub zhat: Vec<f64>,
}

/// Sampled path of a coupled pair, stored column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledTrajectory {
    pub dim: usize,
    pub t: Vec<f64>,
    /// Positions flattened sample-major (`dim` entries per sample).
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub lx: Vec<f64>,
    pub ly: Vec<f64>,
    pub dist: Vec<f64>,
    pub certificate: Option<CertificateSeries>,
    pub h: f64,
    pub record_stride: usize,
    pub seed: u64,
    pub replica: u64,
    pub strategy: String,
    pub epsilon: f64,
    pub stop_reason: StopReason,
    /// First grid time with `dist <= epsilon`.
    pub coupling_time: Option<f64>,
}

impl CoupledTrajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn x_at(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.x[i * self.dim..(i + 1) * self.dim])
    }

    pub fn y_at(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.y[i * self.dim..(i + 1) * self.dim])
    }

    pub fn final_time(&self) -> f64 {
        *self.t.last().unwrap_or(&0.0)
    }

    pub fn final_x(&self) -> DVector<f64> {
        self.x_at(self.len() - 1)
    }

    /// Sample spacing in time units.
    pub fn sample_dt(&self) -> f64 {
        self.h * self.record_stride as f64
    }

    fn push(&mut self, t: f64, x: &ParticleState, y: &ParticleState, dist: f64) {
        self.t.push(t);
        self.x.extend(x.position.iter());
        self.y.extend(y.position.iter());
        self.lx.push(x.local_time);
        self.ly.push(y.local_time);
        self.dist.push(dist);
    }
}

/// Random stream for replica `k` of an ensemble with the given master seed.
/// Streams are independent of evaluation order.
pub fn replica_rng(master_seed: u64, replica: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(replica);
    rng
}

fn fill_normal<R: Rng + ?Sized>(rng: &mut R, v: &mut DVector<f64>, scale: f64) {
    for vi in v.iter_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *vi = z * scale;
    }
}

/// Simulate a coupled pair with the stream of replica `replica`.
pub fn simulate_pair(
    domain: &ConvexDomain,
    strategy: &dyn CouplingStrategy,
    config: &SimConfig,
    certificate: Option<&dyn LyapunovCertificate>,
    replica: u64,
) -> Result<CoupledTrajectory, DynamicsError> {
    let mut rng = replica_rng(config.seed, replica);
    simulate_pair_with_rng(domain, strategy, config, certificate, &mut rng, replica)
}

/// Simulate a coupled pair drawing from `rng`.
pub fn simulate_pair_with_rng<R: Rng + ?Sized>(
    domain: &ConvexDomain,
    strategy: &dyn CouplingStrategy,
    config: &SimConfig,
    certificate: Option<&dyn LyapunovCertificate>,
    rng: &mut R,
    replica: u64,
) -> Result<CoupledTrajectory, DynamicsError> {
    config.validate(domain)?;
    let n = domain.dimension();
    let h = config.h;
    let sqrt_h = h.sqrt();
    let steps = config.steps();

    let mut xs = ParticleState::new(config.x0.clone());
    let mut ys = ParticleState::new(config.y0.clone());
    let mut traj = CoupledTrajectory {
        dim: n,
        t: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
        lx: Vec::new(),
        ly: Vec::new(),
        dist: Vec::new(),
        certificate: certificate.map(|_| CertificateSeries::default()),
        h,
        record_stride: config.record_stride,
        seed: config.seed,
        replica,
        strategy: strategy.name(),
        epsilon: config.epsilon,
        stop_reason: StopReason::TimeHorizon,
        coupling_time: None,
    };

    let mut dist = (&xs.position - &ys.position).norm();
    let mut phi = certificate.map(|c| c.phi(&xs.position, &ys.position));
    let mut zhat = 0.0;
    let record = |traj: &mut CoupledTrajectory, t: f64, xs: &ParticleState, ys: &ParticleState, dist: f64, phi: Option<f64>, zhat: f64| {
        traj.push(t, xs, ys, dist);
        if let (Some(series), Some(c), Some(p)) = (traj.certificate.as_mut(), certificate, phi) {
            series.phi.push(p);
            series.log_psi.push(c.log_psi(p));
            series.zhat.push(zhat);
        }
    };
    record(&mut traj, 0.0, &xs, &ys, dist, phi, zhat);
    if dist <= config.epsilon {
        traj.stop_reason = StopReason::EpsCoupled;
        traj.coupling_time = Some(0.0);
        return Ok(traj);
    }

    let mut xi_b = DVector::zeros(n);
    let mut xi_c = DVector::zeros(n);
    let mut inc_y = DVector::zeros(n);
    let mut raw = DVector::zeros(n);

    for k in 1..=steps {
        let t_prev = (k - 1) as f64 * h;
        let drive = strategy.drive(t_prev, &xs.position, &ys.position)?;
        let residual = drive.constraint_residual();
        if !(residual <= CONTRACT_TOL) {
            return Err(DynamicsError::StrategyContractViolation { step: k, residual });
        }
        fill_normal(rng, &mut xi_b, sqrt_h);
        fill_normal(rng, &mut xi_c, sqrt_h);
        inc_y.gemv_tr(1.0, drive.j(), &xi_b, 0.0);
        inc_y.gemv_tr(1.0, drive.k(), &xi_c, 1.0);

        step_in_place(domain, &mut xs, &xi_b, h, &mut raw);
        step_in_place(domain, &mut ys, &inc_y, h, &mut raw);
        let t = k as f64 * h;
        xs.time = t;
        ys.time = t;
        dist = (&xs.position - &ys.position).norm();

        if let (Some(c), Some(prev)) = (certificate, phi) {
            let next = c.phi(&xs.position, &ys.position);
            let d = next - prev;
            let lambda = c.lambda();
            zhat += d - 0.5 * lambda * d * d + h * (lambda * prev - c.log_c()).exp() / lambda;
            phi = Some(next);
        }

        let finite = dist.is_finite() && xs.position.iter().chain(ys.position.iter()).all(|v| v.is_finite());
        let coupled = finite && dist <= config.epsilon;
        let last = k == steps || coupled || !finite;
        if k % config.record_stride == 0 || last {
            record(&mut traj, t, &xs, &ys, dist, phi, zhat);
        }
        if !finite {
            traj.stop_reason = StopReason::ExitOfF;
            return Ok(traj);
        }
        if coupled {
            traj.stop_reason = StopReason::EpsCoupled;
            traj.coupling_time = Some(t);
            return Ok(traj);
        }
    }
    Ok(traj)
}

fn fmt_f(v: f64) -> String {
    format!("{v}")
}

/// Write a trajectory as CSV: a `#`-prefixed metadata preamble, one header
/// row `t,x1..xn,y1..yn,LX,LY,dist[,phi,psi]`, then one row per sample.
/// The `psi` column holds the natural log of `Psi`.
pub fn write_trajectory_csv<W: Write>(traj: &CoupledTrajectory, mut w: W) -> std::io::Result<()> {
    writeln!(w, "# seed: {}", traj.seed)?;
    writeln!(w, "# replica: {}", traj.replica)?;
    writeln!(w, "# h: {}", fmt_f(traj.h))?;
    writeln!(w, "# record_stride: {}", traj.record_stride)?;
    writeln!(w, "# epsilon: {}", fmt_f(traj.epsilon))?;
    writeln!(w, "# strategy: {}", traj.strategy)?;
    writeln!(w, "# stop_reason: {}", traj.stop_reason)?;
    match traj.coupling_time {
        Some(s) => writeln!(w, "# coupling_time: {}", fmt_f(s))?,
        None => writeln!(w, "# coupling_time: none")?,
    }
    if traj.certificate.is_some() {
        writeln!(w, "# psi_scale: ln")?;
    }
    let n = traj.dim;
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((1..=n).map(|i| format!("x{i}")));
    header.extend((1..=n).map(|i| format!("y{i}")));
    header.extend(["LX", "LY", "dist"].map(String::from));
    if traj.certificate.is_some() {
        header.extend(["phi", "psi"].map(String::from));
    }
    writeln!(w, "{}", header.join(","))?;
    for i in 0..traj.len() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        row.push(fmt_f(traj.t[i]));
        row.extend(traj.x[i * n..(i + 1) * n].iter().map(|v| fmt_f(*v)));
        row.extend(traj.y[i * n..(i + 1) * n].iter().map(|v| fmt_f(*v)));
        row.push(fmt_f(traj.lx[i]));
        row.push(fmt_f(traj.ly[i]));
        row.push(fmt_f(traj.dist[i]));
        if let Some(c) = &traj.certificate {
            row.push(fmt_f(c.phi[i]));
            row.push(fmt_f(c.log_psi[i]));
        }
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

/// Read a trajectory written by [`write_trajectory_csv`]. The `zhat`
/// series is not part of the file and comes back empty.
pub fn read_trajectory_csv<R: BufRead>(r: R) -> Result<CoupledTrajectory, DynamicsError> {
    let perr = |m: String| DynamicsError::Parse(m);
    let mut meta = std::collections::HashMap::new();
    let mut header: Option<Vec<String>> = None;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if let Some((k, v)) = rest.split_once(':') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
            continue;
        }
        if header.is_none() {
            header = Some(line.split(',').map(|s| s.trim().to_string()).collect());
            continue;
        }
        let row: Result<Vec<f64>, _> = line.split(',').map(|s| s.trim().parse::<f64>()).collect();
        let row = row.map_err(|e| perr(format!("line {}: {e}", lineno + 1)))?;
        rows.push(row);
    }
    let header = header.ok_or_else(|| perr("missing header row".into()))?;
    let n = header.iter().filter(|h| h.starts_with('x')).count();
    let has_cert = header.iter().any(|h| h == "phi");
    let expected = 1 + 2 * n + 3 + if has_cert { 2 } else { 0 };
    if n == 0 || header.len() != expected {
        return Err(perr(format!("unexpected header {header:?}")));
    }
    let get = |k: &str| meta.get(k).cloned().ok_or_else(|| perr(format!("missing metadata '{k}'")));
    let num = |k: &str| -> Result<f64, DynamicsError> {
        get(k)?.parse::<f64>().map_err(|e| perr(format!("metadata '{k}': {e}")))
    };
    let mut traj = CoupledTrajectory {
        dim: n,
        t: Vec::new(),
        x: Vec::new(),
        y: Vec::new(),
        lx: Vec::new(),
        ly: Vec::new(),
        dist: Vec::new(),
        certificate: has_cert.then(CertificateSeries::default),
        h: num("h")?,
        record_stride: num("record_stride")? as usize,
        seed: get("seed")?.parse().map_err(|e| perr(format!("seed: {e}")))?,
        replica: get("replica")?.parse().map_err(|e| perr(format!("replica: {e}")))?,
        strategy: get("strategy")?,
        epsilon: num("epsilon")?,
        stop_reason: StopReason::parse(&get("stop_reason")?).ok_or_else(|| perr("bad stop_reason".into()))?,
        coupling_time: match get("coupling_time")?.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|e| perr(format!("coupling_time: {e}")))?),
        },
    };
    for row in rows {
        if row.len() != expected {
            return Err(perr(format!("row has {} fields, expected {expected}", row.len())));
        }
        traj.t.push(row[0]);
        traj.x.extend(&row[1..1 + n]);
        traj.y.extend(&row[1 + n..1 + 2 * n]);
        traj.lx.push(row[1 + 2 * n]);
        traj.ly.push(row[2 + 2 * n]);
        traj.dist.push(row[3 + 2 * n]);
        if let Some(c) = traj.certificate.as_mut() {
            c.phi.push(row[4 + 2 * n]);
            c.log_psi.push(row[5 + 2 * n]);
        }
    }
    Ok(traj)
}
