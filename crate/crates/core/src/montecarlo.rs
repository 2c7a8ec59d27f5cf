//! Ensemble statistics over coupled trajectories.
//!
//! Replicas run in parallel with one random stream per replica index and are
//! collected in index order, so every summary is a deterministic function of
//! the master seed.

use crate::certificates::LyapunovCertificate;
use crate::dynamics::{simulate_pair, CoupledTrajectory, DynamicsError, SimConfig, StopReason};
use crate::geometry::ConvexDomain;
use crate::strategies::CouplingStrategy;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use std::io::Write;
use thiserror::Error;

/// Default confidence level of interval estimates and one-sided tests.
pub const DEFAULT_CONFIDENCE: f64 = 0.99;
/// Quantile levels reported for the coupling time.
pub const QUANTILE_LEVELS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];
/// Survival tail fit: start at the median, stop when fewer than this many
/// replicas remain at risk.
const TAIL_MIN_AT_RISK: usize = 10;
const TAIL_POINTS: usize = 40;

#[derive(Debug, Error)]
pub enum MonteCarloError {
    #[error("inconsistent ensemble: {0}")]
    InconsistentEnsemble(String),
    #[error("trajectory {0} carries no certificate series")]
    MissingCertificateSeries(u64),
    #[error("window of {window} increments is too short for a series of {len} samples")]
    WindowTooShort { window: usize, len: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Run `replicas` coupled pairs; replica `k` uses stream `k` of the master
/// seed in `config`.
pub fn run_ensemble(
    domain: &ConvexDomain,
    strategy: &dyn CouplingStrategy,
    config: &SimConfig,
    certificate: Option<&dyn LyapunovCertificate>,
    replicas: usize,
) -> Result<Vec<CoupledTrajectory>, DynamicsError> {
    config.validate(domain)?;
    (0..replicas as u64)
        .into_par_iter()
        .map(|k| simulate_pair(domain, strategy, config, certificate, k))
        .collect()
}

fn z_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

// ---------------------------------------------------------------------------
// Coupling times

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SurvivalPoint {
    pub t: f64,
    pub survival: f64,
    pub at_risk: usize,
}

/// Least-squares fit `log S(t) = intercept - rate t` on the survival tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailFit {
    pub rate: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub t_start: f64,
    pub t_end: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HorizonFraction {
    pub horizon: f64,
    pub fraction: f64,
    /// Binomial standard error of the fraction.
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Quantile {
    pub level: f64,
    /// `None` when the survival curve never drops that far.
    pub time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CouplingSummary {
    pub replicas: usize,
    pub epsilon: f64,
    pub coupled: usize,
    pub censored: usize,
    /// Runs stopped because the state became non-finite.
    pub exits: usize,
    pub fractions: Vec<HorizonFraction>,
    pub quantiles: Vec<Quantile>,
    /// Kaplan-Meier survival at each distinct coupling time.
    pub survival: Vec<SurvivalPoint>,
    pub tail_fit: Option<TailFit>,
}

impl CouplingSummary {
    /// Kaplan-Meier survival probability `P(S > t)`.
    pub fn survival_at(&self, t: f64) -> f64 {
        self.survival.iter().take_while(|p| p.t <= t).last().map_or(1.0, |p| p.survival)
    }

    pub fn fraction_at(&self, horizon: f64) -> Option<f64> {
        self.fractions.iter().find(|f| f.horizon == horizon).map(|f| f.fraction)
    }
}

fn check_consistent(trajs: &[CoupledTrajectory]) -> Result<(), MonteCarloError> {
    if let Some(first) = trajs.first() {
        for t in trajs {
            if t.h != first.h || t.epsilon != first.epsilon || t.strategy != first.strategy || t.dim != first.dim {
                return Err(MonteCarloError::InconsistentEnsemble(format!(
                    "replica {} differs from replica {} in step, epsilon, strategy or dimension",
                    t.replica, first.replica
                )));
            }
        }
    }
    Ok(())
}

/// Kaplan-Meier curve from `(time, event)` pairs; `event = false` marks a
/// censored observation.
pub fn kaplan_meier(obs: &[(f64, bool)]) -> Vec<SurvivalPoint> {
    let mut sorted: Vec<(f64, bool)> = obs.to_vec();
    // events before censorings at equal times
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0).then(b.1.cmp(&a.1)));
    let mut at_risk = sorted.len();
    let mut s = 1.0;
    let mut out = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let t = sorted[i].0;
        let mut events = 0;
        let mut leaving = 0;
        while i < sorted.len() && sorted[i].0 == t {
            if sorted[i].1 {
                events += 1;
            }
            leaving += 1;
            i += 1;
        }
        if events > 0 {
            s *= 1.0 - events as f64 / at_risk as f64;
            out.push(SurvivalPoint { t, survival: s, at_risk });
        }
        at_risk -= leaving;
    }
    out
}

/// Exponential tail fit on `TAIL_POINTS` equally spaced times between the
/// median coupling time and the last time with at least
/// `TAIL_MIN_AT_RISK` replicas at risk.
pub fn fit_exponential_tail(curve: &[SurvivalPoint]) -> Option<TailFit> {
    let start = curve.iter().find(|p| p.survival <= 0.5)?.t;
    let end = curve.iter().rfind(|p| p.at_risk >= TAIL_MIN_AT_RISK && p.survival > 0.0)?.t;
    if !(end > start) {
        return None;
    }
    let surv = |t: f64| curve.iter().take_while(|p| p.t <= t).last().map_or(1.0, |p| p.survival);
    let pts: Vec<(f64, f64)> = (0..TAIL_POINTS)
        .map(|k| start + (end - start) * k as f64 / (TAIL_POINTS - 1) as f64)
        .map(|t| (t, surv(t)))
        .filter(|(_, s)| *s > 0.0)
        .map(|(t, s)| (t, s.ln()))
        .collect();
    if pts.len() < 3 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mt).powi(2)).sum::<f64>();
    let sxy = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum::<f64>();
    let syy = pts.iter().map(|p| (p.1 - my).powi(2)).sum::<f64>();
    let slope = sxy / sxx;
    let intercept = my - slope * mt;
    let ss_res = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>();
    let r_squared = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    Some(TailFit { rate: -slope, intercept, r_squared, t_start: start, t_end: end, points: pts.len() })
}

/// Empirical distribution of the first time with `dist <= epsilon`, with
/// censoring at each run's final time.
pub fn coupling_time_stats(
    trajs: &[CoupledTrajectory],
    epsilon: f64,
    horizons: &[f64],
) -> Result<CouplingSummary, MonteCarloError> {
    check_consistent(trajs)?;
    if let Some(t) = trajs.iter().find(|t| t.epsilon != epsilon) {
        return Err(MonteCarloError::InconsistentEnsemble(format!(
            "replica {} was run with epsilon {}, summary requested for {epsilon}",
            t.replica, t.epsilon
        )));
    }
    let n = trajs.len();
    let obs: Vec<(f64, bool)> = trajs
        .iter()
        .map(|t| match t.coupling_time {
            Some(s) => (s, true),
            None => (t.final_time(), false),
        })
        .collect();
    let coupled = obs.iter().filter(|o| o.1).count();
    let exits = trajs.iter().filter(|t| t.stop_reason == StopReason::ExitOfF).count();
    let fractions = horizons
        .iter()
        .map(|&h| {
            let f = if n == 0 { 0.0 } else { obs.iter().filter(|o| o.1 && o.0 <= h).count() as f64 / n as f64 };
            HorizonFraction { horizon: h, fraction: f, std_error: if n == 0 { 0.0 } else { (f * (1.0 - f) / n as f64).sqrt() } }
        })
        .collect();
    let survival = kaplan_meier(&obs);
    let quantiles = QUANTILE_LEVELS
        .iter()
        .map(|&q| Quantile { level: q, time: survival.iter().find(|p| p.survival <= 1.0 - q).map(|p| p.t) })
        .collect();
    let tail_fit = fit_exponential_tail(&survival);
    Ok(CouplingSummary {
        replicas: n,
        epsilon,
        coupled,
        censored: n - coupled,
        exits,
        fractions,
        quantiles,
        survival,
        tail_fit,
    })
}

// ---------------------------------------------------------------------------
// Supermartingale test

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CheckpointStats {
    pub t: f64,
    /// Mean of the normalized `Z` series stopped at the exit time.
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Mean increment since the previous checkpoint and its standard error.
    pub mean_increment: f64,
    pub increment_se: f64,
    /// Fraction of replicas already stopped.
    pub stopped_fraction: f64,
    /// The increment is significantly positive.
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupermartingaleReport {
    pub replicas: usize,
    pub confidence: f64,
    pub checkpoints: Vec<CheckpointStats>,
    pub pass: bool,
}

fn value_at(traj: &CoupledTrajectory, series: &[f64], t: f64) -> f64 {
    let tol = 1e-9 * traj.h;
    let idx = traj.t.partition_point(|&s| s <= t + tol);
    if idx == 0 {
        series[0]
    } else {
        series[idx - 1]
    }
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

/// Test `H0: Z` has nonpositive mean increments between consecutive
/// checkpoints, using the normalized `Z` series recorded with the
/// trajectories. An increment is flagged when
/// `mean - z_conf * se > 0`, with `z_conf` the one-sided normal quantile.
///
/// Checkpoints should coincide with recorded sample times; values are read
/// from the last sample at or before each checkpoint.
pub fn supermartingale_test(
    trajs: &[CoupledTrajectory],
    checkpoints: &[f64],
    confidence: f64,
) -> Result<SupermartingaleReport, MonteCarloError> {
    check_consistent(trajs)?;
    if !(confidence > 0.0 && confidence < 1.0) {
        return Err(MonteCarloError::InvalidArgument(format!("confidence must lie in (0, 1), got {confidence}")));
    }
    if checkpoints.windows(2).any(|w| w[1] <= w[0]) || checkpoints.first().is_some_and(|&t| t < 0.0) {
        return Err(MonteCarloError::InvalidArgument("checkpoints must be increasing and nonnegative".into()));
    }
    let mut series = Vec::with_capacity(trajs.len());
    for t in trajs {
        let c = t.certificate.as_ref().ok_or(MonteCarloError::MissingCertificateSeries(t.replica))?;
        if c.zhat.len() != t.len() {
            return Err(MonteCarloError::MissingCertificateSeries(t.replica));
        }
        series.push(&c.zhat);
    }
    let one_sided = z_quantile(confidence);
    let two_sided = z_quantile(0.5 + 0.5 * confidence);
    let n = trajs.len();
    let mut prev: Vec<f64> = vec![0.0; n];
    let mut out = Vec::with_capacity(checkpoints.len());
    for &cp in checkpoints {
        let vals: Vec<f64> = trajs.iter().zip(&series).map(|(t, s)| value_at(t, s, cp)).collect();
        let incs: Vec<f64> = vals.iter().zip(&prev).map(|(a, b)| a - b).collect();
        let (m, sd) = mean_sd(&vals);
        let (mi, sdi) = mean_sd(&incs);
        let se = if n > 0 { sd / (n as f64).sqrt() } else { 0.0 };
        let sei = if n > 0 { sdi / (n as f64).sqrt() } else { 0.0 };
        let stopped = trajs.iter().filter(|t| t.final_time() <= cp && t.stop_reason != StopReason::TimeHorizon).count();
        out.push(CheckpointStats {
            t: cp,
            mean: m,
            ci_low: m - two_sided * se,
            ci_high: m + two_sided * se,
            mean_increment: mi,
            increment_se: sei,
            stopped_fraction: if n > 0 { stopped as f64 / n as f64 } else { 0.0 },
            flagged: mi - one_sided * sei > 0.0,
        });
        prev = vals;
    }
    let pass = out.iter().all(|c| !c.flagged);
    Ok(SupermartingaleReport { replicas: n, confidence, checkpoints: out, pass })
}

// ---------------------------------------------------------------------------
// Quadratic variation and marginal tests

/// Rolling realized quadratic variation per unit time over `window`
/// increments of a series sampled every `dt`.
pub fn quadratic_variation(series: &[f64], dt: f64, window: usize) -> Result<Vec<f64>, MonteCarloError> {
    if window < 1 || series.len() < window + 1 {
        return Err(MonteCarloError::WindowTooShort { window, len: series.len() });
    }
    if !(dt > 0.0) {
        return Err(MonteCarloError::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let sq: Vec<f64> = series.windows(2).map(|w| (w[1] - w[0]).powi(2)).collect();
    let mut acc: f64 = sq[..window].iter().sum();
    let span = window as f64 * dt;
    let mut out = Vec::with_capacity(sq.len() - window + 1);
    out.push(acc / span);
    for k in window..sq.len() {
        acc += sq[k] - sq[k - window];
        out.push(acc / span);
    }
    Ok(out)
}

/// Total realized quadratic variation divided by elapsed time.
pub fn total_qv_rate(series: &[f64], dt: f64) -> Result<f64, MonteCarloError> {
    Ok(quadratic_variation(series, dt, series.len().saturating_sub(1).max(1))?[0])
}

/// Two-sample Kolmogorov-Smirnov statistic and asymptotic p-value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult, MonteCarloError> {
    if a.is_empty() || b.is_empty() {
        return Err(MonteCarloError::InvalidArgument("both samples must be nonempty".into()));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    let lambda = (ne + 0.12 + 0.11 / ne) * d;
    Ok(KsResult { statistic: d, p_value: kolmogorov_q(lambda) })
}

/// `Q(lambda) = 2 sum_{k>=1} (-1)^{k-1} exp(-2 k^2 lambda^2)`.
fn kolmogorov_q(lambda: f64) -> f64 {
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Summary

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnsembleSummary {
    pub replicas: usize,
    pub seed: u64,
    pub strategy: String,
    pub h: f64,
    pub epsilon: f64,
    pub coupling: Option<CouplingSummary>,
    pub supermartingale: Option<SupermartingaleReport>,
}

impl EnsembleSummary {
    pub fn new(trajs: &[CoupledTrajectory], seed: u64, strategy: &str, h: f64, epsilon: f64) -> Self {
        Self { replicas: trajs.len(), seed, strategy: strategy.into(), h, epsilon, coupling: None, supermartingale: None }
    }

    /// Flat CSV of checkpoint statistics: coupled fraction at each
    /// checkpoint together with the supermartingale statistics, when
    /// present.
    pub fn write_checkpoint_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,coupled_fraction,z_mean,z_ci_low,z_ci_high,z_mean_increment,z_increment_se,flagged")?;
        let mut times: Vec<f64> = Vec::new();
        if let Some(s) = &self.supermartingale {
            times.extend(s.checkpoints.iter().map(|c| c.t));
        } else if let Some(c) = &self.coupling {
            times.extend(c.fractions.iter().map(|f| f.horizon));
        }
        for t in times {
            let frac = self.coupling.as_ref().map(|c| c.fraction_at(t).unwrap_or_else(|| 1.0 - c.survival_at(t)));
            let cp = self.supermartingale.as_ref().and_then(|s| s.checkpoints.iter().find(|c| c.t == t));
            let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
            writeln!(
                w,
                "{t},{},{},{},{},{},{},{}",
                opt(frac),
                opt(cp.map(|c| c.mean)),
                opt(cp.map(|c| c.ci_low)),
                opt(cp.map(|c| c.ci_high)),
                opt(cp.map(|c| c.mean_increment)),
                opt(cp.map(|c| c.increment_se)),
                cp.map_or(String::new(), |c| c.flagged.to_string()),
            )?;
        }
        Ok(())
    }
}
