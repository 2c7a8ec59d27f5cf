use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Serialize;
use shylab_core::certificates::{
    build_planar_certificate, select_simple_certificate, Certificate, LyapunovCertificate, VerificationReport,
};
use shylab_core::dynamics::{read_trajectory_csv, write_trajectory_csv, CoupledTrajectory};
use shylab_core::montecarlo::{
    coupling_time_stats, run_ensemble, supermartingale_test, total_qv_rate, CouplingSummary, EnsembleSummary,
};

use crate::certfile::{domain_hash, CertificateFile};
use crate::config::{CertificateMode, ExperimentConfig};
use crate::error::CliError;

pub const SUMMARY_FILE: &str = "summary.json";
pub const CHECKPOINT_FILE: &str = "checkpoints.csv";
pub const TRAJECTORY_DIR: &str = "trajectories";

/// Outcome of the configured coupled-fraction thresholds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdCheck {
    pub horizon: f64,
    pub coupled_fraction: f64,
    pub min_coupled_fraction: f64,
    pub tail_r_squared: Option<f64>,
    pub min_tail_r_squared: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulateReport {
    #[serde(flatten)]
    pub summary: EnsembleSummary,
    pub thresholds: Option<ThresholdCheck>,
}

#[derive(Debug)]
pub struct SimulateOutcome {
    pub report: SimulateReport,
    pub trajectories: Vec<CoupledTrajectory>,
    pub trajectory_files: Vec<PathBuf>,
    pub summary_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Load a certificate file for use with `domain`, rejecting files made for
/// another domain.
pub fn load_certificate_for(path: &Path, config: &ExperimentConfig) -> Result<Certificate, CliError> {
    let file = CertificateFile::read(path)?;
    let domain = config.domain.build()?;
    if domain_hash(domain.shape()) != file.domain_sha256 {
        return Err(CliError::config(
            "ensemble.certificate_file",
            format!("{} was built for a different domain", path.display()),
        ));
    }
    file.rebuild()
}

/// Run the configured ensemble and write trajectory CSVs, `summary.json`
/// and `checkpoints.csv` into the output directory.
pub fn cmd_simulate(config: &ExperimentConfig) -> Result<SimulateOutcome, CliError> {
    let exp = config.resolve()?;
    let cert = match &config.ensemble.certificate_file {
        Some(p) => Some(load_certificate_for(p, config)?),
        None => None,
    };
    let out = &config.output.dir;
    let traj_dir = out.join(TRAJECTORY_DIR);
    create_dir(&traj_dir)?;

    let ens = &config.ensemble;
    let cert_ref = cert.as_ref().map(|c| c as &dyn LyapunovCertificate);
    let trajs = run_ensemble(&exp.domain, exp.strategy.as_ref(), &exp.sim, cert_ref, ens.replicas)?;

    let mut files = Vec::new();
    for t in trajs.iter().take(ens.save_trajectories.unwrap_or(usize::MAX)) {
        let path = traj_dir.join(format!("replica_{:06}.csv", t.replica));
        let mut buf = Vec::new();
        write_trajectory_csv(t, &mut buf).map_err(|e| CliError::io(&path, e))?;
        write_file(&path, &buf)?;
        files.push(path);
    }

    let sim = &config.sim;
    let mut summary = EnsembleSummary::new(&trajs, sim.seed, &exp.strategy.name(), sim.h, sim.epsilon);
    let mut horizons = ens.checkpoints.clone();
    if horizons.is_empty() {
        horizons.push(sim.horizon);
    }
    let coupling = coupling_time_stats(&trajs, sim.epsilon, &horizons)?;
    if cert.is_some() && !ens.checkpoints.is_empty() {
        summary.supermartingale = Some(supermartingale_test(&trajs, &ens.checkpoints, ens.confidence)?);
    }
    let thresholds = ens.thresholds.as_ref().map(|t| {
        let f = coupling.fraction_at(t.horizon).unwrap_or_else(|| 1.0 - coupling.survival_at(t.horizon));
        let r2 = coupling.tail_fit.as_ref().map(|fit| fit.r_squared);
        let tail_ok = match t.min_tail_r_squared {
            Some(m) => r2.is_some_and(|r| r >= m),
            None => true,
        };
        ThresholdCheck {
            horizon: t.horizon,
            coupled_fraction: f,
            min_coupled_fraction: t.min_coupled_fraction,
            tail_r_squared: r2,
            min_tail_r_squared: t.min_tail_r_squared,
            pass: f >= t.min_coupled_fraction && tail_ok,
        }
    });
    summary.coupling = Some(coupling);

    let report = SimulateReport { summary, thresholds };
    let summary_path = out.join(SUMMARY_FILE);
    let json = serde_json::to_string_pretty(&report).expect("summary serializes");
    write_file(&summary_path, json.as_bytes())?;
    let checkpoint_path = out.join(CHECKPOINT_FILE);
    let mut csv = Vec::new();
    report.summary.write_checkpoint_csv(&mut csv).map_err(|e| CliError::io(&checkpoint_path, e))?;
    write_file(&checkpoint_path, &csv)?;

    Ok(SimulateOutcome { report, trajectories: trajs, trajectory_files: files, summary_path, checkpoint_path })
}

#[derive(Debug)]
pub struct CertifyOutcome {
    pub certificate: Certificate,
    pub report: VerificationReport,
    /// Report of the extra pass at `certificate.verify_spacing`, if any.
    pub fine_report: Option<VerificationReport>,
    pub path: PathBuf,
}

/// Build the configured certificate, write it to the output directory and
/// return its verification report. A report that fails is an error.
pub fn cmd_certify(config: &ExperimentConfig) -> Result<CertifyOutcome, CliError> {
    let exp = config.resolve()?;
    let block = config.certificate.as_ref().ok_or_else(|| CliError::config("certificate", "block is required"))?;
    let eps = config.certificate_epsilon();
    if !(eps > 0.0) {
        return Err(CliError::config("certificate.epsilon", "certified distance must be positive"));
    }
    let cert = match block.mode {
        CertificateMode::Simple => {
            let pole = DVector::from_column_slice(block.pole.as_deref().unwrap_or_default());
            select_simple_certificate(&exp.domain, eps, &pole, block.grid_spacing)
                .map(Certificate::Simple)
                .map_err(|e| CliError::from_certificate("certificate", e))?
        }
        CertificateMode::Planar => build_planar_certificate(
            &exp.domain,
            eps,
            block.radius.unwrap_or_default(),
            block.sigma.unwrap_or_default(),
            block.center,
            block.grid_spacing,
        )
        .map_err(|e| CliError::from_certificate("certificate", e))?,
    };
    let report = match cert.report() {
        Some(r) => r.clone(),
        None => cert.verify(block.grid_spacing).map_err(|e| CliError::from_certificate("certificate", e))?,
    };
    create_dir(&config.output.dir)?;
    let path = config.output.dir.join(&config.output.certificate);
    CertificateFile::from_certificate(&cert).write(&path)?;
    if !report.pass {
        return Err(CliError::VerificationFailed { reason: "grid verification failed".into(), report: Some(report) });
    }
    let fine_report = match block.verify_spacing {
        Some(s) => {
            let r = cert.verify(s).map_err(|e| CliError::from_certificate("certificate.verify_spacing", e))?;
            if !r.pass {
                return Err(CliError::VerificationFailed {
                    reason: format!("verification at spacing {s} failed"),
                    report: Some(r),
                });
            }
            Some(r)
        }
        None => None,
    };
    Ok(CertifyOutcome { certificate: cert, report, fine_report, path })
}

/// Re-verify a serialized certificate at `spacing` (half the stored grid
/// spacing when absent).
pub fn cmd_verify(path: &Path, spacing: Option<f64>) -> Result<(Certificate, VerificationReport), CliError> {
    let file = CertificateFile::read(path)?;
    let cert = file.rebuild()?;
    let spacing = spacing.unwrap_or(0.5 * file.grid_spacing);
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(CliError::config("spacing", format!("must be positive, got {spacing}")));
    }
    let report = cert.verify(spacing).map_err(|e| CliError::from_certificate("certificate", e))?;
    if !report.pass {
        let worst = report
            .entries
            .iter()
            .max_by(|a, b| a.worst_margin.total_cmp(&b.worst_margin))
            .map(|e| format!("{} margin {:.3e} at {:?}", e.name, e.worst_margin, e.arg_worst))
            .unwrap_or_default();
        return Err(CliError::VerificationFailed { reason: worst, report: Some(report) });
    }
    Ok((cert, report))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StatsReport {
    pub files: usize,
    pub coupling: CouplingSummary,
    /// Mean over trajectories of the realized quadratic variation of the
    /// distance per unit time.
    pub mean_dist_qv_rate: Option<f64>,
}

/// Summarize trajectory CSVs found in `dir` or in its `trajectories`
/// subdirectory.
pub fn cmd_stats(dir: &Path, horizons: &[f64]) -> Result<StatsReport, CliError> {
    let sub = dir.join(TRAJECTORY_DIR);
    let dir = if sub.is_dir() { sub } else { dir.to_path_buf() };
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| CliError::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    paths.sort();
    let mut trajs = Vec::with_capacity(paths.len());
    for p in &paths {
        let f = fs::File::open(p).map_err(|e| CliError::io(p, e))?;
        let t = read_trajectory_csv(std::io::BufReader::new(f))
            .map_err(|e| CliError::config(p.display().to_string(), e.to_string()))?;
        trajs.push(t);
    }
    let eps = trajs.first().map_or(0.0, |t| t.epsilon);
    let mut horizons = horizons.to_vec();
    if horizons.is_empty() {
        if let Some(t) = trajs.iter().map(|t| t.final_time()).max_by(f64::total_cmp) {
            horizons.push(t);
        }
    }
    let coupling = coupling_time_stats(&trajs, eps, &horizons)?;
    let rates: Vec<f64> =
        trajs.iter().filter(|t| t.len() > 1).filter_map(|t| total_qv_rate(&t.dist, t.sample_dt()).ok()).collect();
    let mean_dist_qv_rate = (!rates.is_empty()).then(|| rates.iter().sum::<f64>() / rates.len() as f64);
    Ok(StatsReport { files: paths.len(), coupling, mean_dist_qv_rate })
}
