//! Experiment configuration files.
//!
//! A config is a TOML document with a `schema_version` key and the blocks
//! `[domain]`, `[strategy]`, `[sim]`, `[certificate]`, `[ensemble]` and
//! `[output]`. Only `[domain]`, `[strategy]` and `[sim]` are required.
//!
//! ```toml
//! schema_version = 1
//!
//! [domain]
//! kind = "disc"
//! radius = 1.0
//!
//! [strategy]
//! name = "perverse"
//!
//! [sim]
//! x0 = [0.3, 0.0]
//! y0 = [-0.3, 0.0]
//! h = 1e-4
//! horizon = 10.0
//! epsilon = 0.5
//! seed = 1
//!
//! [certificate]
//! mode = "simple"
//! pole = [2.0, 0.0]
//! grid_spacing = 0.01
//!
//! [ensemble]
//! replicas = 100
//! checkpoints = [1.0, 2.0, 5.0, 10.0]
//!
//! [output]
//! dir = "out"
//! ```

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use shylab_core::dynamics::SimConfig;
use shylab_core::geometry::ConvexDomain;
use shylab_core::strategies::{Builtin, CouplingStrategy, MatrixStrategy, RotationStrategy};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub domain: DomainConfig,
    pub strategy: StrategyConfig,
    pub sim: SimBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<CertificateBlock>,
    #[serde(default)]
    pub ensemble: EnsembleBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainConfig {
    Disc {
        #[serde(default)]
        center: [f64; 2],
        radius: f64,
    },
    Ball { center: Vec<f64>, radius: f64 },
    Square { lo: f64, hi: f64 },
    Polygon { vertices: Vec<[f64; 2]> },
    RegularPolygon { sides: usize, side: f64 },
    Ellipse {
        #[serde(default)]
        center: [f64; 2],
        semi_axes: [f64; 2],
    },
    Superellipse {
        #[serde(default)]
        center: [f64; 2],
        semi_axes: [f64; 2],
        exponent: f64,
    },
}

impl DomainConfig {
    pub fn build(&self) -> Result<ConvexDomain, CliError> {
        let built = match self {
            Self::Disc { center, radius } => ConvexDomain::disc(*center, *radius),
            Self::Ball { center, radius } => ConvexDomain::ball(center, *radius),
            Self::Square { lo, hi } => ConvexDomain::square(*lo, *hi),
            Self::Polygon { vertices } => ConvexDomain::polygon(vertices),
            Self::RegularPolygon { sides, side } => ConvexDomain::regular_polygon(*sides, *side),
            Self::Ellipse { center, semi_axes } => ConvexDomain::ellipse(*center, *semi_axes),
            Self::Superellipse { center, semi_axes, exponent } => {
                ConvexDomain::superellipse(*center, *semi_axes, *exponent)
            }
        };
        built.map_err(|e| CliError::config("domain", e.to_string()))
    }
}

/// Strategy name with the parameters of the parametric strategies:
/// `rotation` takes `angle` and `scale`, `matrix` takes `matrix` (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub angle: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub matrix: Option<Vec<f64>>,
}

impl StrategyConfig {
    pub fn named(name: &str) -> Self {
        Self { name: name.into(), angle: None, scale: None, matrix: None }
    }

    pub fn build(&self, dim: usize) -> Result<Box<dyn CouplingStrategy>, CliError> {
        if let Some(b) = Builtin::from_name(&self.name) {
            return Ok(Box::new(b));
        }
        match self.name.as_str() {
            "rotation" => {
                let angle = self.angle.ok_or_else(|| CliError::config("strategy.angle", "required for rotation"))?;
                let s = RotationStrategy::new(angle, self.scale.unwrap_or(1.0))
                    .map_err(|e| CliError::config("strategy.scale", e.to_string()))?;
                Ok(Box::new(s))
            }
            "matrix" => {
                let m = self.matrix.as_ref().ok_or_else(|| CliError::config("strategy.matrix", "required for matrix"))?;
                let s = MatrixStrategy::from_row_major(dim, m)
                    .map_err(|e| CliError::config("strategy.matrix", e.to_string()))?;
                Ok(Box::new(s))
            }
            other => Err(CliError::config(
                "strategy.name",
                format!(
                    "unknown strategy `{other}`; expected one of reflection, perverse, synchronous, independent, rotation, matrix"
                ),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimBlock {
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub h: f64,
    pub horizon: f64,
    pub epsilon: f64,
    pub seed: u64,
    #[serde(default = "one")]
    pub record_stride: usize,
}

fn one() -> usize {
    1
}

impl SimBlock {
    pub fn to_sim_config(&self) -> SimConfig {
        SimConfig {
            x0: DVector::from_column_slice(&self.x0),
            y0: DVector::from_column_slice(&self.y0),
            h: self.h,
            horizon: self.horizon,
            epsilon: self.epsilon,
            seed: self.seed,
            record_stride: self.record_stride,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateMode {
    Simple,
    Planar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateBlock {
    pub mode: CertificateMode,
    /// Coupling distance to certify; defaults to `sim.epsilon`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Pole of the simple certificate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pole: Option<Vec<f64>>,
    /// Pole-circle radius of the planar certificate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    /// Pole-circle center; defaults to the domain's reference center.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 2]>,
    pub grid_spacing: f64,
    /// Spacing of an additional verification pass after construction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify_spacing: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Horizon at which the coupled fraction is checked.
    pub horizon: f64,
    pub min_coupled_fraction: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_tail_r_squared: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleBlock {
    #[serde(default = "one")]
    pub replicas: usize,
    /// Times for the supermartingale test and coupled fractions.
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    /// Number of trajectory CSVs written (all replicas when absent).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub save_trajectories: Option<usize>,
    /// Certificate file whose `Phi` and `Z` series are recorded along the
    /// paths. Relative paths are resolved against the config's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thresholds: Option<Thresholds>,
}

fn default_confidence() -> f64 {
    shylab_core::montecarlo::DEFAULT_CONFIDENCE
}

impl Default for EnsembleBlock {
    fn default() -> Self {
        Self {
            replicas: 1,
            checkpoints: Vec::new(),
            confidence: default_confidence(),
            save_trajectories: None,
            certificate_file: None,
            thresholds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_out")]
    pub dir: PathBuf,
    /// Certificate file name inside `dir`.
    #[serde(default = "default_cert_name")]
    pub certificate: String,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

fn default_cert_name() -> String {
    "certificate.toml".into()
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { dir: default_out(), certificate: default_cert_name() }
    }
}

/// Command-line overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicas: Option<usize>,
    pub out: Option<PathBuf>,
}

/// A validated config with its domain and strategy built.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub domain: ConvexDomain,
    pub strategy: Box<dyn CouplingStrategy>,
    pub sim: SimConfig,
}

impl ExperimentConfig {
    /// Parse and check the schema version; relative file references are
    /// resolved against `base_dir`.
    pub fn from_toml_str(text: &str, base_dir: Option<&Path>) -> Result<Self, CliError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| {
            let key = e.span().map(|s| locate_key(text, s.start)).unwrap_or_default();
            CliError::config(key, e.message().to_string())
        })?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::config(
                "schema_version",
                format!("unsupported version {}; this build reads version {SCHEMA_VERSION}", cfg.schema_version),
            ));
        }
        if let (Some(base), Some(f)) = (base_dir, cfg.ensemble.certificate_file.as_mut()) {
            if f.is_relative() {
                *f = base.join(&*f);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text, path.parent())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.sim.seed = s;
        }
        if let Some(r) = o.replicas {
            self.ensemble.replicas = r;
        }
        if let Some(d) = &o.out {
            self.output.dir = d.clone();
        }
    }

    /// Check every scalar constraint and build the domain and strategy.
    pub fn resolve(&self) -> Result<Experiment, CliError> {
        let domain = self.domain.build()?;
        let n = domain.dimension();
        let strategy = self.strategy.build(n)?;
        let sim = self.sim.to_sim_config();
        for (key, z) in [("sim.x0", &sim.x0), ("sim.y0", &sim.y0)] {
            if z.len() != n {
                return Err(CliError::config(key, format!("expected {n} coordinates, got {}", z.len())));
            }
            if (domain.project(z) - z).norm() > domain.boundary_tolerance() {
                return Err(CliError::config(key, "start point lies outside the domain"));
            }
        }
        let positive = |key: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(CliError::config(key, format!("must be positive and finite, got {v}")))
            }
        };
        positive("sim.h", self.sim.h)?;
        if !(self.sim.horizon >= 0.0 && self.sim.horizon.is_finite()) {
            return Err(CliError::config("sim.horizon", format!("must be nonnegative, got {}", self.sim.horizon)));
        }
        if !(self.sim.epsilon >= 0.0 && self.sim.epsilon.is_finite()) {
            return Err(CliError::config("sim.epsilon", format!("must be nonnegative, got {}", self.sim.epsilon)));
        }
        if self.sim.record_stride == 0 {
            return Err(CliError::config("sim.record_stride", "must be at least 1"));
        }
        sim.validate(&domain).map_err(|e| CliError::config("sim", e.to_string()))?;

        let e = &self.ensemble;
        if !(e.confidence > 0.0 && e.confidence < 1.0) {
            return Err(CliError::config("ensemble.confidence", format!("must lie in (0, 1), got {}", e.confidence)));
        }
        if e.checkpoints.iter().any(|&t| !(t >= 0.0 && t <= self.sim.horizon)) {
            return Err(CliError::config("ensemble.checkpoints", "checkpoints must lie in [0, sim.horizon]"));
        }
        if e.checkpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(CliError::config("ensemble.checkpoints", "checkpoints must be strictly increasing"));
        }
        if let Some(t) = &e.thresholds {
            if !(0.0..=1.0).contains(&t.min_coupled_fraction) {
                return Err(CliError::config("ensemble.thresholds.min_coupled_fraction", "must lie in [0, 1]"));
            }
            if !(t.horizon >= 0.0 && t.horizon <= self.sim.horizon) {
                return Err(CliError::config("ensemble.thresholds.horizon", "must lie in [0, sim.horizon]"));
            }
        }

        if let Some(c) = &self.certificate {
            positive("certificate.grid_spacing", c.grid_spacing)?;
            if let Some(v) = c.verify_spacing {
                positive("certificate.verify_spacing", v)?;
            }
            if let Some(eps) = c.epsilon {
                positive("certificate.epsilon", eps)?;
            }
            match c.mode {
                CertificateMode::Simple => {
                    let p = c.pole.as_ref().ok_or_else(|| CliError::config("certificate.pole", "required in simple mode"))?;
                    if p.len() != n {
                        return Err(CliError::config("certificate.pole", format!("expected {n} coordinates, got {}", p.len())));
                    }
                }
                CertificateMode::Planar => {
                    if n != 2 {
                        return Err(CliError::config("certificate.mode", "planar mode needs a planar domain"));
                    }
                    let r = c.radius.ok_or_else(|| CliError::config("certificate.radius", "required in planar mode"))?;
                    positive("certificate.radius", r)?;
                    let s = c.sigma.ok_or_else(|| CliError::config("certificate.sigma", "required in planar mode"))?;
                    if !(s > 1.0 && s < 2.0) {
                        return Err(CliError::config("certificate.sigma", format!("must lie in (1, 2), got {s}")));
                    }
                }
            }
        }
        Ok(Experiment { config: self.clone(), domain, strategy, sim })
    }

    /// Certified coupling distance: `certificate.epsilon` or `sim.epsilon`.
    pub fn certificate_epsilon(&self) -> f64 {
        self.certificate.as_ref().and_then(|c| c.epsilon).unwrap_or(self.sim.epsilon)
    }
}

/// Dotted key path of the innermost table header or key before `offset`.
fn locate_key(text: &str, offset: usize) -> String {
    let head = &text[..offset.min(text.len())];
    let mut table = String::new();
    let mut key = String::new();
    for line in head.lines() {
        let l = line.trim();
        if l.starts_with('[') {
            table = l.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            key.clear();
        } else if let Some((k, _)) = l.split_once('=') {
            key = k.trim().to_string();
        }
    }
    let tail = text[offset.min(text.len())..].lines().next().unwrap_or("");
    if let Some((k, _)) = tail.split_once('=').filter(|(k, _)| !k.trim().is_empty()) {
        key = k.trim().to_string();
    }
    match (table.is_empty(), key.is_empty()) {
        (true, _) => key,
        (false, true) => table,
        (false, false) => format!("{table}.{key}"),
    }
}
