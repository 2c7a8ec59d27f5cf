//! Serialized certificates.
//!
//! A certificate file records the domain, a SHA-256 hash of the domain
//! block, the defining scalars, the derived constants, the poles and the
//! verification report. [`CertificateFile::rebuild`] reconstructs the
//! certificate from the defining scalars alone; the stored constants and
//! poles are checked against the recomputed ones.

use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use shylab_core::certificates::{
    Certificate, DeltaBounds, LemmaConstants, PlanarCertificate, SimpleCertificate, VerificationReport,
};
use shylab_core::geometry::{ConvexDomain, DomainShape};

use crate::error::CliError;

pub const CERT_SCHEMA_VERSION: u32 = 1;

/// Relative tolerance when comparing stored and recomputed constants.
const CONSTANT_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    Simple,
    Planar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CertificateFile {
    pub schema_version: u32,
    pub kind: CertificateKind,
    pub domain_sha256: String,
    pub epsilon: f64,
    pub delta: f64,
    pub grid_spacing: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pole: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi: Option<f64>,
    #[serde(default)]
    pub poles: Vec<[f64; 2]>,
    pub domain: DomainShape,
    pub constants: LemmaConstants,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_bounds: Option<DeltaBounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<VerificationReport>,
}

/// Hex SHA-256 of the canonical TOML form of a domain.
pub fn domain_hash(shape: &DomainShape) -> String {
    let text = toml::to_string(shape).expect("domain serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= CONSTANT_RTOL * a.abs().max(b.abs())
}

impl CertificateFile {
    pub fn from_certificate(cert: &Certificate) -> Self {
        let shape = cert.domain().shape().clone();
        let hash = domain_hash(&shape);
        match cert {
            Certificate::Simple(c) => Self {
                schema_version: CERT_SCHEMA_VERSION,
                kind: CertificateKind::Simple,
                domain_sha256: hash,
                epsilon: c.epsilon,
                delta: c.delta,
                grid_spacing: c.grid_spacing,
                pole: Some(c.pole.iter().copied().collect()),
                radius: None,
                sigma: None,
                center: None,
                eta: None,
                xi: None,
                poles: Vec::new(),
                domain: shape,
                constants: c.constants,
                delta_bounds: None,
                report: c.report.clone(),
            },
            Certificate::Planar(c) => Self {
                schema_version: CERT_SCHEMA_VERSION,
                kind: CertificateKind::Planar,
                domain_sha256: hash,
                epsilon: c.epsilon,
                delta: c.delta,
                grid_spacing: c.grid_spacing,
                pole: None,
                radius: Some(c.radius),
                sigma: Some(c.sigma),
                center: Some(c.center),
                eta: Some(c.eta),
                xi: Some(c.xi),
                poles: c.poles.iter().map(|p| [p.point.x, p.point.y]).collect(),
                domain: shape,
                constants: c.constants,
                delta_bounds: Some(c.delta_bounds),
                report: c.report.clone(),
            },
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("certificate serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let f: Self = toml::from_str(text).map_err(|e| CliError::config("certificate file", e.message().to_string()))?;
        if f.schema_version != CERT_SCHEMA_VERSION {
            return Err(CliError::config(
                "schema_version",
                format!("unsupported certificate version {}", f.schema_version),
            ));
        }
        Ok(f)
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| CliError::io(path, e))
    }

    fn rejected(reason: String) -> CliError {
        CliError::VerificationFailed { reason, report: None }
    }

    /// Reconstruct the certificate from the domain and defining scalars.
    /// A hash mismatch, an invalid scalar or stored constants that differ
    /// from the recomputed ones all reject the file.
    pub fn rebuild(&self) -> Result<Certificate, CliError> {
        if domain_hash(&self.domain) != self.domain_sha256 {
            return Err(Self::rejected("domain block does not match its recorded hash".into()));
        }
        let domain = ConvexDomain::new(self.domain.clone()).map_err(|e| CliError::config("domain", e.to_string()))?;
        let missing = |k: &str| CliError::config(k, format!("required for a {:?} certificate", self.kind));
        let cert = match self.kind {
            CertificateKind::Simple => {
                let pole = self.pole.as_ref().ok_or_else(|| missing("pole"))?;
                SimpleCertificate::from_parts(
                    &domain,
                    DVector::from_column_slice(pole),
                    self.delta,
                    self.epsilon,
                    self.grid_spacing,
                )
                .map(Certificate::Simple)
            }
            CertificateKind::Planar => PlanarCertificate::from_parts(
                &domain,
                self.epsilon,
                self.radius.ok_or_else(|| missing("radius"))?,
                self.sigma.ok_or_else(|| missing("sigma"))?,
                self.center.ok_or_else(|| missing("center"))?,
                self.eta.ok_or_else(|| missing("eta"))?,
                self.xi.ok_or_else(|| missing("xi"))?,
                self.delta,
                self.grid_spacing,
            )
            .map(Certificate::Planar),
        }
        .map_err(|e| Self::rejected(format!("certificate cannot be reconstructed: {e}")))?;

        let c = match &cert {
            Certificate::Simple(c) => c.constants,
            Certificate::Planar(c) => c.constants,
        };
        let s = &self.constants;
        for (name, a, b) in [
            ("a", s.a, c.a),
            ("b", s.b, c.b),
            ("lambda", s.lambda, c.lambda),
            ("log_c", s.log_c, c.log_c),
            ("max_phi", s.max_phi, c.max_phi),
        ] {
            if !close(a, b) {
                return Err(Self::rejected(format!("stored constant {name} = {a} differs from recomputed {b}")));
            }
        }
        if let Certificate::Planar(p) = &cert {
            let same = p.poles.len() == self.poles.len()
                && p.poles.iter().zip(&self.poles).all(|(q, r)| close(q.point.x, r[0]) && close(q.point.y, r[1]));
            if !same {
                return Err(Self::rejected("stored poles differ from the recomputed poles".into()));
            }
        }
        Ok(cert)
    }
}
