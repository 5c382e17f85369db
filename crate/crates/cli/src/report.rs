//! Machine-readable run reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use gfx_core::stats::{EstimateReport, StatTestResult};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const SCHEMA: &str = "gfx-lab-report/v1";

/// One checked quantity: an estimate against a target, a distributional
/// test, or both.
#[derive(Clone, Debug, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub estimate: Option<EstimateReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<EstimateReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<StatTestResult>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub values: BTreeMap<String, f64>,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool) -> Self {
        Self {
            name: name.into(),
            pass,
            target: None,
            estimate: None,
            reference: None,
            test: None,
            values: BTreeMap::new(),
        }
    }

    pub fn estimate(name: impl Into<String>, pass: bool, target: f64, estimate: EstimateReport) -> Self {
        Self {
            target: Some(target),
            estimate: Some(estimate),
            ..Self::new(name, pass)
        }
    }

    /// Two independent estimates compared at combined 3σ.
    pub fn versus(name: impl Into<String>, estimate: EstimateReport, reference: EstimateReport) -> Self {
        let pass = estimate.agrees_with(&reference, 3.0);
        Self {
            estimate: Some(estimate),
            reference: Some(reference),
            ..Self::new(name, pass)
        }
    }

    pub fn test(name: impl Into<String>, test: StatTestResult) -> Self {
        Self {
            pass: test.pass,
            test: Some(test),
            ..Self::new(name, false)
        }
    }

    pub fn with_value(mut self, key: &str, v: f64) -> Self {
        self.values.insert(key.to_string(), v);
        self
    }

    /// One human-readable line for the terminal.
    pub fn summary(&self) -> String {
        let verdict = if self.pass { "PASS" } else { "FAIL" };
        let mut s = format!("{verdict} {}", self.name);
        if let Some(e) = &self.estimate {
            s.push_str(&format!(": {:.6} ± {:.6}", e.estimate, e.std_error));
        }
        if let Some(t) = self.target {
            s.push_str(&format!(" (target {t:.6})"));
        }
        if let Some(r) = &self.reference {
            s.push_str(&format!(" vs {:.6} ± {:.6}", r.estimate, r.std_error));
        }
        if let Some(t) = &self.test {
            s.push_str(&format!(": statistic {:.5}, threshold {:.5}", t.statistic, t.threshold));
        }
        for (k, v) in &self.values {
            s.push_str(&format!(", {k} = {v}"));
        }
        s
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub subcommand: String,
    pub config: serde_json::Value,
    /// SHA-256 of the canonical JSON encoding of `config`.
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    /// The identity the run checks.
    pub anchor: &'static str,
    pub checks: Vec<Check>,
    pub pass: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub files: Vec<PathBuf>,
}

impl Report {
    pub fn new<C: Serialize>(subcommand: &str, config: &C, seed: u64, anchor: &'static str, checks: Vec<Check>) -> Self {
        let config = serde_json::to_value(config).expect("config serializes");
        let pass = !checks.is_empty() && checks.iter().all(|c| c.pass);
        Self {
            schema: SCHEMA,
            subcommand: subcommand.to_string(),
            config_hash: config_hash(&config),
            config,
            seed,
            threads: rayon::current_num_threads(),
            anchor,
            checks,
            pass,
            files: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let path = dir.join(format!("{}.json", self.subcommand));
        let text = serde_json::to_string_pretty(self).expect("report serializes");
        fs::write(&path, text + "\n").map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok(path)
    }
}

/// serde_json keeps object keys sorted (no `preserve_order`), so the
/// compact encoding is canonical.
pub fn config_hash(config: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(config).expect("config serializes");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}
