//! Experiment reports: JSON body, text summary and the convergence CSV.

use crate::Result;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// Version tag of the convergence CSV layout.
pub const CSV_SCHEMA: &str = "convergence-v1";
pub const CSV_HEADER: &str = "eta,N,mean_H_re,mean_H_im,rel_L2,stderr,replicas,seed";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub replicas: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub eta: f64,
    pub mean_h_re: f64,
    pub mean_h_im: f64,
    pub rel_l2: f64,
    /// None when a single replica was run.
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AverageRow {
    pub n: usize,
    pub mean_h_re: f64,
    pub mean_h_im: f64,
    pub rel_l2: f64,
    pub stderr: Option<f64>,
}

/// rel_L2(A_N) - rel_L2(best single scale), paired over replicas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AveragingGain {
    pub n: usize,
    pub best_scale_index: usize,
    pub difference: f64,
    pub stderr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub quantity: String,
    /// Which oracle produced `oracle_value`.
    pub oracle: String,
    pub mc_value: f64,
    pub oracle_value: f64,
    pub stderr: f64,
    pub z_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactCheck {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ExactCheck {
    pub fn new(name: &str, value: f64, tolerance: f64) -> Self {
        ExactCheck { name: name.into(), value, tolerance, pass: value.abs() <= tolerance }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub kind: String,
    pub provenance: Provenance,
    pub scales: Vec<ScaleRow>,
    pub averaged: Vec<AverageRow>,
    pub averaging_gain: Option<AveragingGain>,
    /// Correlation of per-scale residuals H + iβT.
    pub correlation: Vec<Vec<f64>>,
    pub oracle_rows: Vec<OracleRow>,
    pub exact_checks: Vec<ExactCheck>,
    /// Largest |z| allowed before the suite fails.
    pub z_limit: Option<f64>,
    pub passed: bool,
    /// Wall-clock seconds; not part of the body.
    #[serde(skip)]
    pub runtime_seconds: f64,
}

impl ExperimentReport {
    pub fn new(kind: &str, provenance: Provenance) -> Self {
        ExperimentReport {
            kind: kind.into(),
            provenance,
            scales: Vec::new(),
            averaged: Vec::new(),
            averaging_gain: None,
            correlation: Vec::new(),
            oracle_rows: Vec::new(),
            exact_checks: Vec::new(),
            z_limit: None,
            passed: true,
            runtime_seconds: 0.0,
        }
    }

    /// Deterministic JSON body (runtime excluded).
    pub fn body_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn max_abs_z(&self) -> f64 {
        self.oracle_rows.iter().map(|r| r.z_score.abs()).fold(0.0, f64::max)
    }

    /// Recomputes `passed` from the oracle rows and exact checks.
    pub fn finalize(&mut self) {
        let z_ok = match self.z_limit {
            Some(lim) => self.oracle_rows.iter().all(|r| r.z_score.abs() <= lim),
            None => true,
        };
        self.passed = z_ok && self.exact_checks.iter().all(|c| c.pass);
    }

    pub fn csv(&self) -> String {
        let mut s = String::new();
        writeln!(s, "{CSV_HEADER}").unwrap();
        let p = &self.provenance;
        let se = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_else(|| "n/a".into());
        for r in &self.scales {
            writeln!(
                s,
                "{:e},,{:e},{:e},{:e},{},{},{}",
                r.eta,
                r.mean_h_re,
                r.mean_h_im,
                r.rel_l2,
                se(r.stderr),
                p.replicas,
                p.seed
            )
            .unwrap();
        }
        for r in &self.averaged {
            writeln!(
                s,
                ",{},{:e},{:e},{:e},{},{},{}",
                r.n,
                r.mean_h_re,
                r.mean_h_im,
                r.rel_l2,
                se(r.stderr),
                p.replicas,
                p.seed
            )
            .unwrap();
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        let p = &self.provenance;
        writeln!(s, "{} report: R = {}, seed = {}, config {}", self.kind, p.replicas, p.seed, &p.config_hash[..12])
            .unwrap();
        let se = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
        for r in &self.scales {
            writeln!(s, "  eta {:<8} rel_L2 {:.4} ± {}", r.eta, r.rel_l2, se(r.stderr)).unwrap();
        }
        for r in &self.averaged {
            writeln!(s, "  A_{:<6} rel_L2 {:.4} ± {}", r.n, r.rel_l2, se(r.stderr)).unwrap();
        }
        if let Some(g) = &self.averaging_gain {
            writeln!(s, "  A_{} - best single: {:+.4} ± {}", g.n, g.difference, se(g.stderr)).unwrap();
        }
        for r in &self.oracle_rows {
            writeln!(
                s,
                "  {:<40} mc {:>12.5e} oracle {:>12.5e} z {:>7.2}  [{}]",
                r.quantity, r.mc_value, r.oracle_value, r.z_score, r.oracle
            )
            .unwrap();
        }
        for c in &self.exact_checks {
            writeln!(
                s,
                "  {:<40} {:.3e} (tol {:.0e}) {}",
                c.name,
                c.value,
                c.tolerance,
                if c.pass { "ok" } else { "FAIL" }
            )
            .unwrap();
        }
        writeln!(s, "  {}", if self.passed { "PASSED" } else { "FAILED" }).unwrap();
        s
    }

    /// Writes report.json, the CSV (convergence runs) and runtime.json; returns report.json's path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(format!("{}_report.json", self.kind));
        std::fs::write(&path, self.body_json())?;
        if !self.scales.is_empty() {
            std::fs::write(dir.join(format!("{}_table.csv", self.kind)), self.csv())?;
        }
        let runtime = serde_json::json!({ "runtime_seconds": self.runtime_seconds, "csv_schema": CSV_SCHEMA });
        std::fs::write(dir.join(format!("{}_runtime.json", self.kind)), serde_json::to_string_pretty(&runtime)?)?;
        Ok(path)
    }
}
