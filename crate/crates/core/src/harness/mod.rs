//! Configuration, Monte Carlo orchestration, verification and report output.
//!
//! Replicas run on a bounded rayon pool; every replica draws from its own
//! counter-based stream and results are reduced in replica order, so a report
//! depends only on (config, seed), never on the worker count.

pub mod config;
mod experiment;
pub mod report;
mod verify;

pub use config::{ExperimentConfig, Setup, OUTPUT_DIR_ENV};
pub use experiment::{convergence_report, run_convergence_experiment, simulate_records};
pub use report::{ExperimentReport, CSV_HEADER, CSV_SCHEMA};
pub use verify::{run_verification_suite, Z_LIMIT};

use crate::chaos::{build_cascade, cascade_shift_report, period_shift, build_chaos};
use crate::estimator::{EstimatorConfig, Estimator};
use crate::grid::TestFunction;
use crate::sampler::{GradPairing, SeedStream};
use crate::{Complex64, Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeDemo {
    pub levels: u32,
    pub beta: f64,
    pub shift: f64,
    /// max |ΔM| over all finest cells, over all shifted intervals.
    pub max_cell_deviation: f64,
    /// max |ΔA - 2π/β| under the shifted interval.
    pub max_field_shift_error: f64,
    pub intervals_checked: usize,
}

/// Shifts one interval per level by 2π/β and records the largest change of M.
pub fn cascade_demo(beta: f64, levels: u32, seed: u64) -> Result<CascadeDemo> {
    if !(beta > 0.0) {
        return Err(Error::InvalidParameter(format!("beta must be positive, got {beta}")));
    }
    let c = build_cascade(levels, 1.0, beta, SeedStream::new(seed, 0))?;
    let shift = period_shift(beta);
    let mut dev: f64 = 0.0;
    let mut ferr: f64 = 0.0;
    for level in 0..=levels {
        let index = (seed.wrapping_mul(2654435761).wrapping_add(level as u64)) % (1u64 << level);
        let r = cascade_shift_report(&c, level, index, shift)?;
        dev = dev.max(r.max_cell_change);
        ferr = ferr.max(r.field_shift_error);
    }
    Ok(CascadeDemo {
        levels,
        beta,
        shift,
        max_cell_deviation: dev,
        max_field_shift_error: ferr,
        intervals_checked: levels as usize + 1,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionRow {
    pub replica: u64,
    /// (i/β) Σ_k H^{(k)} at the finest scale.
    pub estimate: Complex64,
    /// -⟨Γ, ∇·F⟩ computed from the field.
    pub truth: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub amplitudes: Vec<f64>,
    pub eta: f64,
    pub rows: Vec<ReconstructionRow>,
    pub rel_l2: f64,
}

/// For F = (a_1 f, ..., a_d f) with f the configured bump, estimates
/// ⟨∇Γ, F⟩ = -⟨Γ, ∇·F⟩ from one H per component.
pub fn reconstruct_field(cfg: &ExperimentConfig, amplitudes: &[f64]) -> Result<Reconstruction> {
    let setup = cfg.setup()?;
    let d = setup.grid.dim();
    if amplitudes.len() != d {
        return Err(Error::InvalidParameter(format!("need {d} amplitudes, got {}", amplitudes.len())));
    }
    let eta = *setup.estimator.scales.last().expect("validated non-empty");
    let base = setup.estimator.test_function;
    let mut parts = Vec::new();
    for (axis, &a) in amplitudes.iter().enumerate() {
        let tf = TestFunction { amplitude: base.amplitude * a, ..base };
        let ecfg = EstimatorConfig { test_function: tf, axis, scales: vec![eta], ..setup.estimator.clone() };
        let est = Estimator::new(&setup.grid, &setup.kernel, Some(&setup.regularization), &ecfg)?;
        parts.push((est, GradPairing::new(&setup.grid, &tf, axis)));
    }
    let sampler = cfg.sampler(&setup)?;
    let beta = setup.chaos.beta;
    let results = experiment::run_replicas(cfg.mc.workers, cfg.mc.replicas, |r| {
        let field = sampler.sample(SeedStream::new(cfg.mc.seed, r));
        let chaos = build_chaos(&field, &setup.chaos).map_err(|e| e.in_replica(r, None))?;
        let mut h = Complex64::new(0.0, 0.0);
        let mut truth = 0.0;
        for (est, pairing) in &parts {
            h += est.evaluate(&chaos).map_err(|e| e.in_replica(r, Some(eta)))?[0];
            truth += pairing.apply(&field.values);
        }
        Ok(ReconstructionRow { replica: r, estimate: h * Complex64::new(0.0, 1.0 / beta), truth })
    })?;
    let rows: Vec<ReconstructionRow> = results.into_iter().collect::<Result<_>>()?;
    let num: f64 = rows.iter().map(|r| (r.estimate - r.truth).norm_sqr()).sum();
    let den: f64 = rows.iter().map(|r| r.truth * r.truth).sum();
    Ok(Reconstruction { amplitudes: amplitudes.to_vec(), eta, rows, rel_l2: (num / den).sqrt() })
}

/// Writes plot-ready CSVs (convergence table, residual correlation) from a saved report.
pub fn emit_plots(report_path: &Path, out_dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let text = std::fs::read_to_string(report_path)?;
    let rep: ExperimentReport = serde_json::from_str(&text)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    if !rep.scales.is_empty() {
        let p = out_dir.join("convergence.csv");
        std::fs::write(&p, rep.csv())?;
        written.push(p);
    }
    if !rep.correlation.is_empty() {
        let mut s = String::from("i,j,eta_i,eta_j,correlation\n");
        for (i, row) in rep.correlation.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                writeln!(s, "{i},{j},{:e},{:e},{c:e}", rep.scales[i].eta, rep.scales[j].eta).unwrap();
            }
        }
        let p = out_dir.join("correlation.csv");
        std::fs::write(&p, s)?;
        written.push(p);
    }
    if !rep.oracle_rows.is_empty() {
        let mut s = String::from("quantity,oracle,mc_value,oracle_value,stderr,z_score\n");
        for r in &rep.oracle_rows {
            writeln!(
                s,
                "\"{}\",\"{}\",{:e},{:e},{:e},{}",
                r.quantity, r.oracle, r.mc_value, r.oracle_value, r.stderr, r.z_score
            )
            .unwrap();
        }
        let p = out_dir.join("oracle_rows.csv");
        std::fs::write(&p, s)?;
        written.push(p);
    }
    Ok(written)
}
