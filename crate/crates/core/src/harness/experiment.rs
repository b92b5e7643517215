//! Monte Carlo convergence sweeps over the scale list.

use super::config::ExperimentConfig;
use super::report::{AverageRow, AveragingGain, ExperimentReport, Provenance, ScaleRow};
use crate::chaos::build_chaos;
use crate::estimator::{paired_difference, reconstruction_error, residual_correlation, ErrorMode, EstimateRecord, Estimator};
use crate::sampler::{GradPairing, SeedStream};
use crate::{stats, Error, Result};
use rayon::prelude::*;
use std::time::Instant;

pub(crate) fn provenance(cfg: &ExperimentConfig) -> Provenance {
    Provenance {
        config_hash: cfg.hash(),
        seed: cfg.mc.seed,
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        replicas: cfg.mc.replicas,
    }
}

/// Runs `f` over replica indices on a pool of `workers` threads and returns
/// results in index order.
pub(crate) fn run_replicas<T, F>(workers: usize, replicas: usize, f: F) -> Result<Vec<Result<T>>>
where
    T: Send,
    F: Fn(u64) -> Result<T> + Sync,
{
    let mut b = rayon::ThreadPoolBuilder::new();
    if workers > 0 {
        b = b.num_threads(workers);
    }
    let pool = b.build().map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(|| (0..replicas as u64).into_par_iter().map(&f).collect()))
}

/// Per-replica records of a convergence sweep, in replica order.
pub fn simulate_records(cfg: &ExperimentConfig) -> Result<Vec<EstimateRecord>> {
    let setup = cfg.setup()?;
    let sampler = cfg.sampler(&setup)?;
    let est = Estimator::new(&setup.grid, &setup.kernel, Some(&setup.regularization), &setup.estimator)?;
    let truth = GradPairing::new(&setup.grid, &setup.estimator.test_function, setup.estimator.axis);
    let scales = setup.estimator.scales.clone();
    let results = run_replicas(cfg.mc.workers, cfg.mc.replicas, |r| {
        let field = sampler.sample(SeedStream::new(cfg.mc.seed, r));
        let chaos = build_chaos(&field, &setup.chaos).map_err(|e| e.in_replica(r, None))?;
        let values = est.evaluate(&chaos).map_err(|e| e.in_replica(r, None))?;
        for (v, &eta) in values.iter().zip(&scales) {
            if !(v.re.is_finite() && v.im.is_finite()) {
                return Err(Error::InvalidParameter("non-finite estimate".into()).in_replica(r, Some(eta)));
            }
        }
        Ok(EstimateRecord::new(r, values, truth.apply(&field.values)))
    })?;
    let mut records = Vec::with_capacity(results.len());
    for res in results {
        match res {
            Ok(rec) => records.push(rec),
            Err(e) => {
                flush_partial(cfg, &records);
                return Err(e);
            }
        }
    }
    Ok(records)
}

fn flush_partial(cfg: &ExperimentConfig, records: &[EstimateRecord]) {
    let dir = cfg.output_dir();
    let write = || -> Result<()> {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("partial_records.json"), serde_json::to_string(records)?)?;
        Ok(())
    };
    if let Err(e) = write() {
        log::error!("could not flush partial records: {e}");
    } else {
        log::warn!("{} completed replicas flushed to {}", records.len(), dir.display());
    }
}

/// Reduces replica records to a convergence report.
pub fn convergence_report(cfg: &ExperimentConfig, scales: &[f64], records: &[EstimateRecord]) -> ExperimentReport {
    let beta = cfg.chaos.beta;
    let batches = cfg.mc.batches;
    let mut rep = ExperimentReport::new("convergence", provenance(cfg));
    let mean = |f: &dyn Fn(&EstimateRecord) -> crate::Complex64| {
        stats::mean_complex(&records.iter().map(f).collect::<Vec<_>>())
    };
    for (i, &eta) in scales.iter().enumerate() {
        let e = reconstruction_error(records, beta, ErrorMode::PerScale(i), batches);
        let m = mean(&|r| r.per_scale[i]);
        rep.scales.push(ScaleRow { eta, mean_h_re: m.re, mean_h_im: m.im, rel_l2: e.rel_l2, stderr: e.stderr });
    }
    for n in 2..=scales.len() {
        let e = reconstruction_error(records, beta, ErrorMode::Averaged(n), batches);
        let m = mean(&|r| r.averages[n - 1]);
        rep.averaged.push(AverageRow { n, mean_h_re: m.re, mean_h_im: m.im, rel_l2: e.rel_l2, stderr: e.stderr });
    }
    if scales.len() >= 2 {
        let best = (0..scales.len())
            .min_by(|&a, &b| rep.scales[a].rel_l2.total_cmp(&rep.scales[b].rel_l2))
            .unwrap();
        let n = scales.len();
        let d = paired_difference(records, beta, ErrorMode::Averaged(n), ErrorMode::PerScale(best), batches);
        rep.averaging_gain = Some(AveragingGain { n, best_scale_index: best, difference: d.rel_l2, stderr: d.stderr });
    }
    if records.len() >= 2 {
        rep.correlation = residual_correlation(records, beta);
    }
    rep
}

/// Sample, build chaos, estimate at every scale, record the truth; then reduce.
pub fn run_convergence_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let start = Instant::now();
    let setup = cfg.setup()?;
    let records = simulate_records(cfg)?;
    let mut rep = convergence_report(cfg, &setup.estimator.scales, &records);
    rep.finalize();
    rep.runtime_seconds = start.elapsed().as_secs_f64();
    if cfg.output.records {
        let dir = cfg.output_dir();
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("convergence_records.json"), serde_json::to_string(&records)?)?;
    }
    Ok(rep)
}
