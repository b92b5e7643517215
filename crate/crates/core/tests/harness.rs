use chaosgrad::harness::{
    cascade_demo, run_convergence_experiment, run_verification_suite, simulate_records, ExperimentConfig,
};
use std::path::PathBuf;

fn small() -> ExperimentConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/small_d2.toml");
    ExperimentConfig::load(&p).unwrap()
}

#[test]
fn single_replica_has_no_stderr() {
    let mut c = small();
    c.mc.replicas = 1;
    let rep = run_convergence_experiment(&c).unwrap();
    assert_eq!(rep.provenance.replicas, 1);
    assert!(rep.scales.iter().all(|s| s.stderr.is_none()));
    assert!(rep.csv().lines().skip(1).all(|l| l.contains(",n/a,")));
    assert_eq!(simulate_records(&c).unwrap().len(), 1);
}

#[test]
fn same_seed_same_body() {
    let mut c = small();
    c.mc.replicas = 40;
    let a = run_convergence_experiment(&c).unwrap();
    let b = run_convergence_experiment(&c).unwrap();
    assert_eq!(a.body_json(), b.body_json());
    c.mc.seed += 1;
    let d = run_convergence_experiment(&c).unwrap();
    assert_ne!(a.body_json(), d.body_json());
}

#[test]
fn records_are_in_replica_order_for_any_worker_count() {
    let mut c = small();
    c.mc.replicas = 30;
    c.mc.workers = 1;
    let a = simulate_records(&c).unwrap();
    c.mc.workers = 4;
    let b = simulate_records(&c).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().enumerate().all(|(i, r)| r.replica == i as u64));
}

#[test]
fn beta_zero_override_makes_chaos_rows_trivial() {
    // β = 0 is outside (0, √d); allowed only by override
    let mut c = small();
    c.chaos.beta = 0.0;
    assert!(c.validate().is_err());
    c.chaos.allow_out_of_range = true;
    c.mc.replicas = 50;
    let rep = run_verification_suite(&c).unwrap();
    for r in rep.oracle_rows.iter().filter(|r| r.quantity.contains("mu(")) {
        if r.quantity.contains("Gamma") {
            // μ ≡ 1 leaves E Γ(y) = 0, an ordinary Gaussian mean
            assert!(r.z_score.abs() <= 4.0, "{r:?}");
        } else {
            assert_eq!(r.z_score, 0.0, "{r:?}");
        }
    }
    assert!(rep.passed, "{}", rep.summary());
}

#[test]
fn every_oracle_row_names_its_oracle() {
    let mut c = small();
    c.mc.replicas = 100;
    let rep = run_verification_suite(&c).unwrap();
    assert!(rep.oracle_rows.len() >= 17);
    assert!(rep.oracle_rows.iter().all(|r| !r.oracle.is_empty() && r.z_score.is_finite()));
    assert!(rep.exact_checks.iter().all(|c| c.pass), "{}", rep.summary());
    assert_eq!(rep.provenance.config_hash, c.hash());
}

#[test]
fn cascade_demo_bound() {
    let d = cascade_demo(1.0, 12, 1).unwrap();
    assert!(d.max_cell_deviation <= 1e-12);
    assert!(d.max_field_shift_error <= 1e-12);
    assert_eq!(d.intervals_checked, 13);
}
