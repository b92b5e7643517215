//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on any failure.
//!
//! Run with `cargo test --test acceptance`. Criterion 4 dominates the runtime
//! (R = 4000 replicas on the 3-torus, several minutes on one core).

use chaosgrad::chaos::{
    build_cascade, build_chaos, cascade_shift_report, period_shift, reflection_witness, ChaosParams,
};
use chaosgrad::covariance::{Kernel, PeriodicLog, PureLog};
use chaosgrad::estimator::{EstimatorConfig, EvalPath, Estimator, ScaleRule, WeightMode};
use chaosgrad::grid::{Grid, TestFunction};
use chaosgrad::harness::{run_convergence_experiment, run_verification_suite, ExperimentConfig, ExperimentReport};
use chaosgrad::mollifier::{profile, sphere_area, Mollifier};
use chaosgrad::oracle::four_point_e;
use chaosgrad::sampler::{FieldSampler, GffSpectralSampler, PeriodicSampler, SeedStream};
use chaosgrad::Complex64;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

fn config(name: &str) -> ExperimentConfig {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    ExperimentConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(ok: bool, failures: &mut Vec<String>, what: String) {
    if !ok {
        failures.push(what);
    }
}

fn rel(a: Complex64, b: Complex64) -> f64 {
    (a - b).norm() / a.norm().max(b.norm())
}

fn criterion_1() -> Outcome {
    let mut bad = Vec::new();
    let mut notes = Vec::new();

    // mollifier mass by an independent polar midpoint rule
    for d in [2usize, 3] {
        let m = Mollifier::new(d).unwrap();
        let k = 400_000;
        let dr = 0.5 / k as f64;
        let s: f64 = (0..k).map(|i| profile(0.5 + (i as f64 + 0.5) * dr) * (0.5 + (i as f64 + 0.5) * dr).powi(d as i32 - 1)).sum();
        let mass = sphere_area(d) * s * dr / m.normalization();
        check((mass - 1.0).abs() <= 1e-8, &mut bad, format!("d={d} mass {mass}"));
    }
    // Σ h^d ∂φ_η over the lattice annulus
    for (d, n, eta) in [(2usize, 128usize, 0.1), (2, 160, 0.05), (3, 80, 0.1)] {
        let g = Grid::new(d, n, 1.0).unwrap();
        let m = Mollifier::new(d).unwrap();
        let h = g.spacing();
        for axis in 0..d {
            let s: f64 = g
                .offsets_in_shell(0.5 * eta, eta)
                .iter()
                .map(|o| m.dphi_eta(eta, &[o[0] as f64 * h, o[1] as f64 * h, o[2] as f64 * h], axis))
                .sum::<f64>()
                * g.cell_volume();
            check(s.abs() <= 1e-10, &mut bad, format!("lattice ∫∂φ_η = {s:e} (d={d}, eta={eta})"));
        }
    }
    // E(x, y, 0, 0) = 1 exactly
    let z = [0.0; 3];
    for (x, y) in [([0.1, 0.2, 0.0], [0.4, -0.3, 0.0]), ([0.3, 0.3, 0.3], [0.31, 0.2, 0.05])] {
        let e = four_point_e(&PureLog, 1.2, &x, &y, &z, &z).unwrap();
        check(e == 1.0, &mut bad, format!("four_point_E(u=v=0) = {e}"));
    }
    // cascade: shifting one weight by 2π/β leaves M unchanged and moves A by 2π/β
    let mut dev: f64 = 0.0;
    let mut shift: f64 = 0.0;
    for beta in [0.5, 1.0, 1.3] {
        let c = build_cascade(12, 1.0, beta, SeedStream::new(1, 0)).unwrap();
        for level in 0..=12u32 {
            let r = cascade_shift_report(&c, level, (7 * level as u64) % (1 << level), period_shift(beta)).unwrap();
            dev = dev.max(r.max_cell_change);
            shift = shift.max(r.field_shift_error).max(r.field_change_outside);
        }
    }
    check(dev <= 1e-12, &mut bad, format!("cascade cell change {dev:e}"));
    check(shift <= 1e-12, &mut bad, format!("cascade field shift error {shift:e}"));
    notes.push(format!("cascade dev {dev:.1e}"));

    // Re μ under Γ → -Γ, on a GFF sample
    let g2 = Grid::new(2, 128, 1.0).unwrap();
    let gff = GffSpectralSampler::new(&g2, 64).unwrap();
    let field = gff.sample(SeedStream::new(5, 0));
    let tf = TestFunction::new(2, &[0.5, 0.5], 0.06, 1.0).unwrap();
    let r = reflection_witness(&field, &ChaosParams::new(1.0), &tf, 0).unwrap();
    check(r.max_real_part_diff <= 1e-12, &mut bad, format!("reflection {:e}", r.max_real_part_diff));

    // direct vs fast H_η: PureLog ExactC on the square, PeriodicLog C_δ on the 3-torus
    let pl: Kernel = Arc::new(PureLog);
    let chaos = build_chaos(&field, &ChaosParams::new(1.0)).unwrap();
    let cfg2 = EstimatorConfig {
        beta: 1.0,
        test_function: tf,
        axis: 0,
        scales: vec![0.2, 0.1],
        rule: ScaleRule::List,
        weight: WeightMode::ExactC,
        path: EvalPath::Direct,
    };
    let a = Estimator::new_unchecked(&g2, &pl, None, &cfg2).unwrap().evaluate(&chaos).unwrap();
    let b = Estimator::new_unchecked(&g2, &pl, None, &EstimatorConfig { path: EvalPath::FastConvolution, ..cfg2.clone() })
        .unwrap()
        .evaluate(&chaos)
        .unwrap();
    let mut worst: f64 = 0.0;
    for (x, y) in a.iter().zip(&b) {
        worst = worst.max(rel(*x, *y));
    }
    let g3 = Grid::torus(3, 40, 1.0).unwrap();
    let per = PeriodicSampler::new(&g3, 16).unwrap();
    let f3 = per.sample(SeedStream::new(5, 1));
    let c3 = build_chaos(&f3, &ChaosParams::new(1.0)).unwrap();
    let k3: Kernel = Arc::new(PeriodicLog::new(3, 16, 1.0).unwrap());
    let reg = per.regularization();
    let cfg3 = EstimatorConfig {
        beta: 1.0,
        test_function: TestFunction::new(3, &[0.5, 0.5, 0.5], 0.2, 1.0).unwrap(),
        axis: 2,
        scales: vec![0.4, 0.2],
        rule: ScaleRule::List,
        weight: WeightMode::RegularizedCDelta,
        path: EvalPath::Direct,
    };
    let a = Estimator::new_unchecked(&g3, &k3, Some(&reg), &cfg3).unwrap().evaluate(&c3).unwrap();
    let b = Estimator::new_unchecked(&g3, &k3, Some(&reg), &EstimatorConfig { path: EvalPath::FastConvolution, ..cfg3 })
        .unwrap()
        .evaluate(&c3)
        .unwrap();
    for (x, y) in a.iter().zip(&b) {
        worst = worst.max(rel(*x, *y));
    }
    check(worst <= 1e-10, &mut bad, format!("direct vs fast {worst:e}"));
    notes.push(format!("direct/fast {worst:.1e}"));

    // annulus locality: μ outside B(c, r + η) does not enter H_η
    let est = Estimator::new_unchecked(&g2, &pl, None, &cfg2).unwrap();
    let base = est.evaluate(&chaos).unwrap();
    let mut moved = chaos.clone();
    for (i, v) in moved.values.iter_mut().enumerate() {
        let p = g2.point(i);
        if ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2)).sqrt() > 0.06 + 0.2 + 0.02 {
            *v = Complex64::new(-3.0, 7.0);
        }
    }
    let after = est.evaluate(&moved).unwrap();
    let loc = base.iter().zip(&after).map(|(x, y)| rel(*x, *y)).fold(0.0, f64::max);
    check(loc <= 1e-12, &mut bad, format!("annulus locality {loc:e}"));

    Outcome { pass: bad.is_empty(), detail: if bad.is_empty() { notes.join(", ") } else { bad.join("; ") } }
}

fn is_girsanov(q: &str) -> bool {
    q.contains("mu(")
}

fn criterion_2(rep: &ExperimentReport) -> Outcome {
    let mut bad = Vec::new();
    let rows: Vec<_> = rep.oracle_rows.iter().filter(|r| is_girsanov(&r.quantity)).collect();
    let zmax = rows.iter().map(|r| r.z_score.abs()).fold(0.0, f64::max);
    for r in &rows {
        check(r.z_score.abs() <= 4.0, &mut bad, format!("{}: z = {:.2}", r.quantity, r.z_score));
    }
    check(rows.len() == 14, &mut bad, format!("{} Girsanov rows", rows.len()));
    let within3 = rows.iter().filter(|r| r.z_score.abs() <= 3.0).count();

    // negative control: oracle kernel with g offset by +10
    let mut cfg = config("default.toml");
    cfg.mc.replicas = 2000;
    cfg.verify.oracle_g_offset = 10.0;
    let ctl = run_verification_suite(&cfg).unwrap();
    let ctl_fail: Vec<_> = ctl
        .oracle_rows
        .iter()
        // the non-zero components: Re of the two-point, Im of the three-point moments
        .filter(|r| {
            (r.oracle.starts_with("girsanov_two") && r.quantity.starts_with("Re"))
                || (r.oracle.starts_with("girsanov_three") && r.quantity.starts_with("Im"))
        })
        .collect();
    let control_ok = !ctl.passed && ctl_fail.len() == 6 && ctl_fail.iter().all(|r| r.z_score.abs() > 4.0);
    check(control_ok, &mut bad, "negative control did not fail".into());
    let detail = format!(
        "max |z| = {zmax:.2} over {} rows ({within3} within 3 sigma); control fails with min |z| = {:.1}",
        rows.len(),
        ctl_fail.iter().map(|r| r.z_score.abs()).fold(f64::INFINITY, f64::min)
    );
    Outcome { pass: bad.is_empty(), detail: if bad.is_empty() { detail } else { format!("{}; {detail}", bad.join("; ")) } }
}

fn criterion_3(rep: &ExperimentReport) -> Outcome {
    let find = |p: &str| rep.oracle_rows.iter().find(|r| r.quantity.starts_with(p));
    let mut bad = Vec::new();
    let mut notes = Vec::new();
    for p in ["E <d Gamma, f>^2", "E |H_eta|^2"] {
        match find(p) {
            Some(r) => {
                check(r.z_score.abs() <= 3.0, &mut bad, format!("{p}: z = {:.2}", r.z_score));
                notes.push(format!("{p}: mc {:.4e} oracle {:.4e} z {:.2}", r.mc_value, r.oracle_value, r.z_score));
            }
            None => bad.push(format!("{p}: row missing")),
        }
    }
    Outcome { pass: bad.is_empty(), detail: if bad.is_empty() { notes.join("; ") } else { bad.join("; ") } }
}

fn criterion_4() -> Outcome {
    let rep = run_convergence_experiment(&config("converge_d3.toml")).unwrap();
    let s = &rep.scales;
    let mut bad = Vec::new();
    for w in s.windows(2) {
        let drop = w[0].rel_l2 - w[1].rel_l2;
        let se = (w[0].stderr.unwrap().powi(2) + w[1].stderr.unwrap().powi(2)).sqrt();
        check(drop > 2.0 * se, &mut bad, format!("eta {} -> {}: drop {drop:.4} vs 2 se {:.4}", w[0].eta, w[1].eta, 2.0 * se));
    }
    let detail = s.iter().map(|r| format!("eta {} rel_L2 {:.4}±{:.4}", r.eta, r.rel_l2, r.stderr.unwrap())).collect::<Vec<_>>().join(", ");
    Outcome { pass: bad.is_empty(), detail: if bad.is_empty() { detail } else { format!("{}; {detail}", bad.join("; ")) } }
}

fn criterion_5() -> Outcome {
    let rep = run_convergence_experiment(&config("converge_d2.toml")).unwrap();
    let s = &rep.scales;
    let mut bad = Vec::new();
    let ratios: Vec<f64> = s.windows(2).map(|w| w[1].rel_l2 / w[0].rel_l2).collect();
    for r in &ratios {
        check(*r > 0.7, &mut bad, format!("successive ratio {r:.3} <= 0.7"));
    }
    let gain = rep.averaging_gain.clone().unwrap();
    let se = gain.stderr.unwrap();
    check(gain.n == 3 && gain.difference < -2.0 * se, &mut bad, format!("A_3 gain {:.4} ± {se:.4}", gain.difference));
    let corr = rep.correlation[0][s.len() - 1];
    check(corr.abs() <= 0.2, &mut bad, format!("corr(eta_1, eta_3) = {corr:.3}"));
    let detail = format!(
        "ratios {:?}, A_3 {:.4} vs best single {:.4} (diff {:.4} ± {se:.4}), corr {corr:.3}",
        ratios.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
        rep.averaged.last().unwrap().rel_l2,
        s[gain.best_scale_index].rel_l2,
        gain.difference
    );
    Outcome { pass: bad.is_empty(), detail: if bad.is_empty() { detail } else { format!("{}; {detail}", bad.join("; ")) } }
}

fn criterion_6() -> Outcome {
    let mut bad = Vec::new();
    let dir = tempfile::tempdir().unwrap();
    for (name, replicas) in [("converge_d2.toml", 120usize), ("default.toml", 150)] {
        let mut bodies = Vec::new();
        for workers in [1usize, 3, 0] {
            let mut cfg = config(name);
            cfg.mc.replicas = replicas;
            cfg.mc.workers = workers;
            cfg.output.dir = Some(dir.path().join(format!("{name}-{workers}")));
            let rep = if name == "default.toml" {
                run_verification_suite(&cfg).unwrap()
            } else {
                run_convergence_experiment(&cfg).unwrap()
            };
            let path = rep.write(&cfg.output_dir()).unwrap();
            bodies.push(std::fs::read(path).unwrap());
        }
        check(bodies.windows(2).all(|w| w[0] == w[1]), &mut bad, format!("{name}: bodies differ across worker counts"));
    }
    Outcome {
        pass: bad.is_empty(),
        detail: if bad.is_empty() { "convergence and verification bodies byte-identical for workers 1, 3, default".into() } else { bad.join("; ") },
    }
}

fn main() {
    // `cargo test -- --list` and friends: nothing to enumerate
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut all = true;
    let mut report = |n: u32, title: &str, f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        all &= o.pass;
        println!(
            "criterion {n} [{title}]: {} ({:.1}s) {}",
            if o.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            o.detail
        );
    };
    report(1, "exact identities", &criterion_1);
    let verify = run_verification_suite(&config("default.toml")).unwrap();
    report(2, "Girsanov Monte Carlo", &|| criterion_2(&verify));
    report(3, "variance oracles", &|| criterion_3(&verify));
    report(4, "d=3 convergence trend", &criterion_4);
    report(5, "d=2 resonance and averaging", &criterion_5);
    report(6, "reproducibility", &criterion_6);
    if !all {
        std::process::exit(1);
    }
}
