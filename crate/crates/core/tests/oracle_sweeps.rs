//! Scale sweeps of the continuum oracles (PureLog, d = 2).

use chaosgrad::covariance::PureLog;
use chaosgrad::grid::TestFunction;
use chaosgrad::oracle::{
    cross_term_quadrature, derivative_variance, offdiag_covariance_quadrature, second_moment_h_quadrature,
    QuadratureSpec,
};

fn tf(r: f64) -> TestFunction {
    TestFunction::new(2, &[0.5, 0.5], r, 1.0).unwrap()
}

// fixed lattice with `cells` cells per smallest scale
fn at(eta: f64, cells: f64) -> QuadratureSpec {
    QuadratureSpec { base_cell: eta / cells, level: 0, ..Default::default() }.unchecked()
}

#[test]
fn cross_term_approach_is_monotone() {
    let f = tf(0.15);
    let beta = 1.0;
    let target = -beta * beta * derivative_variance(&PureLog, &f, 0, &QuadratureSpec::default()).unwrap();
    let spec = at(0.05, 16.0);
    let c05 = cross_term_quadrature(&PureLog, &f, 0, 0.05, beta, &spec).unwrap();
    let c20 = cross_term_quadrature(&PureLog, &f, 0, 0.2, beta, &spec).unwrap();
    assert!((c05 - target).abs() < (c20 - target).abs(), "{c05} {c20} {target}");
}

#[test]
fn second_moment_bounded_as_eta_halves() {
    let f = tf(0.15);
    let mut prev = None;
    for eta in [0.2, 0.1, 0.05] {
        let v = second_moment_h_quadrature(&PureLog, &f, 0, eta, 1.0, &at(eta, 12.0)).unwrap();
        assert!(v > 0.0);
        if let Some(p) = prev {
            let ratio: f64 = v / p;
            assert!((0.5..=2.0).contains(&ratio), "eta {eta}: ratio {ratio}");
        }
        prev = Some(v);
    }
}

#[test]
fn offdiag_vanishes_without_beta() {
    let v = offdiag_covariance_quadrature(&PureLog, &tf(0.15), 0, 0.05, 0.2, 0.0, &at(0.05, 8.0)).unwrap();
    let scale = derivative_variance(&PureLog, &tf(0.15), 0, &QuadratureSpec::default()).unwrap();
    assert!(v.abs() < 1e-3 * scale, "{v}");
}

#[test]
fn offdiag_settles_as_small_scale_shrinks() {
    // with η₂ fixed the η₁ → 0 limit exists; successive values agree to a few percent
    let f = tf(0.15);
    let a = offdiag_covariance_quadrature(&PureLog, &f, 0, 0.05, 0.2, 1.0, &at(0.05, 16.0)).unwrap();
    let b = offdiag_covariance_quadrature(&PureLog, &f, 0, 0.025, 0.2, 1.0, &at(0.025, 16.0)).unwrap();
    assert!(a > 0.0 && b > 0.0);
    assert!((a - b).abs() < 0.1 * a.abs(), "{a} {b}");
}

// The literal sweep claim. With η₂ = 0.2 fixed the η₁ → 0 limit is the
// η₂-filtered value, well below β²·DV, and the measured approach is not
// monotone: ratios to β²·DV are 0.193 (η₁ = 0.02) and 0.203 (η₁ = 0.05).
#[test]
#[ignore = "claim does not hold at fixed eta2 = 0.2; see README, known deviations"]
fn offdiag_approaches_beta2_dv_in_small_scale() {
    let f = tf(0.15);
    let beta = 1.0;
    let target = beta * beta * derivative_variance(&PureLog, &f, 0, &QuadratureSpec::default()).unwrap();
    let v02 = offdiag_covariance_quadrature(&PureLog, &f, 0, 0.02, 0.2, beta, &at(0.02, 16.0)).unwrap();
    let v05 = offdiag_covariance_quadrature(&PureLog, &f, 0, 0.05, 0.2, beta, &at(0.05, 16.0)).unwrap();
    assert!((v02 - target).abs() < (v05 - target).abs(), "{v02} {v05} {target}");
}
