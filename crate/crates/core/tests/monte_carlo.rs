//! Monte Carlo against the oracles, outside the harness.

use chaosgrad::covariance::{GffSquare, Kernel, Regularization};
use chaosgrad::grid::{Grid, TestFunction};
use chaosgrad::oracle::{derivative_variance, girsanov_three_point, QuadratureSpec};
use chaosgrad::sampler::{CholeskySampler, FieldSampler, GffSpectralSampler, GradPairing, SeedStream};
use chaosgrad::{stats, Complex64};
use std::sync::Arc;

#[test]
fn derivative_variance_matches_empirical_variance() {
    let grid = Grid::new(2, 128, 1.0).unwrap();
    let sampler = GffSpectralSampler::new(&grid, 64).unwrap();
    let tf = TestFunction::new(2, &[0.5, 0.5], 0.08, 1.0).unwrap();
    let pairing = GradPairing::new(&grid, &tf, 0);
    let t2: Vec<f64> = (0..10_000)
        .map(|r| {
            let t = pairing.apply(&sampler.sample(SeedStream::new(21, r)).values);
            t * t
        })
        .collect();
    let k = GffSquare::new(1024).unwrap();
    let dv = derivative_variance(&k, &tf, 0, &QuadratureSpec::default()).unwrap();
    let e = stats::estimate(&t2);
    let z = stats::z_score(e.mean, dv, e.stderr);
    assert!(z.abs() <= 3.0, "mc {} ± {} vs {dv}: z = {z}", e.mean, e.stderr);
}

#[test]
fn three_point_identity_at_three_configurations() {
    let base: Kernel = Arc::new(GffSquare::new(1024).unwrap());
    let reg = Regularization::SpectralTruncation { modes: 64 };
    let kd = reg.apply(&base, 2).unwrap();
    let beta = 1.0;
    let configs = [
        ([0.5, 0.5, 0.0], [0.55, 0.5, 0.0], [0.52, 0.46, 0.0]),
        ([0.3, 0.6, 0.0], [0.33, 0.64, 0.0], [0.4, 0.55, 0.0]),
        ([0.45, 0.5, 0.0], [0.5, 0.62, 0.0], [0.5, 0.44, 0.0]),
    ];
    for (c, (x, u, y)) in configs.iter().enumerate() {
        let s = CholeskySampler::for_points(vec![*x, *u, *y], &base, reg, 2).unwrap();
        let vals: Vec<Complex64> = (0..100_000)
            .map(|r| {
                let f = s.sample(SeedStream::new(31 + c as u64, r));
                let var = f.variance.as_ref().unwrap();
                let mu = |i: usize| Complex64::from_polar((0.5 * beta * beta * var[i]).exp(), beta * f.values[i]);
                mu(0) * mu(1).conj() * f.values[2]
            })
            .collect();
        let oracle = girsanov_three_point(kd.as_ref(), x, u, y, beta);
        for (part, pick) in [("re", 0), ("im", 1)] {
            let xs: Vec<f64> = vals.iter().map(|v| if pick == 0 { v.re } else { v.im }).collect();
            let o = if pick == 0 { oracle.re } else { oracle.im };
            let e = stats::estimate(&xs);
            let z = stats::z_score(e.mean, o, e.stderr);
            assert!(z.abs() <= 3.0, "config {c} {part}: mc {} ± {} vs {o}: z = {z}", e.mean, e.stderr);
        }
    }
}
