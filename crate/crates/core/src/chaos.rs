//! Imaginary chaos μ_δ = exp(iβΓ_δ + β²σ²/2) and the dyadic imaginary cascade.

use crate::grid::{Grid, TestFunction};
use crate::sampler::{grad_pairing, FieldSample, Layout, SeedStream};
use crate::{Complex64, Error, Result};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChaosParams {
    pub beta: f64,
    /// Permit β outside (0, √d) with a warning.
    pub allow_out_of_range: bool,
}

impl ChaosParams {
    pub fn new(beta: f64) -> Self {
        ChaosParams { beta, allow_out_of_range: false }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        let upper = (dim as f64).sqrt();
        if self.beta > 0.0 && self.beta < upper {
            return Ok(());
        }
        if self.allow_out_of_range && self.beta.is_finite() {
            log::warn!("beta = {} outside (0, {upper:.4}); continuing by override", self.beta);
            return Ok(());
        }
        Err(Error::InvalidParameter(format!("beta = {} outside (0, √{dim})", self.beta)))
    }
}

#[derive(Clone, Debug)]
pub struct ChaosSample {
    pub grid: Grid,
    pub values: Vec<Complex64>,
    pub beta: f64,
    pub seed: SeedStream,
}

/// μ(x) = exp(iβΓ(x) + β²σ²(x)/2) pointwise.
pub fn build_chaos(field: &FieldSample, params: &ChaosParams) -> Result<ChaosSample> {
    let grid = match &field.layout {
        Layout::Grid(g) => *g,
        Layout::Points(_) => return Err(Error::InvalidParameter("chaos needs a grid field".into())),
    };
    let var = field.variance.as_ref().ok_or(Error::MissingVariance)?;
    let b = params.beta;
    let values = field
        .values
        .iter()
        .zip(var.iter())
        .map(|(g, s2)| Complex64::from_polar((0.5 * b * b * s2).exp(), b * g))
        .collect();
    Ok(ChaosSample { grid, values, beta: b, seed: field.seed })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReflectionReport {
    /// max |Re μ(Γ) - Re μ(-Γ)|
    pub max_real_part_diff: f64,
    /// |T(Γ) + T(-Γ)|
    pub antisymmetry_residual: f64,
    /// |T(Γ)|
    pub pairing_magnitude: f64,
}

/// Γ and -Γ share Re μ but have opposite gradient pairings.
pub fn reflection_witness(
    field: &FieldSample,
    params: &ChaosParams,
    tf: &TestFunction,
    axis: usize,
) -> Result<ReflectionReport> {
    let neg = field.negated();
    let a = build_chaos(field, params)?;
    let b = build_chaos(&neg, params)?;
    let max_real_part_diff =
        a.values.iter().zip(&b.values).map(|(x, y)| (x.re - y.re).abs()).fold(0.0, f64::max);
    let t = grad_pairing(field, tf, axis)?;
    let tn = grad_pairing(&neg, tf, axis)?;
    Ok(ReflectionReport { max_real_part_diff, antisymmetry_residual: (t + tn).abs(), pairing_magnitude: t.abs() })
}

pub const MAX_CASCADE_LEVELS: u32 = 24;

/// Dyadic cascade on [0, 1]: weights X_I ~ N(0, σ_c²) on every dyadic interval
/// down to `levels`, cell values M(x) = Π_{I ∋ x} e^{iβX_I}.
///
/// Intervals are stored in heap order: level l, index i ↦ 2^l - 1 + i.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeRealization {
    pub levels: u32,
    pub sigma: f64,
    pub beta: f64,
    pub weights: Vec<f64>,
    /// M on the 2^levels finest cells.
    pub cells: Vec<Complex64>,
    /// A(x) = Σ_{I ∋ x} X_I on the finest cells.
    pub field: Vec<f64>,
}

fn heap_index(level: u32, index: u64) -> usize {
    ((1u64 << level) - 1 + index) as usize
}

impl CascadeRealization {
    fn assemble(levels: u32, sigma: f64, beta: f64, weights: Vec<f64>) -> Self {
        // prefix products level by level: fixed association order
        let mut m = vec![Complex64::from_polar(1.0, beta * weights[0])];
        let mut a = vec![weights[0]];
        for l in 1..=levels {
            let width = 1usize << l;
            let mut m_next = Vec::with_capacity(width);
            let mut a_next = Vec::with_capacity(width);
            for i in 0..width {
                let x = weights[heap_index(l, i as u64)];
                m_next.push(m[i / 2] * Complex64::from_polar(1.0, beta * x));
                a_next.push(a[i / 2] + x);
            }
            m = m_next;
            a = a_next;
        }
        CascadeRealization { levels, sigma, beta, weights, cells: m, field: a }
    }

    pub fn weight(&self, level: u32, index: u64) -> Result<f64> {
        check_interval(self.levels, level, index)?;
        Ok(self.weights[heap_index(level, index)])
    }

    /// Finest cells contained in interval (level, index).
    pub fn cells_under(&self, level: u32, index: u64) -> std::ops::Range<usize> {
        let span = 1usize << (self.levels - level);
        (index as usize * span)..((index as usize + 1) * span)
    }
}

fn check_interval(levels: u32, level: u32, index: u64) -> Result<()> {
    if level > levels || index >= (1u64 << level) {
        return Err(Error::InvalidInterval { level, index });
    }
    Ok(())
}

pub fn build_cascade(levels: u32, sigma: f64, beta: f64, seed: SeedStream) -> Result<CascadeRealization> {
    if levels > MAX_CASCADE_LEVELS {
        return Err(Error::InvalidParameter(format!("cascade depth {levels} exceeds {MAX_CASCADE_LEVELS}")));
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut rng = seed.rng();
    let count = (1usize << (levels + 1)) - 1;
    let weights = (0..count).map(|_| normal.sample(&mut rng)).collect();
    Ok(CascadeRealization::assemble(levels, sigma, beta, weights))
}

/// New realization with X_I += amount and everything downstream recomputed.
pub fn shift_cascade_weight(
    c: &CascadeRealization,
    level: u32,
    index: u64,
    amount: f64,
) -> Result<CascadeRealization> {
    check_interval(c.levels, level, index)?;
    let mut w = c.weights.clone();
    w[heap_index(level, index)] += amount;
    Ok(CascadeRealization::assemble(c.levels, c.sigma, c.beta, w))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeShiftReport {
    pub level: u32,
    pub index: u64,
    pub amount: f64,
    pub max_cell_change: f64,
    /// max over cells under I of |ΔA - amount|
    pub field_shift_error: f64,
    /// max over cells outside I of |ΔA|
    pub field_change_outside: f64,
}

/// Shift one weight by `amount` and measure what changed.
pub fn cascade_shift_report(
    c: &CascadeRealization,
    level: u32,
    index: u64,
    amount: f64,
) -> Result<CascadeShiftReport> {
    let s = shift_cascade_weight(c, level, index, amount)?;
    let max_cell_change = c.cells.iter().zip(&s.cells).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
    let inside = c.cells_under(level, index);
    let mut field_shift_error: f64 = 0.0;
    let mut field_change_outside: f64 = 0.0;
    for i in 0..c.cells.len() {
        let d = s.field[i] - c.field[i];
        if inside.contains(&i) {
            field_shift_error = field_shift_error.max((d - amount).abs());
        } else {
            field_change_outside = field_change_outside.max(d.abs());
        }
    }
    Ok(CascadeShiftReport { level, index, amount, max_cell_change, field_shift_error, field_change_outside })
}

/// The invariance-breaking shift 2π/β.
pub fn period_shift(beta: f64) -> f64 {
    2.0 * PI / beta
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariance::Regularization;
    use crate::sampler::{GffSpectralSampler, FieldSampler};
    use crate::stats;
    use proptest::prelude::*;

    fn field() -> FieldSample {
        let g = Grid::new(2, 32, 1.0).unwrap();
        GffSpectralSampler::new(&g, 16).unwrap().sample(SeedStream::new(1, 0))
    }

    #[test]
    fn beta_zero_is_one() {
        let f = field();
        let p = ChaosParams { beta: 0.0, allow_out_of_range: true };
        let c = build_chaos(&f, &p).unwrap();
        assert!(c.values.iter().all(|v| *v == Complex64::new(1.0, 0.0)));
        assert!(ChaosParams::new(0.0).validate(2).is_err());
        assert!(ChaosParams::new(1.5).validate(2).is_err());
        assert!(ChaosParams::new(1.5).validate(3).is_ok());
    }

    #[test]
    fn modulus_identity() {
        let f = field();
        let c = build_chaos(&f, &ChaosParams::new(1.0)).unwrap();
        let var = f.variance.as_ref().unwrap();
        for (m, s2) in c.values.iter().zip(var.iter()) {
            let expect = (0.5 * s2).exp();
            assert!((m.norm() - expect).abs() <= 1e-12 * expect);
        }
    }

    #[test]
    fn missing_variance_rejected() {
        let mut f = field();
        f.variance = None;
        assert!(matches!(build_chaos(&f, &ChaosParams::new(1.0)), Err(Error::MissingVariance)));
    }

    #[test]
    fn chaos_mean_is_one() {
        let g = Grid::new(2, 32, 1.0).unwrap();
        let s = GffSpectralSampler::new(&g, 16).unwrap();
        let p = ChaosParams::new(1.0);
        let idx = [100, 300, 528, 700, 901];
        let samples: Vec<Vec<Complex64>> = (0..10_000)
            .map(|i| {
                let c = build_chaos(&s.sample(SeedStream::new(2, i)), &p).unwrap();
                idx.iter().map(|&j| c.values[j]).collect()
            })
            .collect();
        for k in 0..idx.len() {
            let re: Vec<f64> = samples.iter().map(|v| v[k].re).collect();
            let im: Vec<f64> = samples.iter().map(|v| v[k].im).collect();
            let (er, ei) = (stats::estimate(&re), stats::estimate(&im));
            assert!((er.mean - 1.0).abs() <= 3.0 * er.stderr, "re {} ± {}", er.mean, er.stderr);
            assert!(ei.mean.abs() <= 3.0 * ei.stderr, "im {} ± {}", ei.mean, ei.stderr);
        }
    }

    #[test]
    fn reflection_examples() {
        let f = field();
        let tf = TestFunction::new(2, &[0.5, 0.5], 0.2, 1.0).unwrap();
        let r = reflection_witness(&f, &ChaosParams::new(1.0), &tf, 0).unwrap();
        assert!(r.max_real_part_diff <= 1e-12);
        assert!(r.antisymmetry_residual <= 1e-12);
        assert!(r.pairing_magnitude > 0.0);
        let _ = Regularization::SpectralTruncation { modes: 16 };
    }

    #[test]
    fn cascade_level_zero() {
        let c = build_cascade(0, 1.0, 1.3, SeedStream::new(1, 0)).unwrap();
        assert_eq!(c.cells.len(), 1);
        assert_eq!(c.cells[0], Complex64::from_polar(1.0, 1.3 * c.weights[0]));
    }

    #[test]
    fn cascade_shift_by_period() {
        let beta = 1.0;
        let c = build_cascade(12, 1.0, beta, SeedStream::new(1, 0)).unwrap();
        for (l, i) in [(0, 0), (3, 5), (12, 4095)] {
            let r = cascade_shift_report(&c, l, i, period_shift(beta)).unwrap();
            assert!(r.max_cell_change <= 1e-12, "{r:?}");
            assert!(r.field_shift_error <= 1e-12);
            assert_eq!(r.field_change_outside, 0.0);
        }
        let r = cascade_shift_report(&c, 3, 5, PI / beta).unwrap();
        assert!((r.max_cell_change - 2.0).abs() < 1e-12);
        assert_eq!(shift_cascade_weight(&c, 4, 2, 0.0).unwrap(), c);
        assert!(matches!(shift_cascade_weight(&c, 13, 0, 1.0), Err(Error::InvalidInterval { .. })));
        assert!(matches!(shift_cascade_weight(&c, 2, 4, 1.0), Err(Error::InvalidInterval { .. })));
    }

    #[test]
    fn cascade_phase_matches_field() {
        let beta = 0.8;
        let c = build_cascade(10, 1.0, beta, SeedStream::new(4, 0)).unwrap();
        for i in (0..1024).step_by(10).take(100) {
            assert!((c.cells[i].norm() - 1.0).abs() <= 1e-12);
            let d = c.cells[i].arg() - beta * c.field[i];
            let wrapped = d - 2.0 * PI * (d / (2.0 * PI)).round();
            assert!(wrapped.abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn real_part_reflection_invariant(seed in 0u64..1000, beta in 0.1f64..1.4) {
            let g = Grid::new(2, 16, 1.0).unwrap();
            let f = GffSpectralSampler::new(&g, 8).unwrap().sample(SeedStream::new(seed, 0));
            let a = build_chaos(&f, &ChaosParams::new(beta)).unwrap();
            let b = build_chaos(&f.negated(), &ChaosParams::new(beta)).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x.re - y.re).abs() <= 1e-12 * x.norm().max(1.0));
                prop_assert!((x.im + y.im).abs() <= 1e-12 * x.norm().max(1.0));
            }
        }

        #[test]
        fn shift_invariance_any_interval(seed in 0u64..200, beta in 0.2f64..2.0, level in 0u32..9, frac in 0.0f64..1.0) {
            let c = build_cascade(8, 1.0, beta, SeedStream::new(seed, 1)).unwrap();
            let level = level.min(8);
            let index = ((1u64 << level) as f64 * frac) as u64;
            let r = cascade_shift_report(&c, level, index, period_shift(beta)).unwrap();
            prop_assert!(r.max_cell_change <= 1e-12);
        }
    }
}
