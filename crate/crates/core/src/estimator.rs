//! The reconstruction estimator H_η, the scale average A_N and error metrics.
//!
//! H_η = h^{2d} Σ_x Σ_{η/2 ≤ |x-u| ≤ η} f(x) μ(x) conj(μ(u)) W(x,u) ∂_k φ_η(x-u)

use crate::chaos::ChaosSample;
use crate::covariance::{Kernel, Regularization};
use crate::fft::{good_size, FftNd};
use crate::grid::{Boundary, Grid, Point, TestFunction};
use crate::mollifier::Mollifier;
use crate::stats;
use crate::{Complex64, Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// e^{-β² C(x,u)} with the kernel as given.
    ExactC,
    /// e^{-β² C_δ(x,u)} with the field's regularized covariance.
    RegularizedCDelta,
    /// |x-u|^{β²} e^{-β² g(x,x)}.
    FrozenG,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalPath {
    Direct,
    FastConvolution,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// Explicit list.
    List,
    /// ε_n = 2^{-K^n}, n = 1, 2, ...
    PaperDoubleExp { k: f64 },
    /// ε_n = η₀ ρ^{n-1}.
    Geometric { eta0: f64, ratio: f64 },
}

impl ScaleRule {
    pub fn label(&self) -> String {
        match self {
            ScaleRule::List => "list".into(),
            ScaleRule::PaperDoubleExp { k } => format!("double_exp(K={k})"),
            ScaleRule::Geometric { eta0, ratio } => format!("geometric(eta0={eta0},rho={ratio})"),
        }
    }

    pub fn generate(&self, count: usize) -> Vec<f64> {
        match *self {
            ScaleRule::List => Vec::new(),
            ScaleRule::PaperDoubleExp { k } => paper_double_exp_scales(k, count),
            ScaleRule::Geometric { eta0, ratio } => geometric_scales(eta0, ratio, count),
        }
    }
}

pub fn paper_double_exp_scales(k: f64, count: usize) -> Vec<f64> {
    (1..=count).map(|n| (-k.powi(n as i32)).exp2()).collect()
}

pub fn geometric_scales(eta0: f64, ratio: f64, count: usize) -> Vec<f64> {
    (0..count).map(|n| eta0 * ratio.powi(n as i32)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub beta: f64,
    pub test_function: TestFunction,
    /// Zero-based coordinate of the derivative.
    pub axis: usize,
    /// Strictly decreasing.
    pub scales: Vec<f64>,
    pub rule: ScaleRule,
    pub weight: WeightMode,
    pub path: EvalPath,
}

impl EstimatorConfig {
    /// Scale resolution, ExactC bias control and support distance rules.
    pub fn validate(&self, grid: &Grid, regularization: Option<&Regularization>) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::InvalidParameter("empty scale list".into()));
        }
        if self.axis >= grid.dim() {
            return Err(Error::InvalidParameter(format!("coordinate {} out of range", self.axis + 1)));
        }
        if !self.scales.windows(2).all(|w| w[0] > w[1]) || self.scales.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::InvalidParameter("scales must be positive and strictly decreasing".into()));
        }
        let h = grid.spacing();
        for &eta in &self.scales {
            if eta < 8.0 * h {
                return Err(Error::ScaleUnresolved { eta, h });
            }
            if self.weight == WeightMode::ExactC {
                if let Some(reg) = regularization {
                    let delta = reg.effective_delta();
                    if eta < 20.0 * delta {
                        return Err(Error::InvalidParameter(format!(
                            "ExactC weights need eta >= 20 delta (eta = {eta}, delta = {delta})"
                        )));
                    }
                }
            }
        }
        self.test_function.check_inside(grid)?;
        let max_eta = self.scales[0];
        match grid.boundary() {
            Boundary::Box => {
                let d = grid.distance_to_boundary(&self.test_function.center) - self.test_function.radius;
                if d <= 2.0 * max_eta {
                    return Err(Error::SupportViolation(format!(
                        "dist(supp f, boundary) = {d:.4} must exceed 2 max eta = {}",
                        2.0 * max_eta
                    )));
                }
            }
            Boundary::Torus => {
                if 2.0 * max_eta >= grid.side() {
                    return Err(Error::SupportViolation("annulus wraps around the torus".into()));
                }
            }
        }
        Ok(())
    }
}

/// Per-replica estimator output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub replica: u64,
    pub per_scale: Vec<Complex64>,
    /// A_N for N = 1..=scales.
    pub averages: Vec<Complex64>,
    /// T = ⟨∂Γ, f⟩.
    pub truth: f64,
}

impl EstimateRecord {
    pub fn new(replica: u64, per_scale: Vec<Complex64>, truth: f64) -> Self {
        let averages = (1..=per_scale.len()).map(|n| compute_a_n(&per_scale, n)).collect();
        EstimateRecord { replica, per_scale, averages, truth }
    }

    /// v + iβT.
    pub fn residual(&self, value: Complex64, beta: f64) -> Complex64 {
        value + Complex64::new(0.0, beta * self.truth)
    }
}

/// (1/N) Σ_{n ≤ N} H_{ε_n}.
pub fn compute_a_n(values: &[Complex64], n: usize) -> Complex64 {
    assert!(n >= 1 && n <= values.len(), "N = {n} out of range");
    values[..n].iter().sum::<Complex64>() / n as f64
}

struct DirectScale {
    // CSR layout over support points x
    rows: Vec<usize>,
    starts: Vec<usize>,
    cols: Vec<u32>,
    coeffs: Vec<f64>,
}

struct FastShared {
    dims: Vec<usize>,
    fft: FftNd,
    // padded index of every grid point
    embed: Vec<usize>,
    // h^{2d}-free source weights f(x) a(x) on the grid
    source: Vec<f64>,
}

/// Precomputed plans for every scale; cheap to evaluate per replica.
pub struct Estimator {
    grid: Grid,
    config: EstimatorConfig,
    direct: Vec<DirectScale>,
    fast: Option<FastShared>,
    // conj(K̂_η) / N per scale
    spectra: Vec<Vec<Complex64>>,
}

impl Estimator {
    pub fn new(grid: &Grid, kernel: &Kernel, regularization: Option<&Regularization>, config: &EstimatorConfig) -> Result<Self> {
        Self::build(grid, kernel, regularization, config, true)
    }

    /// Like `new` but without the experiment-level config rules; only the
    /// per-call resolution and halo rules of H_η apply.
    pub fn new_unchecked(
        grid: &Grid,
        kernel: &Kernel,
        regularization: Option<&Regularization>,
        config: &EstimatorConfig,
    ) -> Result<Self> {
        Self::build(grid, kernel, regularization, config, false)
    }

    fn build(
        grid: &Grid,
        kernel: &Kernel,
        regularization: Option<&Regularization>,
        config: &EstimatorConfig,
        full_check: bool,
    ) -> Result<Self> {
        if full_check {
            config.validate(grid, regularization)?;
        }
        let h = grid.spacing();
        for &eta in &config.scales {
            if eta < 8.0 * h {
                return Err(Error::ScaleUnresolved { eta, h });
            }
            check_halo(grid, &config.test_function, eta)?;
        }
        let weight_kernel: Kernel = match config.weight {
            WeightMode::ExactC | WeightMode::FrozenG => kernel.clone(),
            WeightMode::RegularizedCDelta => {
                let reg = regularization.ok_or_else(|| {
                    Error::InvalidParameter("RegularizedCDelta weights need a regularization".into())
                })?;
                reg.apply(kernel, grid.dim())?
            }
        };
        if config.weight == WeightMode::FrozenG && kernel.g_diagonal(&config.test_function.center).is_none() {
            return Err(Error::Unsupported(format!("{} exposes no g(x, x) for FrozenG", kernel.name())));
        }
        let weights = Weights { grid: *grid, kernel: weight_kernel, mode: config.weight, beta: config.beta };
        let mollifier = Mollifier::new(grid.dim())?;
        let mut est = Estimator { grid: *grid, config: config.clone(), direct: Vec::new(), fast: None, spectra: Vec::new() };
        match config.path {
            EvalPath::Direct => {
                for &eta in &config.scales {
                    est.direct.push(est.direct_plan(&weights, &mollifier, eta)?);
                }
            }
            EvalPath::FastConvolution => {
                if !weights.translation_invariant() {
                    return Err(Error::Unsupported(
                        "fast path needs a translation-invariant weight (stationary kernel or FrozenG)".into(),
                    ));
                }
                est.fast_plan(&weights, &mollifier)?;
            }
        }
        Ok(est)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    fn direct_plan(&self, w: &Weights, m: &Mollifier, eta: f64) -> Result<DirectScale> {
        let g = &self.grid;
        let tf = &self.config.test_function;
        let axis = self.config.axis;
        let h = g.spacing();
        let vol2 = g.cell_volume() * g.cell_volume();
        let offsets = g.offsets_in_shell(0.5 * eta, eta);
        let dphi: Vec<f64> = offsets.iter().map(|o| m.dphi_eta(eta, &scaled(o, h), axis)).collect();
        let rows = tf.support_indices(g);
        let mut starts = vec![0];
        let mut cols = Vec::with_capacity(rows.len() * offsets.len());
        let mut pairs = Vec::with_capacity(rows.len() * offsets.len());
        let mut dvals = Vec::with_capacity(rows.len() * offsets.len());
        for &x in &rows {
            for (o, d) in offsets.iter().zip(&dphi) {
                if *d == 0.0 {
                    continue;
                }
                let u = g.shifted(x, neg(o)).ok_or_else(|| {
                    Error::SupportViolation(format!("eta-halo of supp f leaves the domain at eta = {eta}"))
                })?;
                cols.push(u as u32);
                pairs.push((x, u, *o));
                dvals.push(*d);
            }
            starts.push(cols.len());
        }
        let wv = w.pair_weights(&pairs);
        let mut coeffs = Vec::with_capacity(cols.len());
        for (i, &x) in rows.iter().enumerate() {
            let f = tf.eval(&g.point(x));
            for k in starts[i]..starts[i + 1] {
                coeffs.push(vol2 * f * wv[k] * dvals[k]);
            }
        }
        Ok(DirectScale { rows, starts, cols, coeffs })
    }

    fn fast_plan(&mut self, w: &Weights, m: &Mollifier) -> Result<()> {
        let g = self.grid;
        let d = g.dim();
        let h = g.spacing();
        let max_eta = self.config.scales[0];
        let reach = (max_eta / h).floor() as usize;
        let p = match g.boundary() {
            Boundary::Box => good_size(g.n() + reach + 1),
            Boundary::Torus => g.n(),
        };
        let dims = vec![p; d];
        let fft = FftNd::new(&dims);
        let total = fft.len();
        let embed: Vec<usize> = (0..g.len())
            .map(|i| {
                let mi = g.multi_index(i);
                let mut idx = 0;
                for ax in 0..d {
                    idx = idx * p + mi[ax];
                }
                idx
            })
            .collect();
        let tf = &self.config.test_function;
        let source: Vec<f64> = (0..g.len())
            .map(|i| {
                let x = g.point(i);
                let f = tf.eval(&x);
                if f == 0.0 {
                    0.0
                } else {
                    f * w.source_factor(&x)
                }
            })
            .collect();
        let vol2 = g.cell_volume() * g.cell_volume();
        for &eta in &self.config.scales {
            let offsets = g.offsets_in_shell(0.5 * eta, eta);
            let wz = w.offset_weights(&offsets);
            let mut buf = vec![Complex64::new(0.0, 0.0); total];
            for (o, wv) in offsets.iter().zip(&wz) {
                let dv = m.dphi_eta(eta, &scaled(o, h), self.config.axis);
                let mut idx = 0;
                for ax in 0..d {
                    idx = idx * p + o[ax].rem_euclid(p as i64) as usize;
                }
                buf[idx] += vol2 * wv * dv;
            }
            fft.forward(&mut buf);
            let inv_n = 1.0 / total as f64;
            self.spectra.push(buf.into_iter().map(|c| c.conj() * inv_n).collect());
        }
        self.fast = Some(FastShared { dims, fft, embed, source });
        Ok(())
    }

    /// H_η for every configured scale.
    pub fn evaluate(&self, chaos: &ChaosSample) -> Result<Vec<Complex64>> {
        if chaos.grid != self.grid {
            return Err(Error::InvalidParameter("chaos sample and estimator grids differ".into()));
        }
        let mu = &chaos.values;
        if let Some(fast) = &self.fast {
            let total = fast.fft.len();
            let mut gb = vec![Complex64::new(0.0, 0.0); total];
            let mut mb = vec![Complex64::new(0.0, 0.0); total];
            for (i, &e) in fast.embed.iter().enumerate() {
                gb[e] = mu[i] * fast.source[i];
                mb[e] = mu[i];
            }
            fast.fft.forward(&mut gb);
            fast.fft.forward(&mut mb);
            let x: Vec<Complex64> = gb.iter().zip(&mb).map(|(a, b)| a * b.conj()).collect();
            let _ = &fast.dims;
            return Ok(self
                .spectra
                .iter()
                .map(|q| q.iter().zip(&x).map(|(q, x)| q * x).sum())
                .collect());
        }
        Ok(self
            .direct
            .iter()
            .map(|plan| {
                let mut total = Complex64::new(0.0, 0.0);
                for (i, &x) in plan.rows.iter().enumerate() {
                    let mut inner = Complex64::new(0.0, 0.0);
                    for k in plan.starts[i]..plan.starts[i + 1] {
                        inner += mu[plan.cols[k] as usize].conj() * plan.coeffs[k];
                    }
                    total += mu[x] * inner;
                }
                total
            })
            .collect())
    }
}

fn scaled(o: &[i64; 3], h: f64) -> Point {
    [o[0] as f64 * h, o[1] as f64 * h, o[2] as f64 * h]
}

fn neg(o: &[i64; 3]) -> [i64; 3] {
    [-o[0], -o[1], -o[2]]
}

fn check_halo(grid: &Grid, tf: &TestFunction, eta: f64) -> Result<()> {
    match grid.boundary() {
        Boundary::Box => {
            if grid.distance_to_boundary(&tf.center) <= tf.radius + eta {
                return Err(Error::SupportViolation(format!(
                    "eta-halo of supp f leaves the domain at eta = {eta}"
                )));
            }
        }
        Boundary::Torus => {
            if 2.0 * eta >= grid.side() {
                return Err(Error::SupportViolation("annulus wraps around the torus".into()));
            }
        }
    }
    Ok(())
}

struct Weights {
    grid: Grid,
    kernel: Kernel,
    mode: WeightMode,
    beta: f64,
}

impl Weights {
    fn translation_invariant(&self) -> bool {
        match self.mode {
            WeightMode::FrozenG => true,
            _ => self.kernel.stationary(),
        }
    }

    fn b2(&self) -> f64 {
        self.beta * self.beta
    }

    /// W(x, u) for (x, u, x-u in lattice units).
    fn pair_weights(&self, pairs: &[(usize, usize, [i64; 3])]) -> Vec<f64> {
        let b2 = self.b2();
        match self.mode {
            WeightMode::FrozenG => {
                let h = self.grid.spacing();
                pairs
                    .iter()
                    .map(|(x, _, o)| {
                        let r = norm(&scaled(o, h));
                        let g = self.kernel.g_diagonal(&self.grid.point(*x)).unwrap_or(0.0);
                        r.powf(b2) * (-b2 * g).exp()
                    })
                    .collect()
            }
            _ => {
                let c = if self.grid.boundary() == Boundary::Torus && self.kernel.stationary() {
                    let offs: Vec<[i64; 3]> = pairs.iter().map(|p| p.2).collect();
                    self.kernel.grid_offsets(&self.grid, &offs)
                } else {
                    let ps: Vec<(usize, usize)> = pairs.iter().map(|p| (p.0, p.1)).collect();
                    self.kernel.grid_pairs(&self.grid, &ps)
                };
                c.into_iter().map(|c| (-b2 * c).exp()).collect()
            }
        }
    }

    /// w(z) for translation-invariant weights.
    fn offset_weights(&self, offsets: &[[i64; 3]]) -> Vec<f64> {
        let b2 = self.b2();
        match self.mode {
            WeightMode::FrozenG => {
                let h = self.grid.spacing();
                offsets.iter().map(|o| norm(&scaled(o, h)).powf(b2)).collect()
            }
            _ => self.kernel.grid_offsets(&self.grid, offsets).into_iter().map(|c| (-b2 * c).exp()).collect(),
        }
    }

    /// Part of W depending on x alone (folded into the source term).
    fn source_factor(&self, x: &Point) -> f64 {
        match self.mode {
            WeightMode::FrozenG => (-self.b2() * self.kernel.g_diagonal(x).unwrap_or(0.0)).exp(),
            _ => 1.0,
        }
    }
}

fn norm(p: &Point) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

/// One-shot H_η (builds a plan; use [`Estimator`] for repeated evaluation).
pub fn compute_h_eta(
    chaos: &ChaosSample,
    kernel: &Kernel,
    regularization: Option<&Regularization>,
    config: &EstimatorConfig,
    eta: f64,
) -> Result<Complex64> {
    let mut cfg = config.clone();
    cfg.scales = vec![eta];
    cfg.path = EvalPath::Direct;
    Ok(Estimator::new_unchecked(&chaos.grid, kernel, regularization, &cfg)?.evaluate(chaos)?[0])
}

pub fn compute_h_eta_fast(
    chaos: &ChaosSample,
    kernel: &Kernel,
    regularization: Option<&Regularization>,
    config: &EstimatorConfig,
    eta: f64,
) -> Result<Complex64> {
    let mut cfg = config.clone();
    cfg.scales = vec![eta];
    cfg.path = EvalPath::FastConvolution;
    Ok(Estimator::new_unchecked(&chaos.grid, kernel, regularization, &cfg)?.evaluate(chaos)?[0])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    /// H at scale index i.
    PerScale(usize),
    /// A_N.
    Averaged(usize),
}

impl ErrorMode {
    fn value(&self, r: &EstimateRecord) -> Complex64 {
        match *self {
            ErrorMode::PerScale(i) => r.per_scale[i],
            ErrorMode::Averaged(n) => r.averages[n - 1],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub rel_l2: f64,
    /// Batch-means standard error; None with fewer than two replicas.
    pub stderr: Option<f64>,
}

pub const DEFAULT_BATCHES: usize = 20;

fn rel_l2(records: &[EstimateRecord], beta: f64, mode: ErrorMode) -> f64 {
    let n = records.len() as f64;
    let num: f64 = records.iter().map(|r| r.residual(mode.value(r), beta).norm_sqr()).sum::<f64>() / n;
    let den: f64 = records.iter().map(|r| r.truth * r.truth).sum::<f64>() / n;
    (num / (beta * beta * den)).sqrt()
}

/// rel_L2² = mean|v + iβT|² / (β² mean T²), batch-means stderr.
pub fn reconstruction_error(records: &[EstimateRecord], beta: f64, mode: ErrorMode, batches: usize) -> ErrorReport {
    let batches = batches.max(10);
    if records.len() < 2 {
        return ErrorReport { rel_l2: rel_l2(records, beta, mode), stderr: None };
    }
    let (v, se) = stats::batch_means(records.len(), batches, |r| rel_l2(&records[r], beta, mode));
    ErrorReport { rel_l2: v, stderr: Some(se) }
}

/// rel_L2(a) - rel_L2(b) with the batch-means stderr of the paired difference.
pub fn paired_difference(
    records: &[EstimateRecord],
    beta: f64,
    a: ErrorMode,
    b: ErrorMode,
    batches: usize,
) -> ErrorReport {
    let f = |r: std::ops::Range<usize>| rel_l2(&records[r.clone()], beta, a) - rel_l2(&records[r], beta, b);
    if records.len() < 2 {
        return ErrorReport { rel_l2: f(0..records.len()), stderr: None };
    }
    let (v, se) = stats::batch_means(records.len(), batches.max(10), f);
    ErrorReport { rel_l2: v, stderr: Some(se) }
}

/// Correlation matrix of per-scale residuals H + iβT across replicas.
pub fn residual_correlation(records: &[EstimateRecord], beta: f64) -> Vec<Vec<f64>> {
    let s = records.first().map(|r| r.per_scale.len()).unwrap_or(0);
    let res: Vec<Vec<Complex64>> = (0..s)
        .map(|i| records.iter().map(|r| r.residual(r.per_scale[i], beta)).collect())
        .collect();
    (0..s)
        .map(|i| (0..s).map(|j| if i == j { 1.0 } else { stats::complex_correlation(&res[i], &res[j]) }).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaos::{build_chaos, ChaosParams};
    use crate::covariance::{ConstantKernel, GffSquare, PeriodicLog, PureLog};
    use crate::sampler::{FieldSampler, GffSpectralSampler, PeriodicSampler, SeedStream};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn cfg(tf: TestFunction, scales: Vec<f64>, weight: WeightMode, path: EvalPath) -> EstimatorConfig {
        EstimatorConfig { beta: 1.0, test_function: tf, axis: 0, scales, rule: ScaleRule::List, weight, path }
    }

    fn gff_chaos(n: usize, modes: usize, seed: u64) -> ChaosSample {
        let g = Grid::new(2, n, 1.0).unwrap();
        let f = GffSpectralSampler::new(&g, modes).unwrap().sample(SeedStream::new(seed, 0));
        build_chaos(&f, &ChaosParams::new(1.0)).unwrap()
    }

    #[test]
    fn scale_rules() {
        assert_eq!(paper_double_exp_scales(2.0, 3), vec![0.25, 0.0625, 0.00390625]);
        assert_eq!(geometric_scales(0.2, 0.5, 3), vec![0.2, 0.1, 0.05]);
    }

    #[test]
    fn a_n_examples() {
        let v = vec![Complex64::new(1.0, 2.0), Complex64::new(3.0, -1.0)];
        assert_eq!(compute_a_n(&v, 1), v[0]);
        let c = Complex64::new(0.3, 0.7);
        assert!((compute_a_n(&[c; 3], 3) - c).norm() < 1e-15);
        let r = EstimateRecord::new(0, v.clone(), 0.5);
        assert!((r.averages[1] - (v[0] + v[1]) / 2.0).norm() < 1e-15);
    }

    #[test]
    fn unit_weight_constant_chaos_vanishes() {
        let g = Grid::new(2, 64, 1.0).unwrap();
        let tf = TestFunction::new(2, &[0.5, 0.5], 0.2, 1.0).unwrap();
        let chaos = ChaosSample { grid: g, values: vec![Complex64::new(1.0, 0.0); g.len()], beta: 1.0, seed: SeedStream::new(0, 0) };
        let k: Kernel = Arc::new(ConstantKernel(0.0));
        let c = cfg(tf, vec![0.15], WeightMode::ExactC, EvalPath::Direct);
        let eta = 0.15;
        let h = compute_h_eta(&chaos, &k, None, &c, eta).unwrap();
        let l1 = g.quadrature(&tf.sample(&g));
        assert!(h.norm() <= 10.0 * g.spacing().powi(2) * l1 / eta);
        let hf = compute_h_eta_fast(&chaos, &k, None, &c, eta).unwrap();
        assert!(hf.norm() <= 1e-12);
    }

    #[test]
    fn direct_and_fast_agree_pure_log() {
        let chaos = gff_chaos(64, 32, 3);
        let tf = TestFunction::new(2, &[0.5, 0.5], 0.15, 1.0).unwrap();
        let k: Kernel = Arc::new(PureLog);
        let scales = vec![0.2, 0.125];
        let d = Estimator::new_unchecked(&chaos.grid, &k, None, &cfg(tf, scales.clone(), WeightMode::ExactC, EvalPath::Direct)).unwrap();
        let f = Estimator::new_unchecked(&chaos.grid, &k, None, &cfg(tf, scales, WeightMode::ExactC, EvalPath::FastConvolution)).unwrap();
        let a = d.evaluate(&chaos).unwrap();
        let b = f.evaluate(&chaos).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).norm() <= 1e-10 * x.norm(), "{x} vs {y}");
        }
    }

    #[test]
    fn direct_and_fast_agree_on_torus() {
        let g = Grid::torus(3, 24, 1.0).unwrap();
        let f = PeriodicSampler::new(&g, 8).unwrap().sample(SeedStream::new(1, 0));
        let chaos = build_chaos(&f, &ChaosParams::new(1.0)).unwrap();
        let tf = TestFunction::new(3, &[0.1, 0.5, 0.9], 0.2, 1.0).unwrap();
        let k: Kernel = Arc::new(PeriodicLog::new(3, 8, 1.0).unwrap());
        let reg = Regularization::SpectralTruncation { modes: 8 };
        let scales = vec![0.4];
        let d = Estimator::new(&g, &k, Some(&reg), &cfg(tf, scales.clone(), WeightMode::RegularizedCDelta, EvalPath::Direct)).unwrap();
        let fa = Estimator::new(&g, &k, Some(&reg), &cfg(tf, scales, WeightMode::RegularizedCDelta, EvalPath::FastConvolution)).unwrap();
        let a = d.evaluate(&chaos).unwrap()[0];
        let b = fa.evaluate(&chaos).unwrap()[0];
        assert!((a - b).norm() <= 1e-10 * a.norm(), "{a} vs {b}");
    }

    #[test]
    fn frozen_g_paths_agree() {
        let chaos = gff_chaos(64, 32, 5);
        let tf = TestFunction::new(2, &[0.5, 0.5], 0.15, 1.0).unwrap();
        let k: Kernel = Arc::new(crate::covariance::LogPlusG::new(Arc::new(crate::covariance::BilinearG(0.4))));
        let c = cfg(tf, vec![0.125], WeightMode::FrozenG, EvalPath::Direct);
        let a = compute_h_eta(&chaos, &k, None, &c, 0.125).unwrap();
        let b = compute_h_eta_fast(&chaos, &k, None, &c, 0.125).unwrap();
        assert!((a - b).norm() <= 1e-10 * a.norm());
    }

    #[test]
    fn fast_rejects_non_stationary() {
        let chaos = gff_chaos(64, 32, 5);
        let tf = TestFunction::new(2, &[0.5, 0.5], 0.15, 1.0).unwrap();
        let k: Kernel = Arc::new(GffSquare::new(32).unwrap());
        let c = cfg(tf, vec![0.125], WeightMode::ExactC, EvalPath::FastConvolution);
        assert!(matches!(compute_h_eta_fast(&chaos, &k, None, &c, 0.125), Err(Error::Unsupported(_))));
    }

    #[test]
    fn errors_for_bad_scales() {
        let chaos = gff_chaos(64, 32, 5);
        let tf = TestFunction::new(2, &[0.5, 0.5], 0.15, 1.0).unwrap();
        let k: Kernel = Arc::new(PureLog);
        let c = cfg(tf, vec![0.1], WeightMode::ExactC, EvalPath::Direct);
        assert!(matches!(compute_h_eta(&chaos, &k, None, &c, 0.1), Err(Error::ScaleUnresolved { .. })));
        let near = TestFunction::new(2, &[0.3, 0.5], 0.15, 1.0).unwrap();
        let c = cfg(near, vec![0.2], WeightMode::ExactC, EvalPath::Direct);
        assert!(matches!(compute_h_eta(&chaos, &k, None, &c, 0.2), Err(Error::SupportViolation(_))));
        let reg = Regularization::SpectralTruncation { modes: 32 };
        let c = cfg(tf, vec![0.2], WeightMode::ExactC, EvalPath::Direct);
        // 0.2 < 20/32
        assert!(c.validate(&chaos.grid, Some(&reg)).is_err());
        let c = cfg(tf, vec![0.15, 0.2], WeightMode::RegularizedCDelta, EvalPath::Direct);
        assert!(c.validate(&chaos.grid, Some(&reg)).is_err());
    }

    #[test]
    fn annulus_locality() {
        let mut chaos = gff_chaos(64, 32, 7);
        let g = chaos.grid;
        let tf = TestFunction::new(2, &[0.5, 0.5], 0.12, 1.0).unwrap();
        let k: Kernel = Arc::new(GffSquare::new(32).unwrap());
        let reg = Regularization::SpectralTruncation { modes: 32 };
        let c = cfg(tf, vec![0.15], WeightMode::RegularizedCDelta, EvalPath::Direct);
        let est = Estimator::new_unchecked(&g, &k, Some(&reg), &c).unwrap();
        let before = est.evaluate(&chaos).unwrap()[0];
        for i in 0..g.len() {
            let p = g.point(i);
            let r = ((p[0] - 0.5).powi(2) + (p[1] - 0.5).powi(2)).sqrt();
            if r > 0.12 + 0.15 + 1e-9 {
                chaos.values[i] = Complex64::new(37.0 * (i as f64).sin(), 11.0);
            }
        }
        let after = est.evaluate(&chaos).unwrap()[0];
        assert!((before - after).norm() <= 1e-12 * before.norm().max(1.0));
    }

    #[test]
    fn error_metric_examples() {
        let beta = 1.3;
        let recs: Vec<EstimateRecord> = (0..40)
            .map(|i| {
                let t = (i as f64 * 0.7).sin() + 0.1;
                EstimateRecord::new(i, vec![Complex64::new(0.0, -beta * t), Complex64::new(0.0, 0.0)], t)
            })
            .collect();
        let e0 = reconstruction_error(&recs, beta, ErrorMode::PerScale(0), 10);
        assert_eq!(e0.rel_l2, 0.0);
        let e1 = reconstruction_error(&recs, beta, ErrorMode::PerScale(1), 10);
        assert!((e1.rel_l2 - 1.0).abs() < 1e-14);
        let one = reconstruction_error(&recs[..1], beta, ErrorMode::PerScale(1), 10);
        assert!(one.stderr.is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn linear_in_f_and_conjugation(seed in 0u64..100, a in 0.2f64..2.0) {
            let chaos = gff_chaos(64, 32, seed);
            let g = chaos.grid;
            let k: Kernel = Arc::new(PureLog);
            let t1 = TestFunction::new(2, &[0.5, 0.5], 0.15, 1.0).unwrap();
            let t2 = TestFunction::new(2, &[0.5, 0.5], 0.15, a).unwrap();
            let t3 = TestFunction::new(2, &[0.5, 0.5], 0.15, 1.0 + a).unwrap();
            let h = |tf| compute_h_eta(&chaos, &k, None, &cfg(tf, vec![0.15], WeightMode::ExactC, EvalPath::Direct), 0.15).unwrap();
            let (h1, h2, h3) = (h(t1), h(t2), h(t3));
            prop_assert!((h1 + h2 - h3).norm() <= 1e-12 * h3.norm().max(1.0));
            let conj = ChaosSample { grid: g, values: chaos.values.iter().map(|v| v.conj()).collect(), beta: -1.0, seed: chaos.seed };
            let hc = compute_h_eta(&conj, &k, None, &cfg(t1, vec![0.15], WeightMode::ExactC, EvalPath::Direct), 0.15).unwrap();
            prop_assert!((hc - h1.conj()).norm() <= 1e-12 * h1.norm().max(1.0));
        }
    }
}
