//! Covariance kernels C(x, y) = -log|x - y| + g(x, y) and their regularizations.

use crate::fft::FftNd;
use crate::grid::{Boundary, Grid, Point};
use crate::mollifier::{profile, sphere_area, Mollifier};
use crate::quad::Composite;
use crate::{Complex64, Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::{Arc, Mutex};

/// Which argument a partial derivative acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arg {
    First,
    Second,
}

pub trait Covariance: Send + Sync + fmt::Debug {
    fn name(&self) -> String;

    /// True when C(x, x) is infinite.
    fn singular_diagonal(&self) -> bool;

    /// C(x, y); +inf on the diagonal of singular kernels.
    fn value(&self, x: &Point, y: &Point) -> f64;

    fn partial(&self, x: &Point, y: &Point, arg: Arg, axis: usize) -> Result<f64>;

    /// C(x, y) depends only on y - x (modulo the period for periodic kernels).
    fn stationary(&self) -> bool {
        false
    }

    /// c(z) with C(x, x + z) = c(z); only meaningful for stationary kernels.
    fn value_at_offset(&self, z: &Point) -> f64 {
        self.value(&[0.0; 3], z)
    }

    /// g(x, x), when the kernel has the form -log|x-y| + g.
    fn g_diagonal(&self, _x: &Point) -> Option<f64> {
        None
    }

    fn is_pure_log(&self) -> bool {
        false
    }

    /// Same kernel truncated to `modes` spectral modes, if it has a spectral form.
    fn with_modes(&self, _modes: usize) -> Option<Arc<dyn Covariance>> {
        None
    }

    /// Sine-series coefficients when C = Σ w_jl e_jl(x) e_jl(y) on the unit square.
    fn sine_series(&self) -> Option<&GffSquare> {
        None
    }

    /// C at pairs of grid indices.
    fn grid_pairs(&self, grid: &Grid, pairs: &[(usize, usize)]) -> Vec<f64> {
        pairs.iter().map(|&(a, b)| self.value(&grid.point(a), &grid.point(b))).collect()
    }

    /// c(z h) at lattice offsets; stationary kernels only.
    fn grid_offsets(&self, grid: &Grid, offsets: &[[i64; 3]]) -> Vec<f64> {
        let h = grid.spacing();
        offsets
            .iter()
            .map(|o| self.value_at_offset(&[o[0] as f64 * h, o[1] as f64 * h, o[2] as f64 * h]))
            .collect()
    }
}

pub type Kernel = Arc<dyn Covariance>;

fn dist(x: &Point, y: &Point) -> f64 {
    let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

fn dist2(x: &Point, y: &Point) -> f64 {
    let d = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// C(x, y), rejecting the diagonal of singular kernels.
pub fn kernel_eval(k: &dyn Covariance, x: &Point, y: &Point) -> Result<f64> {
    if k.singular_diagonal() && x == y {
        return Err(Error::DiagonalSingularity);
    }
    Ok(k.value(x, y))
}

pub fn kernel_partial(k: &dyn Covariance, x: &Point, y: &Point, arg: Arg, axis: usize) -> Result<f64> {
    if k.singular_diagonal() && x == y {
        return Err(Error::DiagonalSingularity);
    }
    k.partial(x, y, arg, axis)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct PureLog;

impl Covariance for PureLog {
    fn name(&self) -> String {
        "pure_log".into()
    }

    fn singular_diagonal(&self) -> bool {
        true
    }

    fn value(&self, x: &Point, y: &Point) -> f64 {
        -0.5 * dist2(x, y).ln()
    }

    fn partial(&self, x: &Point, y: &Point, arg: Arg, axis: usize) -> Result<f64> {
        let r2 = dist2(x, y);
        if r2 == 0.0 {
            return Err(Error::DiagonalSingularity);
        }
        let d = (x[axis] - y[axis]) / r2;
        Ok(match arg {
            Arg::First => -d,
            Arg::Second => d,
        })
    }

    fn stationary(&self) -> bool {
        true
    }

    fn g_diagonal(&self, _x: &Point) -> Option<f64> {
        Some(0.0)
    }

    fn is_pure_log(&self) -> bool {
        true
    }
}

/// Smooth part g of a LogPlusG kernel, with closed-form first partials.
pub trait SmoothPart: Send + Sync + fmt::Debug {
    fn g(&self, x: &Point, y: &Point) -> f64;
    fn partial(&self, x: &Point, y: &Point, arg: Arg, axis: usize) -> f64;
}

/// g(x, y) = c.
#[derive(Clone, Copy, Debug)]
pub struct ConstantG(pub f64);

impl SmoothPart for ConstantG {
    fn g(&self, _x: &Point, _y: &Point) -> f64 {
        self.0
    }

    fn partial(&self, _x: &Point, _y: &Point, _arg: Arg, _axis: usize) -> f64 {
        0.0
    }
}

/// g(x, y) = a · (x · y), a smooth symmetric non-stationary example.
#[derive(Clone, Copy, Debug)]
pub struct BilinearG(pub f64);

impl SmoothPart for BilinearG {
    fn g(&self, x: &Point, y: &Point) -> f64 {
        self.0 * (x[0] * y[0] + x[1] * y[1] + x[2] * y[2])
    }

    fn partial(&self, x: &Point, y: &Point, arg: Arg, axis: usize) -> f64 {
        match arg {
            Arg::First => self.0 * y[axis],
            Arg::Second => self.0 * x[axis],
        }
    }
}

#[derive(Clone, Debug)]
pub struct LogPlusG {
    pub g: Arc<dyn SmoothPart>,
}

impl LogPlusG {
    pub fn new(g: Arc<dyn SmoothPart>) -> Self {
        LogPlusG { g }
    }
}

impl Covariance for LogPlusG {
    fn name(&self) -> String {
        format!("log_plus_g({:?})", self.g)
    }

    fn singular_diagonal(&self) -> bool {
        true
    }

    fn value(&self, x: &Point, y: &Point) -> f64 {
        PureLog.value(x, y) + self.g.g(x, y)
    }

    fn partial(&self, x: &Point, y: &Point, arg: Arg, axis: usize) -> Result<f64> {
        Ok(PureLog.partial(x, y, arg, axis)? + self.g.partial(x, y, arg, axis))
    }

    fn g_diagonal(&self, x: &Point) -> Option<f64> {
        Some(self.g.g(x, x))
    }
}

/// Truncated sine series of the Dirichlet GFF on the unit square:
/// C_J(x, y) = Σ_{1≤j,l≤J} 2/(π(j²+l²)) e_jl(x) e_jl(y), e_jl = 2 sin(πj x₁) sin(πl x₂).
#[derive(Clone, Debug)]
pub struct GffSquare {
    modes: usize,
    // weights[(j-1) * J + (l-1)]
    weights: Vec<f64>,
}

/// Mode weight normalization, so that C_J ~ -log|x-y| at short distance.
pub const GFF_NORMALIZATION: f64 = 2.0 / PI;

impl GffSquare {
    pub fn new(modes: usize) -> Result<Self> {
        if modes == 0 {
            return Err(Error::InvalidParameter("GFF truncation J must be positive".into()));
        }
        let mut weights = Vec::with_capacity(modes * modes);
        for j in 1..=modes {
            for l in 1..=modes {
                weights.push(GFF_NORMALIZATION / (j * j + l * l) as f64);
            }
        }
        Ok(GffSquare { modes, weights })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    /// Variance of the mode coefficient Y_jl (1-based j, l).
    pub fn weight(&self, j: usize, l: usize) -> f64 {
        self.weights[(j - 1) * self.modes + (l - 1)]
    }

    fn sines(&self, t: f64) -> Vec<f64> {
        (1..=self.modes).map(|j| (PI * j as f64 * t).sin()).collect()
    }

    fn cosines_scaled(&self, t: f64) -> Vec<f64> {
        (1..=self.modes).map(|j| PI * j as f64 * (PI * j as f64 * t).cos()).collect()
    }

    fn bilinear(&self, a1: &[f64], b1: &[f64], a2: &[f64], b2: &[f64]) -> f64 {
        let m = self.modes;
        let mut s = 0.0;
        for j in 0..m {
            let row = &self.weights[j * m..(j + 1) * m];
            let mut inner = 0.0;
            for l in 0..m {
                inner += row[l] * (a2[l] * b2[l]);
            }
            s += (a1[j] * b1[j]) * inner;
        }
        4.0 * s
    }

    /// sin(πj x) at cell centres: table[i * J + (j-1)].
    pub fn sine_table(&self, grid: &Grid) -> Vec<f64> {
        let mut t = Vec::with_capacity(grid.n() * self.modes);
        for i in 0..grid.n() {
            let x = grid.coord(i);
            for j in 1..=self.modes {
                t.push((PI * j as f64 * x).sin());
            }
        }
        t
    }

    /// Exact variance profile Σ w_jl e_jl(x)² on the grid.
    pub fn variance_profile(&self, grid: &Grid) -> Vec<f64> {
        let n = grid.n();
        let m = self.modes;
        let s = self.sine_table(grid);
        // v2[i2][j] = Σ_l w_jl sin²(πl x₂)
        let mut v2 = vec![0.0; n * m];
        for i2 in 0..n {
            for j in 0..m {
                let row = &self.weights[j * m..(j + 1) * m];
                v2[i2 * m + j] = (0..m).map(|l| row[l] * s[i2 * m + l] * s[i2 * m + l]).sum();
            }
        }
        let mut out = vec![0.0; n * n];
        for i1 in 0..n {
            for i2 in 0..n {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += s[i1 * m + j] * s[i1 * m + j] * v2[i2 * m + j];
                }
                out[i1 * n + i2] = 4.0 * acc;
            }
        }
        out
    }
}

impl Covariance for GffSquare {
    fn name(&self) -> String {
        format!("gff_square(J={})", self.modes)
    }

    fn singular_diagonal(&self) -> bool {
        false
    }

    fn value(&self, x: &Point, y: &Point) -> f64 {
        let (sx1, sy1) = (self.sines(x[0]), self.sines(y[0]));
        let (sx2, sy2) = (self.sines(x[1]), self.sines(y[1]));
        self.bilinear(&sx1, &sy1, &sx2, &sy2)
    }

    fn partial(&self, x: &Point, y: &Point, arg: Arg, axis: usize) -> Result<f64> {
        if axis > 1 {
            return Err(Error::InvalidParameter("GFF kernel is two-dimensional".into()));
        }
        let p = match arg {
            Arg::First => x,
            Arg::Second => y,
        };
        let q = match arg {
            Arg::First => y,
            Arg::Second => x,
        };
        let (p1, p2) = if axis == 0 {
            (self.cosines_scaled(p[0]), self.sines(p[1]))
        } else {
            (self.sines(p[0]), self.cosines_scaled(p[1]))
        };
        Ok(self.bilinear(&p1, &self.sines(q[0]), &p2, &self.sines(q[1])))
    }

    fn with_modes(&self, modes: usize) -> Option<Kernel> {
        GffSquare::new(modes).ok().map(|k| Arc::new(k) as Kernel)
    }

    fn sine_series(&self) -> Option<&GffSquare> {
        Some(self)
    }

    fn grid_pairs(&self, grid: &Grid, pairs: &[(usize, usize)]) -> Vec<f64> {
        if grid.dim() != 2 || (grid.side() - 1.0).abs() > 1e-15 || pairs.len() < grid.n() * grid.n() {
            return pairs.iter().map(|&(a, b)| self.value(&grid.point(a), &grid.point(b))).collect();
        }
        let n = grid.n();
        let m = self.modes;
        let s = self.sine_table(grid);
        // p[(a * n + b) * m + j] = Σ_l w_jl sin(πl a) sin(πl b)
        let mut p = vec![0.0; n * n * m];
        for a in 0..n {
            for b in 0..n {
                let sa = &s[a * m..(a + 1) * m];
                let sb = &s[b * m..(b + 1) * m];
                for j in 0..m {
                    let row = &self.weights[j * m..(j + 1) * m];
                    let mut acc = 0.0;
                    for l in 0..m {
                        acc += row[l] * (sa[l] * sb[l]);
                    }
                    p[(a * n + b) * m + j] = acc;
                }
            }
        }
        pairs
            .iter()
            .map(|&(x, y)| {
                let (x1, x2) = (x / n, x % n);
                let (y1, y2) = (y / n, y % n);
                let sx = &s[x1 * m..(x1 + 1) * m];
                let sy = &s[y1 * m..(y1 + 1) * m];
                let pj = &p[(x2 * n + y2) * m..(x2 * n + y2 + 1) * m];
                let mut acc = 0.0;
                for j in 0..m {
                    acc += (sx[j] * sy[j]) * pj[j];
                }
                4.0 * acc
            })
            .collect()
    }
}

/// Stationary log-correlated field on the torus [0, L)^d:
/// C_J(z) = Σ_{0<|k|≤J} a_k cos(2π k·z / L), a_k = 1 / (|S^{d-1}| |k|^d).
#[derive(Clone, Debug)]
pub struct PeriodicLog {
    dim: usize,
    modes: usize,
    period: f64,
    // half-space representatives with doubled weight
    half: Vec<([i64; 3], f64)>,
}

impl PeriodicLog {
    pub fn new(dim: usize, modes: usize, period: f64) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::UnsupportedDimension(dim));
        }
        if modes == 0 || !(period > 0.0) {
            return Err(Error::InvalidParameter("periodic kernel needs J > 0 and a positive period".into()));
        }
        let half = Self::all_modes(dim, modes)
            .into_iter()
            .filter(|(k, _)| {
                let first = k.iter().copied().find(|&c| c != 0).unwrap_or(0);
                first > 0
            })
            .map(|(k, a)| (k, 2.0 * a))
            .collect();
        Ok(PeriodicLog { dim, modes, period, half })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn coefficient(dim: usize, k2: i64) -> f64 {
        1.0 / (sphere_area(dim) * (k2 as f64).powf(dim as f64 / 2.0))
    }

    /// Every k with 0 < |k| ≤ J, in lexicographic order, with a_k.
    pub fn all_modes(dim: usize, modes: usize) -> Vec<([i64; 3], f64)> {
        let j = modes as i64;
        let mut out = Vec::new();
        let r3 = if dim == 3 { -j..=j } else { 0..=0 };
        for a in -j..=j {
            for b in -j..=j {
                for c in r3.clone() {
                    let k2 = a * a + b * b + c * c;
                    if k2 > 0 && k2 <= j * j {
                        out.push(([a, b, c], Self::coefficient(dim, k2)));
                    }
                }
            }
        }
        out
    }

    /// Constant pointwise variance Σ a_k.
    pub fn variance(&self) -> f64 {
        self.half.iter().map(|(_, a)| a).sum()
    }

    /// c(m h) for every lattice offset m of a torus grid with matching period, by FFT.
    pub fn lattice_table(&self, grid: &Grid) -> Vec<f64> {
        let n = grid.n() as i64;
        let dims = vec![grid.n(); self.dim];
        let mut buf = vec![Complex64::new(0.0, 0.0); grid.len()];
        for (k, a2) in &self.half {
            for sign in [1i64, -1] {
                let mut mi = [0usize; 3];
                for ax in 0..self.dim {
                    mi[ax] = (sign * k[ax]).rem_euclid(n) as usize;
                }
                buf[grid.linear_index(mi)] += 0.5 * a2;
            }
        }
        FftNd::new(&dims).inverse(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }
}

impl Covariance for PeriodicLog {
    fn name(&self) -> String {
        format!("periodic_log(d={}, J={}, L={})", self.dim, self.modes, self.period)
    }

    fn singular_diagonal(&self) -> bool {
        false
    }

    fn value(&self, x: &Point, y: &Point) -> f64 {
        let w = 2.0 * PI / self.period;
        let z = [(y[0] - x[0]) * w, (y[1] - x[1]) * w, (y[2] - x[2]) * w];
        self.half
            .iter()
            .map(|(k, a)| a * (k[0] as f64 * z[0] + k[1] as f64 * z[1] + k[2] as f64 * z[2]).cos())
            .sum()
    }

    fn partial(&self, x: &Point, y: &Point, arg: Arg, axis: usize) -> Result<f64> {
        let w = 2.0 * PI / self.period;
        let z = [(y[0] - x[0]) * w, (y[1] - x[1]) * w, (y[2] - x[2]) * w];
        // d/dy of cos(k·z) = -sin(k·z) k w
        let dy: f64 = self
            .half
            .iter()
            .map(|(k, a)| {
                -a * (k[0] as f64 * z[0] + k[1] as f64 * z[1] + k[2] as f64 * z[2]).sin() * k[axis] as f64 * w
            })
            .sum();
        Ok(match arg {
            Arg::First => -dy,
            Arg::Second => dy,
        })
    }

    fn stationary(&self) -> bool {
        true
    }

    fn with_modes(&self, modes: usize) -> Option<Kernel> {
        PeriodicLog::new(self.dim, modes, self.period).ok().map(|k| Arc::new(k) as Kernel)
    }

    fn grid_offsets(&self, grid: &Grid, offsets: &[[i64; 3]]) -> Vec<f64> {
        let matches = grid.boundary() == Boundary::Torus
            && grid.dim() == self.dim
            && (grid.side() - self.period).abs() <= 1e-12 * self.period;
        if !matches || offsets.len() < 64 {
            let h = grid.spacing();
            return offsets
                .iter()
                .map(|o| self.value_at_offset(&[o[0] as f64 * h, o[1] as f64 * h, o[2] as f64 * h]))
                .collect();
        }
        let table = self.lattice_table(grid);
        let n = grid.n() as i64;
        offsets
            .iter()
            .map(|o| {
                let mut mi = [0usize; 3];
                for ax in 0..self.dim {
                    mi[ax] = o[ax].rem_euclid(n) as usize;
                }
                table[grid.linear_index(mi)]
            })
            .collect()
    }
}

/// Kernel plus a constant; used for fault injection and constant-g tests.
#[derive(Clone, Debug)]
pub struct Shifted {
    pub base: Kernel,
    pub offset: f64,
}

impl Covariance for Shifted {
    fn name(&self) -> String {
        format!("{} + {}", self.base.name(), self.offset)
    }

    fn singular_diagonal(&self) -> bool {
        self.base.singular_diagonal()
    }

    fn value(&self, x: &Point, y: &Point) -> f64 {
        self.base.value(x, y) + self.offset
    }

    fn partial(&self, x: &Point, y: &Point, arg: Arg, axis: usize) -> Result<f64> {
        self.base.partial(x, y, arg, axis)
    }

    fn stationary(&self) -> bool {
        self.base.stationary()
    }

    fn value_at_offset(&self, z: &Point) -> f64 {
        self.base.value_at_offset(z) + self.offset
    }

    fn g_diagonal(&self, x: &Point) -> Option<f64> {
        self.base.g_diagonal(x).map(|g| g + self.offset)
    }

    fn grid_pairs(&self, grid: &Grid, pairs: &[(usize, usize)]) -> Vec<f64> {
        self.base.grid_pairs(grid, pairs).into_iter().map(|v| v + self.offset).collect()
    }

    fn grid_offsets(&self, grid: &Grid, offsets: &[[i64; 3]]) -> Vec<f64> {
        self.base.grid_offsets(grid, offsets).into_iter().map(|v| v + self.offset).collect()
    }
}

/// Constant kernel C ≡ c (test stub).
#[derive(Clone, Copy, Debug)]
pub struct ConstantKernel(pub f64);

impl Covariance for ConstantKernel {
    fn name(&self) -> String {
        format!("constant({})", self.0)
    }

    fn singular_diagonal(&self) -> bool {
        false
    }

    fn value(&self, _x: &Point, _y: &Point) -> f64 {
        self.0
    }

    fn partial(&self, _x: &Point, _y: &Point, _arg: Arg, _axis: usize) -> Result<f64> {
        Ok(0.0)
    }

    fn stationary(&self) -> bool {
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    SpectralTruncation { modes: usize },
    MollifyConvolution { delta: f64 },
}

impl Regularization {
    /// δ, with δ = 1/J for spectral truncation.
    pub fn effective_delta(&self) -> f64 {
        match *self {
            Regularization::SpectralTruncation { modes } => 1.0 / modes as f64,
            Regularization::MollifyConvolution { delta } => delta,
        }
    }

    /// Grid resolution rule: J ≤ n/2 for spectral truncation, δ ≥ 4h for mollification.
    pub fn check_resolved(&self, grid: &Grid) -> Result<()> {
        match *self {
            Regularization::SpectralTruncation { modes } => {
                if modes == 0 || 2 * modes > grid.n() {
                    return Err(Error::InvalidParameter(format!(
                        "spectral truncation J = {modes} not resolved by n = {} (need J ≤ n/2)",
                        grid.n()
                    )));
                }
            }
            Regularization::MollifyConvolution { delta } => {
                if delta < 4.0 * grid.spacing() {
                    return Err(Error::InvalidParameter(format!(
                        "mollification scale δ = {delta} below 4h = {}",
                        4.0 * grid.spacing()
                    )));
                }
            }
        }
        Ok(())
    }

    /// The regularized kernel C_δ as a kernel object.
    pub fn apply(&self, k: &Kernel, dim: usize) -> Result<Kernel> {
        match *self {
            Regularization::SpectralTruncation { modes } => k.with_modes(modes).ok_or_else(|| {
                Error::Unsupported(format!("{} has no spectral truncation", k.name()))
            }),
            Regularization::MollifyConvolution { delta } => {
                Ok(Arc::new(Mollified::new(k.clone(), delta, dim)?) as Kernel)
            }
        }
    }
}

/// C_δ(x, y) for a regularization spec.
pub fn regularized_covariance(k: &Kernel, spec: &Regularization, dim: usize, x: &Point, y: &Point) -> Result<f64> {
    Ok(spec.apply(k, dim)?.value(x, y))
}

/// C_δ(x, y) = ∬ φ_δ(x - s) φ_δ(y - t) C(s, t) ds dt.
pub struct Mollified {
    base: Kernel,
    delta: f64,
    dim: usize,
    level: usize,
    // radial c_1(ρ) memo for the pure log kernel, keyed by ρ bits
    memo: Mutex<HashMap<u64, f64>>,
    // generic path: (offset, weight) nodes for s and the half-shifted t lattice
    nodes_s: Vec<(Point, f64)>,
    nodes_t: Vec<(Point, f64)>,
}

impl fmt::Debug for Mollified {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Mollified").field("base", &self.base).field("delta", &self.delta).finish()
    }
}

impl Mollified {
    pub fn new(base: Kernel, delta: f64, dim: usize) -> Result<Self> {
        Self::with_level(base, delta, dim, 1)
    }

    /// `level` scales every node count by 2^(level-1); used for refinement checks.
    pub fn with_level(base: Kernel, delta: f64, dim: usize, level: usize) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::InvalidParameter(format!("mollification scale must be positive, got {delta}")));
        }
        let mollifier = Mollifier::new(dim)?;
        let (nodes_s, nodes_t) = if base.is_pure_log() {
            (Vec::new(), Vec::new())
        } else {
            let m = 6 * (1 << (level - 1));
            (subgrid_nodes(&mollifier, dim, delta, m, 0.0), subgrid_nodes(&mollifier, dim, delta, m, 0.5))
        };
        Ok(Mollified { base, delta, dim, level, memo: Mutex::new(HashMap::new()), nodes_s, nodes_t })
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Radial profile for the pure log kernel: C_δ = -log δ + c_1(r/δ).
    fn radial(&self, r: f64) -> f64 {
        let rho = r / self.delta;
        if self.dim == 2 && rho >= 2.0 {
            // mean-value property: -log is harmonic off the origin
            return -r.ln();
        }
        let key = rho.to_bits();
        if let Some(&v) = self.memo.lock().unwrap().get(&key) {
            return v - self.delta.ln();
        }
        let v = radial_log_unit(self.dim, rho, self.level);
        self.memo.lock().unwrap().insert(key, v);
        v - self.delta.ln()
    }
}

fn subgrid_nodes(m: &Mollifier, dim: usize, delta: f64, per_radius: usize, shift: f64) -> Vec<(Point, f64)> {
    let s = delta / per_radius as f64;
    let k = per_radius as i64 + 1;
    let mut out = Vec::new();
    let r3 = if dim == 3 { -k..=k } else { 0..=0 };
    for a in -k..=k {
        for b in -k..=k {
            for c in r3.clone() {
                let mut z = [(a as f64 + shift) * s, (b as f64 + shift) * s, 0.0];
                if dim == 3 {
                    z[2] = (c as f64 + shift) * s;
                }
                let w = m.phi_eta(delta, &z);
                if w > 0.0 {
                    out.push((z, w));
                }
            }
        }
    }
    let total: f64 = out.iter().map(|(_, w)| w).sum();
    for (_, w) in &mut out {
        *w /= total;
    }
    out
}

// Angular means of -log|s e - a ω| over the unit sphere.
fn log_sphere_mean(dim: usize, s: f64, a: f64) -> f64 {
    if dim == 2 {
        return -s.max(a).ln();
    }
    if s == 0.0 {
        return -a.ln();
    }
    if a == 0.0 {
        return -s.ln();
    }
    let f = |t: f64| if t == 0.0 { 0.0 } else { t * t * (2.0 * t.ln() - 1.0) };
    -(f(s + a) - f((s - a).abs())) / (8.0 * s * a)
}

// c_1(ρ): the mollified pure log kernel at δ = 1, by nested radial quadrature.
fn radial_log_unit(dim: usize, rho: f64, level: usize) -> f64 {
    let panels = 8 * level;
    let order = 16;
    let radial_nodes = Composite::new(0.5, 1.0, panels, order);
    // normalized against the same nodes so constants integrate exactly
    let raw = |b: f64| sphere_area(dim) * profile(b) * b.powi(dim as i32 - 1);
    let z = radial_nodes.integrate(raw);
    let density = |b: f64| raw(b) / z;
    // L(s) = ∫ q(a) <-log|s e - a ω|> da, split at a = s where the integrand kinks
    let inner = |s: f64| -> f64 {
        let mut total = 0.0;
        let mut pieces = vec![0.5, 1.0];
        if s > 0.5 && s < 1.0 {
            pieces.insert(1, s);
        }
        for w in pieces.windows(2) {
            let c = Composite::new(w[0], w[1], panels, order);
            total += c.integrate(|a| density(a) * log_sphere_mean(dim, s, a));
        }
        total
    };
    if rho == 0.0 {
        return radial_nodes.integrate(|b| density(b) * inner(b));
    }
    radial_nodes.integrate(|b| {
        let mean = if dim == 2 {
            // (1/π) ∫_0^π L(|ρ e - b ω(θ)|) dθ, trapezoid on a smooth even periodic integrand
            let k = 64 * level;
            let mut acc = 0.0;
            for i in 0..=k {
                let th = PI * i as f64 / k as f64;
                let t = (rho * rho + b * b - 2.0 * rho * b * th.cos()).max(0.0).sqrt();
                let w = if i == 0 || i == k { 0.5 } else { 1.0 };
                acc += w * inner(t);
            }
            acc / k as f64
        } else {
            // (1/(2ρb)) ∫_{|ρ-b|}^{ρ+b} L(t) t dt
            let c = Composite::new((rho - b).abs(), rho + b, panels, order);
            c.integrate(|t| inner(t) * t) / (2.0 * rho * b)
        };
        density(b) * mean
    })
}

impl Covariance for Mollified {
    fn name(&self) -> String {
        format!("mollified({}, δ={})", self.base.name(), self.delta)
    }

    fn singular_diagonal(&self) -> bool {
        false
    }

    fn value(&self, x: &Point, y: &Point) -> f64 {
        if self.base.is_pure_log() {
            return self.radial(dist(x, y));
        }
        let mut acc = 0.0;
        for (os, ws) in &self.nodes_s {
            let s = [x[0] - os[0], x[1] - os[1], x[2] - os[2]];
            let mut row = 0.0;
            for (ot, wt) in &self.nodes_t {
                let t = [y[0] - ot[0], y[1] - ot[1], y[2] - ot[2]];
                row += wt * self.base.value(&s, &t);
            }
            acc += ws * row;
        }
        acc
    }

    fn partial(&self, _x: &Point, _y: &Point, _arg: Arg, _axis: usize) -> Result<f64> {
        Err(Error::Unsupported("partial derivatives of a mollified kernel".into()))
    }

    fn stationary(&self) -> bool {
        self.base.stationary()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsdReport {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    pub points: usize,
}

/// Dense matrix C(x_i, x_j), row-major.
pub fn covariance_matrix(k: &dyn Covariance, points: &[Point]) -> Result<Vec<f64>> {
    let n = points.len();
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let v = kernel_eval(k, &points[i], &points[j])?;
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    Ok(m)
}

pub const PSD_POINT_LIMIT: usize = 4096;

/// Dense eigen-check of the regularized covariance on a point set.
pub fn psd_validate(k: &Kernel, spec: &Regularization, dim: usize, points: &[Point]) -> Result<PsdReport> {
    let kr = spec.apply(k, dim)?;
    psd_validate_kernel(kr.as_ref(), points)
}

pub fn psd_validate_kernel(k: &dyn Covariance, points: &[Point]) -> Result<PsdReport> {
    if points.len() > PSD_POINT_LIMIT {
        return Err(Error::InvalidParameter(format!(
            "psd_validate supports at most {PSD_POINT_LIMIT} points, got {}",
            points.len()
        )));
    }
    let n = points.len();
    let m = covariance_matrix(k, points)?;
    let mat = nalgebra::DMatrix::from_row_slice(n, n, &m);
    let eig = nalgebra::linalg::SymmetricEigen::new(mat).eigenvalues;
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min < -1e-8 * max.abs() {
        return Err(Error::NotPositiveSemiDefinite { min_eigenvalue: min, max_eigenvalue: max });
    }
    Ok(PsdReport { min_eigenvalue: min, max_eigenvalue: max, points: n })
}
