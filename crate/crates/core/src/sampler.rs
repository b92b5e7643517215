//! Samplers for the regularized field Γ_δ with exact variance profiles.

use crate::covariance::{covariance_matrix, GffSquare, Kernel, PeriodicLog, Regularization, PSD_POINT_LIMIT};
use crate::fft::FftNd;
use crate::grid::{Boundary, Grid, Point, TestFunction};
use crate::{Complex64, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::{Read, Write};
use std::sync::Arc;

/// Counter-based seeding: the ChaCha key comes from `master`, the stream id
/// is the replica index, so a replica's draws never depend on scheduling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedStream {
    pub master: u64,
    pub replica: u64,
}

impl SeedStream {
    pub fn new(master: u64, replica: u64) -> Self {
        SeedStream { master, replica }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.master);
        rng.set_stream(self.replica);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layout {
    Grid(Grid),
    Points(Arc<Vec<Point>>),
}

#[derive(Clone, Debug)]
pub struct FieldSample {
    pub layout: Layout,
    pub values: Vec<f64>,
    /// Exact Var Γ_δ(x) at every point.
    pub variance: Option<Arc<Vec<f64>>>,
    pub regularization: Regularization,
    pub seed: SeedStream,
}

impl FieldSample {
    pub fn grid(&self) -> Result<&Grid> {
        match &self.layout {
            Layout::Grid(g) => Ok(g),
            Layout::Points(_) => Err(Error::InvalidParameter("field sample is not on a grid".into())),
        }
    }

    pub fn negated(&self) -> FieldSample {
        let mut f = self.clone();
        for v in &mut f.values {
            *v = -*v;
        }
        f
    }
}

/// Common interface of the grid samplers used by the harness.
pub trait FieldSampler: Send + Sync {
    fn grid(&self) -> &Grid;
    fn regularization(&self) -> Regularization;
    fn sample(&self, seed: SeedStream) -> FieldSample;
}

/// Γ_J(x) = Σ_{j,l≤J} Y_jl e_jl(x), Y_jl ~ N(0, 2/(π(j²+l²))), on the unit square.
pub struct GffSpectralSampler {
    grid: Grid,
    modes: usize,
    // sines[i * J + (j-1)] = sin(πj x_i)
    sines: Vec<f64>,
    sd: Vec<f64>,
    variance: Arc<Vec<f64>>,
}

impl GffSpectralSampler {
    pub fn new(grid: &Grid, modes: usize) -> Result<Self> {
        if grid.dim() != 2 {
            return Err(Error::UnsupportedDimension(grid.dim()));
        }
        if grid.boundary() != Boundary::Box || (grid.side() - 1.0).abs() > 1e-15 {
            return Err(Error::InvalidParameter("spectral GFF sampling needs the unit square".into()));
        }
        if modes == 0 || 2 * modes > grid.n() {
            return Err(Error::InvalidParameter(format!("J = {modes} exceeds n/2 = {}", grid.n() / 2)));
        }
        let k = GffSquare::new(modes)?;
        let mut sd = Vec::with_capacity(modes * modes);
        for j in 1..=modes {
            for l in 1..=modes {
                sd.push(k.weight(j, l).sqrt());
            }
        }
        Ok(GffSpectralSampler {
            grid: *grid,
            modes,
            sines: k.sine_table(grid),
            sd,
            variance: Arc::new(k.variance_profile(grid)),
        })
    }

    pub fn variance(&self) -> &Arc<Vec<f64>> {
        &self.variance
    }
}

impl FieldSampler for GffSpectralSampler {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn regularization(&self) -> Regularization {
        Regularization::SpectralTruncation { modes: self.modes }
    }

    fn sample(&self, seed: SeedStream) -> FieldSample {
        let n = self.grid.n();
        let m = self.modes;
        let mut rng = seed.rng();
        let y: Vec<f64> = self
            .sd
            .iter()
            .map(|s| {
                let z: f64 = StandardNormal.sample(&mut rng);
                s * z
            })
            .collect();
        // t[j][i2] = Σ_l Y_jl sin(πl x_i2)
        let mut t = vec![0.0; m * n];
        for j in 0..m {
            let yj = &y[j * m..(j + 1) * m];
            for i2 in 0..n {
                let s = &self.sines[i2 * m..(i2 + 1) * m];
                let mut acc = 0.0;
                for l in 0..m {
                    acc += yj[l] * s[l];
                }
                t[j * n + i2] = acc;
            }
        }
        let mut values = vec![0.0; n * n];
        for i1 in 0..n {
            let s = &self.sines[i1 * m..(i1 + 1) * m];
            let row = &mut values[i1 * n..(i1 + 1) * n];
            for j in 0..m {
                let c = 2.0 * s[j];
                let tj = &t[j * n..(j + 1) * n];
                for i2 in 0..n {
                    row[i2] += c * tj[i2];
                }
            }
        }
        FieldSample {
            layout: Layout::Grid(self.grid),
            values,
            variance: Some(self.variance.clone()),
            regularization: self.regularization(),
            seed,
        }
    }
}

pub fn sample_gff_spectral(grid: &Grid, modes: usize, seed: SeedStream) -> Result<FieldSample> {
    Ok(GffSpectralSampler::new(grid, modes)?.sample(seed))
}

/// Stationary log-correlated field on a torus grid:
/// Γ(x) = Re Σ_{0<|k|≤J} √a_k (ξ_k + iξ'_k) e^{2πi k·x/L}.
pub struct PeriodicSampler {
    grid: Grid,
    modes: usize,
    // (fft index, √a_k · cell-centre phase)
    amps: Vec<(usize, Complex64)>,
    fft: FftNd,
    variance: Arc<Vec<f64>>,
}

impl PeriodicSampler {
    pub fn new(grid: &Grid, modes: usize) -> Result<Self> {
        if grid.boundary() != Boundary::Torus {
            return Err(Error::InvalidParameter("periodic sampling needs a torus grid".into()));
        }
        if modes == 0 || 2 * modes > grid.n() {
            return Err(Error::InvalidParameter(format!("J = {modes} exceeds n/2 = {}", grid.n() / 2)));
        }
        let d = grid.dim();
        let n = grid.n() as i64;
        let kernel = PeriodicLog::new(d, modes, grid.side())?;
        let amps = PeriodicLog::all_modes(d, modes)
            .into_iter()
            .map(|(k, a)| {
                let mut mi = [0usize; 3];
                for ax in 0..d {
                    mi[ax] = k[ax].rem_euclid(n) as usize;
                }
                let phase = PI * (k[0] + k[1] + k[2]) as f64 / n as f64;
                (grid.linear_index(mi), Complex64::from_polar(a.sqrt(), phase))
            })
            .collect();
        Ok(PeriodicSampler {
            grid: *grid,
            modes,
            amps,
            fft: FftNd::new(&vec![grid.n(); d]),
            variance: Arc::new(vec![kernel.variance(); grid.len()]),
        })
    }
}

impl FieldSampler for PeriodicSampler {
    fn grid(&self) -> &Grid {
        &self.grid
    }

    fn regularization(&self) -> Regularization {
        Regularization::SpectralTruncation { modes: self.modes }
    }

    fn sample(&self, seed: SeedStream) -> FieldSample {
        let mut rng = seed.rng();
        let mut buf = vec![Complex64::new(0.0, 0.0); self.grid.len()];
        for &(idx, amp) in &self.amps {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            buf[idx] += amp * Complex64::new(re, im);
        }
        self.fft.inverse(&mut buf);
        FieldSample {
            layout: Layout::Grid(self.grid),
            values: buf.into_iter().map(|c| c.re).collect(),
            variance: Some(self.variance.clone()),
            regularization: self.regularization(),
            seed,
        }
    }
}

/// Dense Cholesky sampling of C_δ on up to 4096 points; factor shared by replicas.
pub struct CholeskySampler {
    layout: Layout,
    n: usize,
    factor: Vec<f64>,
    variance: Arc<Vec<f64>>,
    regularization: Regularization,
}

impl CholeskySampler {
    pub fn for_grid(grid: &Grid, kernel: &Kernel, spec: Regularization) -> Result<Self> {
        spec.check_resolved(grid)?;
        let points: Vec<Point> = grid.points().collect();
        Self::build(Layout::Grid(*grid), &points, kernel, spec, grid.dim())
    }

    pub fn for_points(points: Vec<Point>, kernel: &Kernel, spec: Regularization, dim: usize) -> Result<Self> {
        let pts = Arc::new(points);
        Self::build(Layout::Points(pts.clone()), &pts, kernel, spec, dim)
    }

    fn build(layout: Layout, points: &[Point], kernel: &Kernel, spec: Regularization, dim: usize) -> Result<Self> {
        if points.len() > PSD_POINT_LIMIT {
            return Err(Error::InvalidParameter(format!(
                "Cholesky sampling supports at most {PSD_POINT_LIMIT} points, got {}",
                points.len()
            )));
        }
        let kr = spec.apply(kernel, dim)?;
        let cov = covariance_matrix(kr.as_ref(), points)?;
        Self::from_matrix(layout, cov, spec)
    }

    /// Factor an explicit covariance matrix (row-major).
    pub fn from_matrix(layout: Layout, cov: Vec<f64>, spec: Regularization) -> Result<Self> {
        let n = (cov.len() as f64).sqrt().round() as usize;
        assert_eq!(n * n, cov.len());
        let variance: Vec<f64> = (0..n).map(|i| cov[i * n + i]).collect();
        let factor = match cholesky_semidefinite(cov.clone(), n) {
            Ok(l) => l,
            Err(_) => {
                let trace: f64 = variance.iter().sum();
                let jitter = 1e-10 * trace / n as f64;
                let mut c = cov;
                for i in 0..n {
                    c[i * n + i] += jitter;
                }
                cholesky_semidefinite(c, n)
                    .map_err(|(pivot, value)| Error::FactorizationFailure { pivot, value })?
            }
        };
        Ok(CholeskySampler { layout, n, factor, variance: Arc::new(variance), regularization: spec })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn sample(&self, seed: SeedStream) -> FieldSample {
        let mut rng = seed.rng();
        let z: Vec<f64> = (0..self.n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = self.n;
        let values = (0..n)
            .map(|i| {
                let row = &self.factor[i * n..i * n + i + 1];
                row.iter().zip(&z).map(|(l, z)| l * z).sum()
            })
            .collect();
        FieldSample {
            layout: self.layout.clone(),
            values,
            variance: Some(self.variance.clone()),
            regularization: self.regularization,
            seed,
        }
    }
}

impl FieldSampler for CholeskySampler {
    fn grid(&self) -> &Grid {
        match &self.layout {
            Layout::Grid(g) => g,
            Layout::Points(_) => panic!("point-set Cholesky sampler has no grid"),
        }
    }

    fn regularization(&self) -> Regularization {
        self.regularization
    }

    fn sample(&self, seed: SeedStream) -> FieldSample {
        CholeskySampler::sample(self, seed)
    }
}

pub fn sample_cholesky(
    points: Vec<Point>,
    kernel: &Kernel,
    spec: Regularization,
    dim: usize,
    seed: SeedStream,
) -> Result<FieldSample> {
    Ok(CholeskySampler::for_points(points, kernel, spec, dim)?.sample(seed))
}

/// Lower Cholesky factor of a PSD matrix. Pivots within round-off of zero
/// give a zero column (exact rank deficiency, e.g. repeated points); a
/// clearly negative pivot is an error (pivot index, value).
fn cholesky_semidefinite(mut a: Vec<f64>, n: usize) -> std::result::Result<Vec<f64>, (usize, f64)> {
    let max_diag = (0..n).map(|i| a[i * n + i].abs()).fold(0.0, f64::max);
    let tol = 1e-12 * max_diag;
    for j in 0..n {
        let (head, tail) = a.split_at_mut((j + 1) * n);
        let row_j = &mut head[j * n..(j + 1) * n];
        let d = row_j[j] - row_j[..j].iter().map(|v| v * v).sum::<f64>();
        if d < -tol {
            return Err((j, d));
        }
        let pivot = if d > tol { d.sqrt() } else { 0.0 };
        row_j[j] = pivot;
        for v in &mut row_j[j + 1..] {
            *v = 0.0;
        }
        let row_j = &*row_j;
        tail.par_chunks_mut(n).for_each(|row_i| {
            if pivot == 0.0 {
                row_i[j] = 0.0;
            } else {
                let s: f64 = row_i[..j].iter().zip(&row_j[..j]).map(|(a, b)| a * b).sum();
                row_i[j] = (row_i[j] - s) / pivot;
            }
        });
    }
    Ok(a)
}

/// Grid indices and ∂_k f weights of the ground-truth pairing, prepared once.
#[derive(Clone, Debug)]
pub struct GradPairing {
    indices: Vec<usize>,
    weights: Vec<f64>,
    volume: f64,
}

impl GradPairing {
    pub fn new(grid: &Grid, tf: &TestFunction, axis: usize) -> Self {
        let indices = tf.support_indices(grid);
        let weights = indices.iter().map(|&i| tf.grad(&grid.point(i), axis)).collect();
        GradPairing { indices, weights, volume: grid.cell_volume() }
    }

    /// T = ⟨∂Γ, f⟩ = -h^d Σ Γ ∂_k f.
    pub fn apply(&self, values: &[f64]) -> f64 {
        let s: f64 = self.indices.iter().zip(&self.weights).map(|(&i, w)| values[i] * w).sum();
        -self.volume * s
    }
}

/// ⟨Γ, f⟩ = quadrature(Γ f).
pub fn pairing(field: &FieldSample, tf: &TestFunction) -> Result<f64> {
    let g = field.grid()?;
    let f = tf.sample(g);
    Ok(g.cell_volume() * field.values.iter().zip(&f).map(|(a, b)| a * b).sum::<f64>())
}

/// ⟨∂_k Γ, f⟩ = -quadrature(Γ ∂_k f), axis zero-based.
pub fn grad_pairing(field: &FieldSample, tf: &TestFunction, axis: usize) -> Result<f64> {
    let g = field.grid()?;
    Ok(GradPairing::new(g, tf, axis).apply(&field.values))
}

const MAGIC: &[u8; 4] = b"CGFS";
const FORMAT_VERSION: u32 = 1;

/// Little-endian dump: magic "CGFS", u32 version, u32 d, u32 n, f64 L, u8 boundary
/// (0 box, 1 torus), u8 regularization (0 spectral, 1 mollify), f64 J or δ,
/// u64 master seed, u64 replica, u8 has-variance, n^d f64 values (row-major),
/// then n^d f64 variance when present.
pub fn write_field<W: Write>(field: &FieldSample, mut w: W) -> Result<()> {
    let g = field.grid()?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(g.dim() as u32).to_le_bytes())?;
    w.write_all(&(g.n() as u32).to_le_bytes())?;
    w.write_all(&g.side().to_le_bytes())?;
    w.write_all(&[match g.boundary() {
        Boundary::Box => 0u8,
        Boundary::Torus => 1u8,
    }])?;
    let (kind, param) = match field.regularization {
        Regularization::SpectralTruncation { modes } => (0u8, modes as f64),
        Regularization::MollifyConvolution { delta } => (1u8, delta),
    };
    w.write_all(&[kind])?;
    w.write_all(&param.to_le_bytes())?;
    w.write_all(&field.seed.master.to_le_bytes())?;
    w.write_all(&field.seed.replica.to_le_bytes())?;
    w.write_all(&[field.variance.is_some() as u8])?;
    for v in &field.values {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(var) = &field.variance {
        for v in var.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_field<R: Read>(mut r: R) -> Result<FieldSample> {
    fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        r.read_exact(&mut b)?;
        Ok(b)
    }
    let bad = |m: &str| Error::InvalidParameter(format!("field dump: {m}"));
    if &take::<4, _>(&mut r)? != MAGIC {
        return Err(bad("bad magic"));
    }
    if u32::from_le_bytes(take(&mut r)?) != FORMAT_VERSION {
        return Err(bad("unknown version"));
    }
    let d = u32::from_le_bytes(take(&mut r)?) as usize;
    let n = u32::from_le_bytes(take(&mut r)?) as usize;
    let side = f64::from_le_bytes(take(&mut r)?);
    let boundary = match take::<1, _>(&mut r)?[0] {
        0 => Boundary::Box,
        1 => Boundary::Torus,
        _ => return Err(bad("bad boundary tag")),
    };
    let grid = Grid::with_boundary(d, n, side, boundary)?;
    let kind = take::<1, _>(&mut r)?[0];
    let param = f64::from_le_bytes(take(&mut r)?);
    let regularization = match kind {
        0 => Regularization::SpectralTruncation { modes: param as usize },
        1 => Regularization::MollifyConvolution { delta: param },
        _ => return Err(bad("bad regularization tag")),
    };
    let master = u64::from_le_bytes(take(&mut r)?);
    let replica = u64::from_le_bytes(take(&mut r)?);
    let has_var = take::<1, _>(&mut r)?[0] != 0;
    let read_vec = |r: &mut R| -> Result<Vec<f64>> {
        (0..grid.len()).map(|_| Ok(f64::from_le_bytes(take(r)?))).collect()
    };
    let values = read_vec(&mut r)?;
    let variance = if has_var { Some(Arc::new(read_vec(&mut r)?)) } else { None };
    Ok(FieldSample {
        layout: Layout::Grid(grid),
        values,
        variance,
        regularization,
        seed: SeedStream::new(master, replica),
    })
}
