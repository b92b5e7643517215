//! Reference values for the moment identities behind the estimator.
//!
//! Two families of routes:
//! - grid-exact: the expectation of a Monte Carlo statistic computed on the
//!   estimator grid with the field's own covariance (no discretization gap);
//! - continuum quadrature on offset lattices, with a refinement check.
//!
//! Singular kernels are never evaluated on their diagonal: the two lattices of
//! a double integral are offset by half a cell in every axis.

use crate::covariance::{kernel_eval, Covariance, Kernel};
use crate::fft::{good_size, FftNd};
use crate::grid::{Boundary, Grid, Point, TestFunction};
use crate::mollifier::Mollifier;
use crate::{Complex64, Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    /// Lattice cell at level 0.
    pub base_cell: f64,
    /// Number of halvings applied to `base_cell`.
    pub level: u32,
    /// Largest accepted relative change under one extra level.
    pub rtol: f64,
    /// Absolute floor for values that should vanish.
    pub atol: f64,
    /// Run the refinement check; costs one evaluation at level + 1.
    pub check: bool,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec { base_cell: 1.0 / 256.0, level: 1, rtol: 1e-3, atol: 1e-12, check: true }
    }
}

impl QuadratureSpec {
    pub fn with_cell(cell: f64) -> Self {
        QuadratureSpec { base_cell: cell, level: 0, ..Default::default() }
    }

    pub fn cell(&self) -> f64 {
        self.base_cell / f64::from(1u32 << self.level)
    }

    pub fn refined(&self) -> Self {
        QuadratureSpec { level: self.level + 1, ..*self }
    }

    pub fn unchecked(self) -> Self {
        QuadratureSpec { check: false, ..self }
    }
}

/// Evaluates at `spec` and, if requested, at one extra level; returns the finer value.
fn refine_checked(spec: &QuadratureSpec, f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let coarse = f(spec.cell())?;
    if !spec.check {
        return Ok(coarse);
    }
    let fine = f(spec.refined().cell())?;
    let tol = spec.rtol * coarse.abs().max(fine.abs()) + spec.atol;
    if (fine - coarse).abs() > tol {
        return Err(Error::NonConverged { coarse, fine, level: spec.level + 1 });
    }
    Ok(fine)
}

fn sub(a: &Point, b: &Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// E(x,y,u,v) = exp(β²[C(x,y) + C(x-u,y-v) - C(x,y-v) - C(y,x-u)]).
pub fn four_point_e(k: &dyn Covariance, beta: f64, x: &Point, y: &Point, u: &Point, v: &Point) -> Result<f64> {
    let xu = sub(x, u);
    let yv = sub(y, v);
    let e = kernel_eval(k, x, y)? + kernel_eval(k, &xu, &yv)? - kernel_eval(k, x, &yv)? - kernel_eval(k, y, &xu)?;
    Ok((beta * beta * e).exp())
}

/// E μ_δ(x) = 1.
pub fn girsanov_one_point() -> Complex64 {
    Complex64::new(1.0, 0.0)
}

/// E μ_δ(x) conj(μ_δ(u)) = e^{β² C_δ(x,u)}.
pub fn girsanov_two_point(k_delta: &dyn Covariance, x: &Point, u: &Point, beta: f64) -> f64 {
    (beta * beta * k_delta.value(x, u)).exp()
}

/// E μ_δ(x) conj(μ_δ(u)) Γ_δ(y) = iβ e^{β² C_δ(x,u)} (C_δ(x,y) - C_δ(u,y)).
pub fn girsanov_three_point(k_delta: &dyn Covariance, x: &Point, u: &Point, y: &Point, beta: f64) -> Complex64 {
    let w = girsanov_two_point(k_delta, x, u, beta);
    Complex64::new(0.0, beta * w * (k_delta.value(x, y) - k_delta.value(u, y)))
}

// ---------------------------------------------------------------------------
// lattices and bilinear forms

/// Cube of m^d cell centres origin + (i + 1/2) h.
#[derive(Clone, Copy, Debug)]
struct Patch {
    dim: usize,
    origin: Point,
    h: f64,
    m: usize,
}

impl Patch {
    /// Covers the ball B(centre, radius + reach), translated by `shift` in every axis.
    fn covering(tf: &TestFunction, reach: f64, h: f64, shift: f64) -> Patch {
        let half = tf.radius + reach;
        let m = (2.0 * half / h).ceil() as usize + 2;
        let mut origin = [0.0; 3];
        // snapped to the global lattice so patches with one cell size share nodes
        for k in 0..tf.dim {
            origin[k] = ((tf.center[k] - half) / h).floor() * h + shift;
        }
        Patch { dim: tf.dim, origin, h, m }
    }

    fn len(&self) -> usize {
        self.m.pow(self.dim as u32)
    }

    fn coord(&self, axis: usize, i: usize) -> f64 {
        self.origin[axis] + (i as f64 + 0.5) * self.h
    }

    fn point(&self, idx: usize) -> Point {
        let mut p = [0.0; 3];
        let mut rest = idx;
        for axis in (0..self.dim).rev() {
            p[axis] = self.coord(axis, rest % self.m);
            rest /= self.m;
        }
        p
    }

    fn sample(&self, f: impl Fn(&Point) -> f64 + Sync) -> Vec<f64> {
        (0..self.len()).into_par_iter().map(|i| f(&self.point(i))).collect()
    }
}

fn zeros(n: usize) -> Vec<Complex64> {
    vec![Complex64::new(0.0, 0.0); n]
}

/// R(t) = Σ_j a_{j+t} b_j for t in [-(mb-1), ma-1]^d, returned row-major with
/// index t + mb - 1 per axis.
fn linear_correlation(a: &[f64], ma: usize, b: &[f64], mb: usize, dim: usize) -> Vec<f64> {
    let p = good_size(ma + mb - 1);
    let fft = FftNd::new(&vec![p; dim]);
    let embed = |vals: &[f64], m: usize| {
        let mut buf = zeros(fft.len());
        for (i, &v) in vals.iter().enumerate() {
            if v != 0.0 {
                buf[remap(i, m, p, dim, 0)] = Complex64::new(v, 0.0);
            }
        }
        buf
    };
    let mut fa = embed(a, ma);
    let mut fb = embed(b, mb);
    fft.forward(&mut fa);
    fft.forward(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y.conj();
    }
    fft.inverse(&mut fa);
    let inv = 1.0 / fft.len() as f64;
    let mr = ma + mb - 1;
    let shift = (mb - 1) as i64;
    (0..mr.pow(dim as u32))
        .map(|i| {
            let mut idx = 0;
            let mut rest = i;
            let mut mult = 1;
            for _ in 0..dim {
                let t = (rest % mr) as i64 - shift;
                idx += t.rem_euclid(p as i64) as usize * mult;
                rest /= mr;
                mult *= p;
            }
            fa[idx].re * inv
        })
        .collect()
}

// Row-major index in an m^d cube to the same multi-index in a p^d cube, plus an offset per axis.
fn remap(i: usize, m: usize, p: usize, dim: usize, offset: usize) -> usize {
    let mut idx = 0;
    let mut rest = i;
    let mut mult = 1;
    for _ in 0..dim {
        idx += (rest % m + offset) * mult;
        rest /= m;
        mult *= p;
    }
    idx
}

/// Multi-index of a row-major cube entry, least significant axis last.
fn cube_index(i: usize, m: usize, dim: usize) -> [i64; 3] {
    let mut out = [0i64; 3];
    let mut rest = i;
    for axis in (0..dim).rev() {
        out[axis] = (rest % m) as i64;
        rest /= m;
    }
    out
}

/// h^{2d} Σ_i Σ_j a_i b_j C(p_i, q_j) over two patches with the same cell.
fn patch_bilinear(k: &dyn Covariance, pa: &Patch, a: &[f64], pb: &Patch, b: &[f64]) -> Result<f64> {
    let dim = pa.dim;
    let h = pa.h;
    let vol2 = h.powi(2 * dim as i32);
    if let Some(gff) = k.sine_series() {
        if dim != 2 {
            return Err(Error::UnsupportedDimension(dim));
        }
        let ca = sine_coefficients(gff.modes(), pa, a);
        let cb = sine_coefficients(gff.modes(), pb, b);
        let m = gff.modes();
        let mut s = 0.0;
        for j in 0..m {
            for l in 0..m {
                s += gff.weight(j + 1, l + 1) * ca[j * m + l] * cb[j * m + l];
            }
        }
        return Ok(4.0 * vol2 * s);
    }
    if k.stationary() {
        let r = linear_correlation(a, pa.m, b, pb.m, dim);
        let mr = pa.m + pb.m - 1;
        let delta = sub(&pa.origin, &pb.origin);
        let shift = (pb.m - 1) as i64;
        let singular = k.singular_diagonal();
        let terms: Vec<Result<f64>> = (0..r.len())
            .into_par_iter()
            .map(|i| {
                if r[i] == 0.0 {
                    return Ok(0.0);
                }
                let t = cube_index(i, mr, dim);
                let mut z = [0.0; 3];
                for axis in 0..dim {
                    z[axis] = (t[axis] - shift) as f64 * h + delta[axis];
                }
                if singular && z.iter().all(|&c| c == 0.0) {
                    return Err(Error::DiagonalSingularity);
                }
                Ok(r[i] * k.value_at_offset(&z))
            })
            .collect();
        let mut s = 0.0;
        for t in terms {
            s += t?;
        }
        return Ok(vol2 * s);
    }
    let nb: Vec<(Point, f64)> = (0..b.len()).filter(|&j| b[j] != 0.0).map(|j| (pb.point(j), b[j])).collect();
    let rows: Vec<Result<f64>> = (0..a.len())
        .into_par_iter()
        .filter(|&i| a[i] != 0.0)
        .map(|i| {
            let x = pa.point(i);
            let mut acc = 0.0;
            for (y, bv) in &nb {
                acc += bv * kernel_eval(k, &x, y)?;
            }
            Ok(a[i] * acc)
        })
        .collect();
    let mut s = 0.0;
    for r in rows {
        s += r?;
    }
    Ok(vol2 * s)
}

// c[j][l] = Σ_{i1,i2} a[i1,i2] sin(π j x_{i1}) sin(π l x_{i2}), row-major over (j-1, l-1).
fn sine_coefficients(modes: usize, p: &Patch, a: &[f64]) -> Vec<f64> {
    let m = p.m;
    let table = |axis: usize| -> Vec<f64> {
        let mut t = Vec::with_capacity(m * modes);
        for i in 0..m {
            let x = p.coord(axis, i);
            for j in 1..=modes {
                t.push((std::f64::consts::PI * j as f64 * x).sin());
            }
        }
        t
    };
    let (s1, s2) = (table(0), table(1));
    separable_sine_sum(a, m, modes, &s1, &s2)
}

fn separable_sine_sum(a: &[f64], m: usize, modes: usize, s1: &[f64], s2: &[f64]) -> Vec<f64> {
    // t[j][i2] = Σ_{i1} a[i1,i2] s1[i1][j]
    let mut t = vec![0.0; modes * m];
    for i1 in 0..m {
        let row = &a[i1 * m..(i1 + 1) * m];
        if row.iter().all(|&v| v == 0.0) {
            continue;
        }
        for j in 0..modes {
            let s = s1[i1 * modes + j];
            let tj = &mut t[j * m..(j + 1) * m];
            for i2 in 0..m {
                tj[i2] += row[i2] * s;
            }
        }
    }
    let mut c = vec![0.0; modes * modes];
    for j in 0..modes {
        for i2 in 0..m {
            let v = t[j * m + i2];
            if v == 0.0 {
                continue;
            }
            for l in 0..modes {
                c[j * modes + l] += v * s2[i2 * modes + l];
            }
        }
    }
    c
}

/// h^{2d} Σ_x Σ_y a(x) b(y) C(x, y) over a simulation grid, with the kernel's
/// own lattice values (exact for the sampled covariance).
pub fn grid_bilinear(k: &dyn Covariance, grid: &Grid, a: &[f64], b: &[f64]) -> Result<f64> {
    let dim = grid.dim();
    let n = grid.n();
    let vol2 = grid.cell_volume() * grid.cell_volume();
    if let Some(gff) = k.sine_series() {
        if dim != 2 || grid.boundary() != Boundary::Box || grid.side() != 1.0 {
            return Err(Error::Unsupported("sine series need the unit square".into()));
        }
        let m = gff.modes();
        let s = gff.sine_table(grid);
        let ca = separable_sine_sum(a, n, m, &s, &s);
        let cb = separable_sine_sum(b, n, m, &s, &s);
        let mut acc = 0.0;
        for j in 0..m {
            for l in 0..m {
                acc += gff.weight(j + 1, l + 1) * ca[j * m + l] * cb[j * m + l];
            }
        }
        return Ok(4.0 * vol2 * acc);
    }
    if grid.boundary() == Boundary::Torus && k.stationary() {
        // circular correlation R(t) = Σ_x a(x + t) b(x)
        let fft = FftNd::new(&vec![n; dim]);
        let mut fa: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut fb: Vec<Complex64> = b.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft.forward(&mut fa);
        fft.forward(&mut fb);
        for (x, y) in fa.iter_mut().zip(&fb) {
            *x *= y.conj();
        }
        fft.inverse(&mut fa);
        let inv = 1.0 / fft.len() as f64;
        let offsets: Vec<[i64; 3]> = (0..grid.len())
            .map(|i| {
                let mi = grid.multi_index(i);
                let mut o = [0i64; 3];
                for axis in 0..dim {
                    let t = mi[axis] as i64;
                    o[axis] = if 2 * t > n as i64 { t - n as i64 } else { t };
                }
                o
            })
            .collect();
        if k.singular_diagonal() {
            return Err(Error::DiagonalSingularity);
        }
        let c = k.grid_offsets(grid, &offsets);
        let s: f64 = fa.iter().zip(&c).map(|(r, c)| r.re * inv * c).sum();
        return Ok(vol2 * s);
    }
    let rows: Vec<usize> = (0..a.len()).filter(|&i| a[i] != 0.0).collect();
    let cols: Vec<usize> = (0..b.len()).filter(|&j| b[j] != 0.0).collect();
    if k.singular_diagonal() && rows.iter().any(|i| cols.binary_search(i).is_ok()) {
        return Err(Error::DiagonalSingularity);
    }
    let partial: Vec<f64> = rows
        .par_iter()
        .map(|&i| {
            let pairs: Vec<(usize, usize)> = cols.iter().map(|&j| (i, j)).collect();
            let c = k.grid_pairs(grid, &pairs);
            a[i] * cols.iter().zip(&c).map(|(&j, c)| b[j] * c).sum::<f64>()
        })
        .collect();
    Ok(vol2 * partial.iter().sum::<f64>())
}

// Rejects integration regions that leave the kernel's domain.
fn check_domain(k: &dyn Covariance, tf: &TestFunction, reach: f64) -> Result<()> {
    if k.sine_series().is_some() {
        let half = tf.radius + reach;
        for axis in 0..tf.dim {
            let c = tf.center[axis];
            if c - half <= 0.0 || c + half >= 1.0 {
                return Err(Error::SupportViolation(format!(
                    "B(c, {half}) leaves the unit square of the sine-series kernel"
                )));
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// derivative variance and cross term

/// ∫∫ ∂_k f(x) ∂_k f(y) C(x, y) dx dy (axis zero-based).
pub fn derivative_variance(k: &dyn Covariance, tf: &TestFunction, axis: usize, spec: &QuadratureSpec) -> Result<f64> {
    check_domain(k, tf, 0.0)?;
    if tf.amplitude == 0.0 {
        return Ok(0.0);
    }
    refine_checked(spec, |h| {
        let shift = if k.singular_diagonal() { 0.5 * h } else { 0.0 };
        let pa = Patch::covering(tf, 0.0, h, 0.0);
        let pb = Patch::covering(tf, 0.0, h, shift);
        let a = pa.sample(|p| tf.grad(p, axis));
        let b = pb.sample(|p| tf.grad(p, axis));
        patch_bilinear(k, &pa, &a, &pb, &b)
    })
}

/// Var of the grid pairing -h^d Σ Γ ∂_k f for a field with covariance `k` on `grid`.
pub fn derivative_variance_grid(k: &dyn Covariance, grid: &Grid, tf: &TestFunction, axis: usize) -> Result<f64> {
    let g = tf.sample_grad(grid, axis);
    grid_bilinear(k, grid, &g, &g)
}

fn annulus_stencil(m: &Mollifier, eta: f64, h: f64, dim: usize, f: impl Fn(&Mollifier, &Point) -> f64) -> Vec<([i64; 3], f64)> {
    let reach = (eta / h).ceil() as i64;
    let zr = if dim == 3 { -reach..=reach } else { 0..=0 };
    let mut out = Vec::new();
    for a in -reach..=reach {
        for b in -reach..=reach {
            for c in zr.clone() {
                let z = [a as f64 * h, b as f64 * h, c as f64 * h];
                let v = f(m, &z);
                if v != 0.0 {
                    out.push(([a, b, c], v));
                }
            }
        }
    }
    out
}

/// β² ∫∫∫ f(x) ∂_k f(y) ∂_{u_k} C(u, y) φ_η(x - u) dx du dy.
///
/// Integrating by parts in u this is -β² ∫∫ (∂_k f * φ_η)(u) ∂_k f(y) C(u, y),
/// which tends to -β² derivative_variance as η → 0.
pub fn cross_term_quadrature(
    k: &dyn Covariance,
    tf: &TestFunction,
    axis: usize,
    eta: f64,
    beta: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    check_domain(k, tf, eta)?;
    if beta == 0.0 || tf.amplitude == 0.0 {
        return Ok(0.0);
    }
    let moll = Mollifier::new(tf.dim)?;
    refine_checked(spec, |h| {
        if eta < 8.0 * h {
            return Err(Error::ScaleUnresolved { eta, h });
        }
        let dim = tf.dim;
        let pa = Patch::covering(tf, eta, h, 0.0);
        let df = pa.sample(|p| tf.grad(p, axis));
        // ∂f * φ_η on the same lattice; φ_η is even so correlation equals convolution
        let stencil = annulus_stencil(&moll, eta, h, dim, |m, z| m.phi_eta(eta, z));
        let reach = (eta / h).ceil() as usize;
        let ms = 2 * reach + 1;
        let mut s = vec![0.0; ms.pow(dim as u32)];
        for (o, v) in &stencil {
            let mut idx = 0;
            for ax in 0..dim {
                idx = idx * ms + (o[ax] + reach as i64) as usize;
            }
            s[idx] = v * h.powi(dim as i32);
        }
        let r = linear_correlation(&df, pa.m, &s, ms, dim);
        let mr = pa.m + ms - 1;
        let conv: Vec<f64> = (0..pa.len())
            .map(|i| {
                let mi = cube_index(i, pa.m, dim);
                let mut idx = 0;
                for ax in 0..dim {
                    idx = idx * mr + (mi[ax] as usize + reach);
                }
                r[idx]
            })
            .collect();
        let shift = if k.singular_diagonal() { 0.5 * h } else { 0.0 };
        let pb = Patch::covering(tf, 0.0, h, shift);
        let b = pb.sample(|p| tf.grad(p, axis));
        Ok(-beta * beta * patch_bilinear(k, &pa, &conv, &pb, &b)?)
    })
}

/// Exact E[H_η T] on the estimator grid, for H_η with RegularizedCδ weights and
/// T = -h^d Σ Γ ∂_k f, where `k` is the field's covariance.
///
/// Uses E[μ(x) conj(μ(u)) Γ(y)] W(x,u) = iβ (C(x,y) - C(u,y)).
pub fn cross_term_grid(
    k: &dyn Covariance,
    grid: &Grid,
    tf: &TestFunction,
    axis: usize,
    eta: f64,
    beta: f64,
) -> Result<Complex64> {
    let moll = Mollifier::new(grid.dim())?;
    let h = grid.spacing();
    let offsets = grid.offsets_in_shell(0.5 * eta, eta);
    let stencil: Vec<([i64; 3], f64)> = offsets
        .iter()
        .map(|o| (*o, moll.dphi_eta(eta, &[o[0] as f64 * h, o[1] as f64 * h, o[2] as f64 * h], axis)))
        .filter(|(_, v)| *v != 0.0)
        .collect();
    let total: f64 = stencil.iter().map(|(_, v)| v).sum();
    let f = tf.sample(grid);
    // a(u) = h^d [Σ_x f(x) ∂φ_η(x - u) - S f(u)]
    let mut a = vec![0.0; grid.len()];
    for x in tf.support_indices(grid) {
        for (o, v) in &stencil {
            let u = grid
                .shifted(x, [-o[0], -o[1], -o[2]])
                .ok_or_else(|| Error::SupportViolation(format!("eta-halo leaves the domain at eta = {eta}")))?;
            a[u] += f[x] * v;
        }
    }
    let vol = grid.cell_volume();
    for (ai, fi) in a.iter_mut().zip(&f) {
        *ai = vol * (*ai - total * fi);
    }
    let b = tf.sample_grad(grid, axis);
    Ok(Complex64::new(0.0, beta * grid_bilinear(k, grid, &a, &b)?))
}

// ---------------------------------------------------------------------------
// second moments of H_η

/// Exact E[H_{η₁} conj(H_{η₂})] on the estimator grid for RegularizedCδ weights:
/// h^{4d} Σ f(x) ∂φ₁(x-u) f(y) ∂φ₂(y-v) E(x,y,u,v) with the field covariance `k`.
pub fn offdiag_covariance_grid(
    k: &Kernel,
    grid: &Grid,
    tf: &TestFunction,
    axis: usize,
    eta1: f64,
    eta2: f64,
    beta: f64,
) -> Result<f64> {
    if grid.dim() != 2 {
        return Err(Error::InfeasibleDimension(grid.dim()));
    }
    if grid.boundary() != Boundary::Box {
        return Err(Error::Unsupported("grid four-point sums need a box grid".into()));
    }
    if k.singular_diagonal() {
        return Err(Error::DiagonalSingularity);
    }
    let h = grid.spacing();
    for eta in [eta1, eta2] {
        if eta < 8.0 * h {
            return Err(Error::ScaleUnresolved { eta, h });
        }
    }
    let moll = Mollifier::new(2)?;
    let vol2 = grid.cell_volume() * grid.cell_volume();
    let supp = tf.support_indices(grid);
    let mut local = vec![usize::MAX; grid.len()];
    let mut halo: Vec<usize> = Vec::new();
    let mut visit = |i: usize, halo: &mut Vec<usize>| {
        if local[i] == usize::MAX {
            local[i] = halo.len();
            halo.push(i);
        }
        local[i]
    };
    for &x in &supp {
        visit(x, &mut halo);
    }
    // rows[(x local, [(u local, coefficient)])]
    let mut build = |eta: f64, halo: &mut Vec<usize>| -> Result<Vec<Vec<(usize, f64)>>> {
        let st: Vec<([i64; 3], f64)> = grid
            .offsets_in_shell(0.5 * eta, eta)
            .into_iter()
            .map(|o| (o, moll.dphi_eta(eta, &[o[0] as f64 * h, o[1] as f64 * h, 0.0], axis)))
            .filter(|(_, v)| *v != 0.0)
            .collect();
        let mut rows = Vec::with_capacity(supp.len());
        for &x in &supp {
            let fx = tf.eval(&grid.point(x));
            let mut row = Vec::with_capacity(st.len());
            for (o, v) in &st {
                let u = grid
                    .shifted(x, [-o[0], -o[1], 0])
                    .ok_or_else(|| Error::SupportViolation(format!("eta-halo leaves the domain at eta = {eta}")))?;
                row.push((visit(u, halo), vol2 * fx * v));
            }
            rows.push(row);
        }
        Ok(rows)
    };
    let f1 = build(eta1, &mut halo)?;
    let f2 = build(eta2, &mut halo)?;
    let nh = halo.len();
    let pairs: Vec<(usize, usize)> = (0..nh * nh).map(|i| (halo[i / nh], halo[i % nh])).collect();
    let c = k.grid_pairs(grid, &pairs);
    drop(pairs);
    let b2 = beta * beta;
    let ep: Vec<f64> = c.iter().map(|c| (b2 * c).exp()).collect();
    let em: Vec<f64> = c.iter().map(|c| (-b2 * c).exp()).collect();
    drop(c);
    let ns = supp.len();
    let per_x: Vec<f64> = (0..ns)
        .into_par_iter()
        .map(|xi| {
            let x = xi; // support points occupy the first local slots
            let mut bv = vec![0.0; nh];
            let mut total = 0.0;
            for &(u, c1) in &f1[xi] {
                for v in 0..nh {
                    bv[v] = ep[u * nh + v] * em[x * nh + v];
                }
                let mut acc = 0.0;
                for (y, row) in f2.iter().enumerate() {
                    let ay = ep[x * nh + y] * em[u * nh + y];
                    let mut inner = 0.0;
                    for &(v, c2) in row {
                        inner += c2 * bv[v];
                    }
                    acc += ay * inner;
                }
                total += c1 * acc;
            }
            total
        })
        .collect();
    Ok(per_x.iter().sum())
}

pub fn second_moment_h_grid(k: &Kernel, grid: &Grid, tf: &TestFunction, axis: usize, eta: f64, beta: f64) -> Result<f64> {
    offdiag_covariance_grid(k, grid, tf, axis, eta, eta, beta)
}

fn check_scale_pair(eta1: f64, eta2: f64) -> Result<()> {
    let (lo, hi) = if eta1 <= eta2 { (eta1, eta2) } else { (eta2, eta1) };
    if lo != hi && lo >= 0.5 * hi {
        return Err(Error::InvalidParameter(format!(
            "scales must coincide or be separated by a factor 2 (got {eta1}, {eta2})"
        )));
    }
    Ok(())
}

/// Continuum E[H_{η₁} conj(H_{η₂})] for a stationary kernel c(x - y):
/// ∫ R(w) I(w) dw with R the autocorrelation of f and
/// I(w) = e^{β²c(w)} ∫ ∂φ₁(z₁) e^{-β²c(w-z₁)} ∫ ∂φ₂(z₂) e^{β²[c(w-z₁+z₂) - c(w+z₂)]}.
///
/// The w lattice is offset by half a cell, so no argument of c is ever 0.
pub fn offdiag_covariance_quadrature(
    k: &dyn Covariance,
    tf: &TestFunction,
    axis: usize,
    eta1: f64,
    eta2: f64,
    beta: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    if tf.dim != 2 {
        return Err(Error::InfeasibleDimension(tf.dim));
    }
    check_scale_pair(eta1, eta2)?;
    if !k.stationary() {
        return Err(Error::Unsupported(format!(
            "{} is not stationary; use the grid four-point route",
            k.name()
        )));
    }
    if tf.amplitude == 0.0 {
        return Ok(0.0);
    }
    refine_checked(spec, |h| offdiag_stationary(k, tf, axis, eta1, eta2, beta, h))
}

pub fn second_moment_h_quadrature(
    k: &dyn Covariance,
    tf: &TestFunction,
    axis: usize,
    eta: f64,
    beta: f64,
    spec: &QuadratureSpec,
) -> Result<f64> {
    offdiag_covariance_quadrature(k, tf, axis, eta, eta, beta, spec)
}

fn offdiag_stationary(
    k: &dyn Covariance,
    tf: &TestFunction,
    axis: usize,
    eta1: f64,
    eta2: f64,
    beta: f64,
    h: f64,
) -> Result<f64> {
    for eta in [eta1, eta2] {
        if eta < 8.0 * h {
            return Err(Error::ScaleUnresolved { eta, h });
        }
    }
    let dim = 2;
    let moll = Mollifier::new(dim)?;
    let area = h * h;
    let pa = Patch::covering(tf, 0.0, h, 0.0);
    let pb = Patch::covering(tf, 0.0, h, -0.5 * h);
    let fa = pa.sample(|p| tf.eval(p));
    let fb = pb.sample(|p| tf.eval(p));
    // R(t h + s) = h^d Σ_i f(x_i) f(x_i - t h - s), s = (h/2, h/2)
    let rw: Vec<f64> = linear_correlation(&fa, pa.m, &fb, pb.m, dim).into_iter().map(|v| v * area).collect();
    let big_w = pa.m as i64 - 1;
    let st1 = annulus_stencil(&moll, eta1, h, dim, |m, z| m.dphi_eta(eta1, z, axis));
    let st2 = annulus_stencil(&moll, eta2, h, dim, |m, z| m.dphi_eta(eta2, z, axis));
    let m1 = (eta1 / h).ceil() as i64;
    let m2 = (eta2 / h).ceil() as i64;
    // exp(±β² c(t h + s)) for |t|_∞ <= T
    let big_t = big_w + m1 + m2;
    let side = (2 * big_t + 1) as usize;
    let b2 = beta * beta;
    let cvals: Vec<f64> = (0..side * side)
        .into_par_iter()
        .map(|i| {
            let t0 = (i / side) as i64 - big_t;
            let t1 = (i % side) as i64 - big_t;
            k.value_at_offset(&[(t0 as f64 + 0.5) * h, (t1 as f64 + 0.5) * h, 0.0])
        })
        .collect();
    let ep: Vec<f64> = cvals.iter().map(|c| (b2 * c).exp()).collect();
    let em: Vec<f64> = cvals.iter().map(|c| (-b2 * c).exp()).collect();
    let tab = |t0: i64, t1: i64| ((t0 + big_t) as usize) * side + (t1 + big_t) as usize;
    let reach = big_w + m2;
    let p = good_size((2 * reach + 1) as usize);
    let fft = FftNd::new(&[p, p]);
    let mut k2 = zeros(p * p);
    for (o, v) in &st2 {
        let i0 = o[0].rem_euclid(p as i64) as usize;
        let i1 = o[1].rem_euclid(p as i64) as usize;
        k2[i0 * p + i1] += Complex64::new(area * v, 0.0);
    }
    fft.forward(&mut k2);
    let inv = 1.0 / (p * p) as f64;
    let k2c: Vec<Complex64> = k2.iter().map(|v| v.conj() * inv).collect();
    let side_w = (2 * big_w + 1) as usize;
    // weight(w) = R(w) e^{β² c(w)}, indexed like rw (t + W per axis)
    let rweight: Vec<f64> = (0..side_w * side_w)
        .map(|i| {
            let t0 = (i / side_w) as i64 - big_w;
            let t1 = (i % side_w) as i64 - big_w;
            rw[i] * ep[tab(t0, t1)]
        })
        .collect();
    let per_z1: Vec<f64> = st1
        .par_iter()
        .map(|(z1, v1)| {
            let mut g = zeros(p * p);
            for a in -reach..=reach {
                for b in -reach..=reach {
                    let val = ep[tab(a - z1[0], b - z1[1])] * em[tab(a, b)];
                    g[((a + reach) as usize) * p + (b + reach) as usize] = Complex64::new(val, 0.0);
                }
            }
            fft.forward(&mut g);
            for (x, y) in g.iter_mut().zip(&k2c) {
                *x *= y;
            }
            fft.inverse(&mut g);
            let mut acc = 0.0;
            for a in -big_w..=big_w {
                for b in -big_w..=big_w {
                    let wi = ((a + big_w) as usize) * side_w + (b + big_w) as usize;
                    let rv = rweight[wi];
                    if rv == 0.0 {
                        continue;
                    }
                    let j = g[((a + reach) as usize) * p + (b + reach) as usize].re;
                    acc += rv * em[tab(a - z1[0], b - z1[1])] * j;
                }
            }
            area * v1 * acc
        })
        .collect();
    Ok(area * per_z1.iter().sum::<f64>())
}

// ---------------------------------------------------------------------------
// cache

/// Oracle values persisted as JSON, keyed by quantity, kernel, test function,
/// scales, β and quadrature level.
#[derive(Debug, Default, Serialize, Deserialize)]
pub struct OracleCache {
    entries: BTreeMap<String, f64>,
    #[serde(skip)]
    path: Option<PathBuf>,
}

impl OracleCache {
    pub fn in_memory() -> Self {
        OracleCache::default()
    }

    /// Loads `path` if it exists; `save` writes back to it.
    pub fn open(path: &Path) -> Result<Self> {
        let mut cache = if path.exists() {
            let text = std::fs::read_to_string(path)?;
            serde_json::from_str::<OracleCache>(&text)?
        } else {
            OracleCache::default()
        };
        cache.path = Some(path.to_path_buf());
        Ok(cache)
    }

    pub fn key(quantity: &str, kernel: &str, tf: &TestFunction, scales: &[f64], beta: f64, level: u32) -> String {
        format!(
            "{quantity}|{kernel}|c={:?},r={:?},a={:?}|eta={:?}|beta={:?}|level={level}",
            &tf.center[..tf.dim],
            tf.radius,
            tf.amplitude,
            scales,
            beta
        )
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        self.entries.get(key).copied()
    }

    pub fn get_or_compute(&mut self, key: String, f: impl FnOnce() -> Result<f64>) -> Result<f64> {
        if let Some(v) = self.entries.get(&key) {
            return Ok(*v);
        }
        let v = f()?;
        self.entries.insert(key, v);
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self) -> Result<()> {
        if let Some(path) = &self.path {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        }
        Ok(())
    }
}
