//! Cell-centred lattices, the bump test function and Riemann quadrature.

use crate::{Complex64, Error, Result};
use serde::{Deserialize, Serialize};

/// A point in up to three dimensions; unused trailing coordinates are zero.
pub type Point = [f64; 3];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    /// [0, L]^d with an actual boundary.
    Box,
    /// Periodic identification of opposite faces.
    Torus,
}

/// Uniform lattice of cell centres over [0, L]^d.
///
/// Linear indices are row-major with axis 0 varying slowest.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grid {
    dim: usize,
    n: usize,
    side: f64,
    boundary: Boundary,
}

impl Grid {
    pub fn new(dim: usize, n: usize, side: f64) -> Result<Grid> {
        Self::with_boundary(dim, n, side, Boundary::Box)
    }

    pub fn torus(dim: usize, n: usize, side: f64) -> Result<Grid> {
        Self::with_boundary(dim, n, side, Boundary::Torus)
    }

    pub fn with_boundary(dim: usize, n: usize, side: f64, boundary: Boundary) -> Result<Grid> {
        if dim != 2 && dim != 3 {
            return Err(Error::UnsupportedDimension(dim));
        }
        if n < 8 {
            return Err(Error::GridTooCoarse(n));
        }
        if !(side > 0.0 && side.is_finite()) {
            return Err(Error::InvalidParameter(format!("side length must be positive, got {side}")));
        }
        Ok(Grid { dim, n, side, boundary })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn spacing(&self) -> f64 {
        self.side / self.n as f64
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.spacing()
    }

    pub fn multi_index(&self, idx: usize) -> [usize; 3] {
        let n = self.n;
        match self.dim {
            2 => [idx / n, idx % n, 0],
            _ => [idx / (n * n), (idx / n) % n, idx % n],
        }
    }

    pub fn linear_index(&self, mi: [usize; 3]) -> usize {
        let n = self.n;
        match self.dim {
            2 => mi[0] * n + mi[1],
            _ => (mi[0] * n + mi[1]) * n + mi[2],
        }
    }

    pub fn point(&self, idx: usize) -> Point {
        let mi = self.multi_index(idx);
        let mut p = [0.0; 3];
        for k in 0..self.dim {
            p[k] = self.coord(mi[k]);
        }
        p
    }

    pub fn points(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.len()).map(move |i| self.point(i))
    }

    /// Index of `idx` shifted by a lattice vector; wraps on a torus, `None`
    /// if the shift leaves a box.
    pub fn shifted(&self, idx: usize, off: [i64; 3]) -> Option<usize> {
        let mi = self.multi_index(idx);
        let n = self.n as i64;
        let mut out = [0usize; 3];
        for k in 0..self.dim {
            let j = mi[k] as i64 + off[k];
            out[k] = match self.boundary {
                Boundary::Torus => j.rem_euclid(n) as usize,
                Boundary::Box => {
                    if j < 0 || j >= n {
                        return None;
                    }
                    j as usize
                }
            };
        }
        Some(self.linear_index(out))
    }

    /// Lattice offsets z (in units of h) with lo <= |z| h <= hi.
    pub fn offsets_in_shell(&self, lo: f64, hi: f64) -> Vec<[i64; 3]> {
        let h = self.spacing();
        let m = (hi / h).floor() as i64;
        let mut out = Vec::new();
        let z_range = if self.dim == 3 { -m..=m } else { 0..=0 };
        for a in -m..=m {
            for b in -m..=m {
                for c in z_range.clone() {
                    let r = h * ((a * a + b * b + c * c) as f64).sqrt();
                    if r >= lo && r <= hi {
                        out.push([a, b, c]);
                    }
                }
            }
        }
        out
    }

    pub fn sample(&self, f: impl Fn(&Point) -> f64) -> Vec<f64> {
        self.points().map(|p| f(&p)).collect()
    }

    /// h^d Σ values.
    pub fn quadrature(&self, values: &[f64]) -> f64 {
        assert_eq!(values.len(), self.len());
        self.cell_volume() * values.iter().sum::<f64>()
    }

    pub fn quadrature_complex(&self, values: &[Complex64]) -> Complex64 {
        assert_eq!(values.len(), self.len());
        values.iter().sum::<Complex64>() * self.cell_volume()
    }

    /// Distance from `p` to the box boundary (infinite on a torus).
    pub fn distance_to_boundary(&self, p: &Point) -> f64 {
        if self.boundary == Boundary::Torus {
            return f64::INFINITY;
        }
        (0..self.dim)
            .map(|k| p[k].min(self.side - p[k]))
            .fold(f64::INFINITY, f64::min)
    }
}

/// f(x) = A exp(-1 / (1 - |x-c|²/r²)) inside B(c, r), zero outside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub dim: usize,
    pub center: Point,
    pub radius: f64,
    pub amplitude: f64,
}

impl TestFunction {
    pub fn new(dim: usize, center: &[f64], radius: f64, amplitude: f64) -> Result<TestFunction> {
        if dim != 2 && dim != 3 {
            return Err(Error::UnsupportedDimension(dim));
        }
        if center.len() != dim {
            return Err(Error::InvalidParameter(format!(
                "test function centre has {} coordinates, expected {dim}",
                center.len()
            )));
        }
        if !(radius > 0.0) {
            return Err(Error::InvalidParameter(format!("test function radius must be positive, got {radius}")));
        }
        let mut c = [0.0; 3];
        c[..dim].copy_from_slice(center);
        Ok(TestFunction { dim, center: c, radius, amplitude })
    }

    /// Rejects supports that touch the boundary of `grid`'s domain.
    pub fn check_inside(&self, grid: &Grid) -> Result<()> {
        if self.dim != grid.dim() {
            return Err(Error::InvalidParameter("test function and grid dimensions differ".into()));
        }
        match grid.boundary() {
            Boundary::Box => {
                let d = grid.distance_to_boundary(&self.center) - self.radius;
                if d <= 0.0 {
                    return Err(Error::SupportViolation(format!(
                        "support B(c, {}) reaches the domain boundary",
                        self.radius
                    )));
                }
            }
            Boundary::Torus => {
                if 2.0 * self.radius >= grid.side() {
                    return Err(Error::SupportViolation("support wraps around the torus".into()));
                }
            }
        }
        Ok(())
    }

    fn rho2(&self, x: &Point) -> f64 {
        let mut s = 0.0;
        for k in 0..self.dim {
            let d = x[k] - self.center[k];
            s += d * d;
        }
        s / (self.radius * self.radius)
    }

    pub fn eval(&self, x: &Point) -> f64 {
        let q = self.rho2(x);
        if q >= 1.0 {
            return 0.0;
        }
        self.amplitude * (-1.0 / (1.0 - q)).exp()
    }

    /// ∂f/∂x_axis (axis is zero-based).
    pub fn grad(&self, x: &Point, axis: usize) -> f64 {
        let q = self.rho2(x);
        if q >= 1.0 {
            return 0.0;
        }
        let s = 1.0 - q;
        let f = self.amplitude * (-1.0 / s).exp();
        -f * 2.0 * (x[axis] - self.center[axis]) / (self.radius * self.radius * s * s)
    }

    pub fn sample(&self, grid: &Grid) -> Vec<f64> {
        grid.sample(|p| self.eval(p))
    }

    pub fn sample_grad(&self, grid: &Grid, axis: usize) -> Vec<f64> {
        grid.sample(|p| self.grad(p, axis))
    }

    /// Grid indices with f != 0.
    pub fn support_indices(&self, grid: &Grid) -> Vec<usize> {
        (0..grid.len()).filter(|&i| self.rho2(&grid.point(i)) < 1.0).collect()
    }
}
