//! Annulus-supported mollifier φ on B(0,1) \ B(0,1/2) and its rescalings.

use crate::grid::Point;
use crate::quad::Composite;
use crate::{Error, Result};
use std::f64::consts::PI;

const PROFILE_SHARPNESS: f64 = 16.0;

/// Radial profile p(ρ) = exp(-1 / (16 (ρ - 1/2)(1 - ρ))) on (1/2, 1).
pub fn profile(rho: f64) -> f64 {
    if rho <= 0.5 || rho >= 1.0 {
        return 0.0;
    }
    (-1.0 / (PROFILE_SHARPNESS * (rho - 0.5) * (1.0 - rho))).exp()
}

/// p'(ρ).
pub fn profile_derivative(rho: f64) -> f64 {
    if rho <= 0.5 || rho >= 1.0 {
        return 0.0;
    }
    let a = PROFILE_SHARPNESS * (rho - 0.5) * (1.0 - rho);
    let da = PROFILE_SHARPNESS * (1.5 - 2.0 * rho);
    profile(rho) * da / (a * a)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Mollifier {
    dim: usize,
    z: f64,
}

impl Mollifier {
    pub fn new(dim: usize) -> Result<Mollifier> {
        if dim != 2 && dim != 3 {
            return Err(Error::UnsupportedDimension(dim));
        }
        Ok(Mollifier { dim, z: normalization(dim) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Z = ∫ p(|x|) dx.
    pub fn normalization(&self) -> f64 {
        self.z
    }

    fn norm(&self, x: &Point) -> f64 {
        x[..self.dim].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn phi(&self, x: &Point) -> f64 {
        profile(self.norm(x)) / self.z
    }

    /// ∂φ/∂x_axis via the chain rule through |x|.
    pub fn dphi(&self, x: &Point, axis: usize) -> f64 {
        let r = self.norm(x);
        if r <= 0.5 || r >= 1.0 {
            return 0.0;
        }
        profile_derivative(r) * x[axis] / (r * self.z)
    }

    pub fn phi_eta(&self, eta: f64, x: &Point) -> f64 {
        self.phi(&scale(x, eta)) / eta.powi(self.dim as i32)
    }

    pub fn dphi_eta(&self, eta: f64, x: &Point, axis: usize) -> f64 {
        self.dphi(&scale(x, eta), axis) / eta.powi(self.dim as i32 + 1)
    }
}

fn scale(x: &Point, eta: f64) -> Point {
    [x[0] / eta, x[1] / eta, x[2] / eta]
}

/// Surface area of the unit sphere in R^d.
pub fn sphere_area(dim: usize) -> f64 {
    match dim {
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => unreachable!(),
    }
}

// Composite Gauss–Legendre on (1/2, 1), doubling the panel count until two
// consecutive values agree to round-off. Final rule has ~10^5 nodes.
fn normalization(dim: usize) -> f64 {
    let radial = |panels| {
        Composite::new(0.5, 1.0, panels, 16).integrate(|r| profile(r) * r.powi(dim as i32 - 1))
    };
    let mut panels = 64;
    let mut prev = radial(panels);
    while panels < 8192 {
        panels *= 2;
        let next = radial(panels);
        if (next - prev).abs() <= 1e-15 * next.abs() {
            prev = next;
            break;
        }
        prev = next;
    }
    sphere_area(dim) * prev
}
