//! Multi-dimensional complex FFT over row-major arrays (thin layer on rustfft).

use crate::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Unnormalized forward/inverse transforms; `inverse(forward(x)) = N x`.
#[derive(Clone)]
pub struct FftNd {
    dims: Vec<usize>,
    fwd: Vec<Arc<dyn Fft<f64>>>,
    inv: Vec<Arc<dyn Fft<f64>>>,
}

impl FftNd {
    pub fn new(dims: &[usize]) -> FftNd {
        let mut planner = FftPlanner::new();
        let fwd = dims.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inv = dims.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        FftNd { dims: dims.to_vec(), fwd, inv }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, &self.fwd);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, &self.inv);
    }

    fn run(&self, data: &mut [Complex64], plans: &[Arc<dyn Fft<f64>>]) {
        assert_eq!(data.len(), self.len());
        let d = self.dims.len();
        let total = self.len();
        // last axis is contiguous: transform all rows in one call
        plans[d - 1].process(data);
        let mut line = Vec::new();
        for axis in 0..d - 1 {
            let n = self.dims[axis];
            let stride: usize = self.dims[axis + 1..].iter().product();
            let outer = total / (n * stride);
            line.resize(n * stride, Complex64::new(0.0, 0.0));
            for o in 0..outer {
                let base = o * n * stride;
                // gather a block of `stride` lines, each of length n, contiguous per line
                for i in 0..n {
                    for s in 0..stride {
                        line[s * n + i] = data[base + i * stride + s];
                    }
                }
                plans[axis].process(&mut line);
                for i in 0..n {
                    for s in 0..stride {
                        data[base + i * stride + s] = line[s * n + i];
                    }
                }
            }
        }
    }
}

/// Smallest 2^a 3^b 5^c that is >= n.
pub fn good_size(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut k = m;
        for p in [2, 3, 5] {
            while k % p == 0 {
                k /= p;
            }
        }
        if k == 1 {
            return m;
        }
        m += 1;
    }
}
