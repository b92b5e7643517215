//! Sample statistics with index-ordered reductions.

use crate::Complex64;

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn mean_complex(xs: &[Complex64]) -> Complex64 {
    xs.iter().sum::<Complex64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() as f64 - 1.0)
}

/// Standard error of the sample mean.
pub fn stderr(xs: &[f64]) -> f64 {
    (variance(xs) / xs.len() as f64).sqrt()
}

/// Mean and standard error in one pass over the slice.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub stderr: f64,
}

pub fn estimate(xs: &[f64]) -> Estimate {
    Estimate { mean: mean(xs), stderr: if xs.len() > 1 { stderr(xs) } else { f64::NAN } }
}

/// z = (mc - oracle) / se; an exact match with se = 0 gives 0.
pub fn z_score(mc: f64, oracle: f64, se: f64) -> f64 {
    let diff = mc - oracle;
    if se > 0.0 {
        diff / se
    } else if diff.abs() <= 1e-12 * oracle.abs().max(1.0) {
        0.0
    } else {
        f64::INFINITY.copysign(diff)
    }
}

pub fn skewness(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = xs.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

pub fn excess_kurtosis(xs: &[f64]) -> f64 {
    let m = mean(xs);
    let n = xs.len() as f64;
    let m2 = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - m).powi(4)).sum::<f64>() / n;
    m4 / (m2 * m2) - 3.0
}

/// Least-squares slope of y on x.
pub fn regression_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Re <a - ā, b - b̄> / sqrt(<|a - ā|²> <|b - b̄|²>).
pub fn complex_correlation(a: &[Complex64], b: &[Complex64]) -> f64 {
    let ma = mean_complex(a);
    let mb = mean_complex(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += (dx * dy.conj()).re;
        saa += dx.norm_sqr();
        sbb += dy.norm_sqr();
    }
    sab / (saa * sbb).sqrt()
}

/// Contiguous batches of (nearly) equal size, in index order.
pub fn batch_ranges(len: usize, batches: usize) -> Vec<std::ops::Range<usize>> {
    let b = batches.min(len).max(1);
    (0..b).map(|i| (i * len / b)..((i + 1) * len / b)).collect()
}

/// Batch-means standard error of a statistic computed per batch.
///
/// Returns (full-sample statistic, stderr); stderr is NaN for fewer than two batches.
pub fn batch_means<F>(len: usize, batches: usize, stat: F) -> (f64, f64)
where
    F: Fn(std::ops::Range<usize>) -> f64,
{
    let full = stat(0..len);
    let ranges = batch_ranges(len, batches);
    if ranges.len() < 2 {
        return (full, f64::NAN);
    }
    let vals: Vec<f64> = ranges.into_iter().map(stat).collect();
    (full, stderr(&vals))
}
