//! The rescale function: an affine map that takes one expert's batch of
//! distances to adaptive margins with mean `mu` and variance `U(beta)`.
//!
//! `U(beta)` is the variance of a normal distribution that puts 90% of its
//! mass within `±beta` of its mean. It is found by bisection on the
//! standard deviation against [`normal_cdf`].

use crate::error::{Error, Result};
use crate::experts::DistanceMatrix;
use crate::math::{normal_cdf, Matrix};

/// Probability mass that must fall inside `[mu − beta, mu + beta]`.
pub const CONFIDENCE: f64 = 0.90;
const COVERAGE_TOL: f64 = 1e-10;
const MAX_BISECTION_ITERS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RescaleConfig {
    /// Target margin mean; set to the hard margin.
    pub mu: f64,
    /// Half-width of the 90% interval of the margin distribution.
    pub beta: f64,
    pub var_floor: f64,
}

impl RescaleConfig {
    pub const DEFAULT_VAR_FLOOR: f64 = 1e-12;

    pub fn new(mu: f64, beta: f64) -> Result<Self> {
        Self::with_floor(mu, beta, Self::DEFAULT_VAR_FLOOR)
    }

    pub fn with_floor(mu: f64, beta: f64, var_floor: f64) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::Config(format!("mu must be finite, got {mu}")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
        }
        if var_floor.is_nan() || var_floor <= 0.0 {
            return Err(Error::Config(format!("var_floor must be > 0, got {var_floor}")));
        }
        Ok(Self {
            mu,
            beta,
            var_floor,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MarginMatrix {
    pub values: Matrix,
    pub mu: f64,
    pub beta: f64,
}

impl MarginMatrix {
    /// Every entry equal to `alpha`, as produced when `beta = 0`.
    pub fn constant(b: usize, alpha: f64) -> Self {
        let mut values = Matrix::zeros(b, b);
        values.as_mut_slice().fill(alpha);
        Self {
            values,
            mu: alpha,
            beta: 0.0,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.values.rows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }
}

/// Mean and population variance over the off-diagonal entries.
pub fn batch_stats(d: &DistanceMatrix) -> (f64, f64) {
    off_diagonal_stats(&d.values)
}

pub(crate) fn off_diagonal_stats(m: &Matrix) -> (f64, f64) {
    let b = m.rows();
    let count = (b * (b - 1)) as f64;
    let mut sum = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                sum += m.get(i, j);
            }
        }
    }
    let mean = sum / count;
    let mut sq = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i != j {
                let dv = m.get(i, j) - mean;
                sq += dv * dv;
            }
        }
    }
    (mean, sq / count)
}

fn coverage(beta: f64, sigma: f64) -> f64 {
    normal_cdf(beta / sigma) - normal_cdf(-beta / sigma)
}

/// Standard deviation whose normal puts 90% of its mass in `±beta`.
pub fn beta_to_std(beta: f64) -> f64 {
    if beta <= 0.0 {
        return 0.0;
    }
    // Coverage falls as sigma grows.
    let (mut lo, mut hi) = (beta / 10.0, 10.0 * beta);
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..MAX_BISECTION_ITERS {
        mid = 0.5 * (lo + hi);
        let gap = coverage(beta, mid) - CONFIDENCE;
        if gap.abs() < COVERAGE_TOL {
            break;
        }
        if gap > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid
}

/// `U(beta)`: the margin variance implied by `beta`.
pub fn beta_to_variance(beta: f64) -> f64 {
    let s = beta_to_std(beta);
    s * s
}

/// Maps distances to margins: `(d − mean) / sqrt(var / U(beta)) + mu`.
///
/// Falls back to constant `mu` when the batch variance is at or below the
/// floor or when `beta = 0`. The diagonal is set to `mu` and is never read.
pub fn rescale_margins(d: &DistanceMatrix, cfg: &RescaleConfig) -> MarginMatrix {
    let b = d.batch_size();
    let (mean, var) = batch_stats(d);
    let target_var = beta_to_variance(cfg.beta);
    if var <= cfg.var_floor || target_var == 0.0 {
        let mut m = MarginMatrix::constant(b, cfg.mu);
        m.beta = cfg.beta;
        return m;
    }
    let scale = (target_var / var).sqrt();
    let mut values = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            let v = if i == j {
                cfg.mu
            } else {
                (d.get(i, j) - mean) * scale + cfg.mu
            };
            values.set(i, j, v);
        }
    }
    MarginMatrix {
        values,
        mu: cfg.mu,
        beta: cfg.beta,
    }
}
