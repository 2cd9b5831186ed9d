//! Tukey bisquare loss, its score and weight functions, and the
//! median/MAD location-scale pair.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Tuning constant giving a Fisher-consistent M-scale with 50% breakdown
/// under normal errors.
pub const C_SCALE: f64 = 1.54764;
/// Tuning constant for the efficient MM stage.
pub const C_EFFICIENCY: f64 = 4.75;
/// 0.95 quantile of the chi-square distribution with one degree of freedom.
pub const CHI2_1_Q95: f64 = 3.841459;

/// Tukey's bisquare ρ-function, bounded by 1 and flat beyond `c`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bisquare {
    c: f64,
}

impl Bisquare {
    pub fn new(c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::InvalidInput(format!(
                "bisquare tuning constant must be positive and finite, got {c}"
            )));
        }
        Ok(Self { c })
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    /// ρ(t) = min(1 − (1 − (t/c)²)³, 1).
    #[inline]
    pub fn rho(&self, t: f64) -> f64 {
        let u = t / self.c;
        let u2 = u * u;
        if u2 >= 1.0 {
            1.0
        } else {
            let v = 1.0 - u2;
            1.0 - v * v * v
        }
    }

    /// ψ = ρ′, which is 6t(1 − (t/c)²)²/c² inside the support.
    #[inline]
    pub fn psi(&self, t: f64) -> f64 {
        let u = t / self.c;
        let u2 = u * u;
        if u2 >= 1.0 {
            0.0
        } else {
            let v = 1.0 - u2;
            6.0 * t * v * v / (self.c * self.c)
        }
    }

    /// ψ(t)/t rescaled so that the value at zero is 1: (1 − (t/c)²)² on the support.
    #[inline]
    pub fn weight(&self, t: f64) -> f64 {
        let u = t / self.c;
        let u2 = u * u;
        if u2 >= 1.0 {
            0.0
        } else {
            let v = 1.0 - u2;
            v * v
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RobustLocationScale {
    pub location: f64,
    pub scale: f64,
}

fn total_cmp(a: &f64, b: &f64) -> Ordering {
    a.partial_cmp(b).unwrap_or(Ordering::Equal)
}

/// Median of a non-empty slice; even lengths average the two central order
/// statistics. The slice is reordered in place.
pub fn median_in_place(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty sample");
    let n = values.len();
    let mid = n / 2;
    let (lower, upper, _) = values.select_nth_unstable_by(mid, total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower_max = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower_max + upper)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut buf = values.to_vec();
    median_in_place(&mut buf)
}

/// Median and `consistency × MAD`. A constant sample yields scale 0; callers
/// that divide by the scale must check for it.
pub fn median_mad(sample: &[f64], consistency: f64) -> Result<RobustLocationScale> {
    if sample.is_empty() {
        return Err(Error::InvalidInput("median_mad of an empty sample".into()));
    }
    if !(consistency > 0.0) {
        return Err(Error::InvalidInput(format!(
            "consistency factor must be positive, got {consistency}"
        )));
    }
    let mut buf = sample.to_vec();
    let location = median_in_place(&mut buf);
    for (d, &x) in buf.iter_mut().zip(sample) {
        *d = (x - location).abs();
    }
    let mad = median_in_place(&mut buf);
    Ok(RobustLocationScale {
        location,
        scale: consistency * mad,
    })
}

/// Unnormalized MAD about the median, the starting point for scale searches.
pub(crate) fn mad_about_median(values: &[f64]) -> f64 {
    let mut buf = values.to_vec();
    let m = median_in_place(&mut buf);
    for (d, &x) in buf.iter_mut().zip(values) {
        *d = (x - m).abs();
    }
    median_in_place(&mut buf)
}
