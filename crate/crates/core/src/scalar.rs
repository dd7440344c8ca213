//! Scalar abstraction for weights, loads and efficiency ratios.
//!
//! The allocator and the efficiency summaries are written once over [`Scalar`]
//! and instantiated with `f64` for statistical experiments and with
//! `Ratio<u64>` wherever tier boundaries and load conservation must be exact
//! (SSE ball weights are always `len / p`).

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Num, ToPrimitive};

/// Exact non-negative rational weight.
pub type Exact = Ratio<u64>;

pub trait Scalar: Num + Copy + PartialOrd + Debug + Send + Sync + 'static {
    /// `num / den`; `den` must be nonzero.
    fn from_ratio(num: u64, den: u64) -> Self;

    fn from_u64(v: u64) -> Self {
        Self::from_ratio(v, 1)
    }

    /// Best representable approximation of a finite non-negative float.
    fn approx_f64(v: f64) -> Self;

    fn to_f64(self) -> f64;

    fn max_of(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Scalar for f64 {
    fn from_ratio(num: u64, den: u64) -> Self {
        num as f64 / den as f64
    }

    fn approx_f64(v: f64) -> Self {
        v
    }

    fn to_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    fn from_ratio(num: u64, den: u64) -> Self {
        (num as f64 / den as f64) as f32
    }

    fn approx_f64(v: f64) -> Self {
        v as f32
    }

    fn to_f64(self) -> f64 {
        self as f64
    }
}

/// Denominator used when snapping floats onto the rational grid.
const APPROX_DEN: u64 = 1 << 20;

impl Scalar for Ratio<u64> {
    fn from_ratio(num: u64, den: u64) -> Self {
        Ratio::new(num, den)
    }

    fn approx_f64(v: f64) -> Self {
        assert!(v.is_finite() && v >= 0.0, "weight must be finite and non-negative");
        Ratio::new((v * APPROX_DEN as f64).round() as u64, APPROX_DEN)
    }

    fn to_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

/// Ceiling of a non-negative scalar as an integer.
pub fn ceil_u64<S: Scalar>(v: S) -> u64 {
    let f = v.to_f64();
    let c = f.ceil();
    // Guard against representation noise just above an integer.
    if (c - 1.0) >= 0.0 && S::from_u64(c as u64 - 1) >= v {
        c as u64 - 1
    } else {
        c as u64
    }
}
