//! Floats with an `i64` binary exponent.
//!
//! Least-squares information grows like `f(y)²` and the estimation error
//! shrinks like `1/f(y)`; both leave the `f64` range long before the state
//! itself does. `Wide` keeps an `f64` mantissa in `[0.5, 1)` and a separate
//! exponent, so products and quotients never overflow or underflow.

use core::cmp::Ordering;
use core::ops::{Add, Div, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Wide {
    m: f64,
    e: i64,
}

impl Wide {
    pub const ZERO: Wide = Wide { m: 0.0, e: 0 };

    fn norm(m: f64, e: i64) -> Self {
        if m == 0.0 || !m.is_finite() {
            return Wide { m, e: 0 };
        }
        let (mm, ee) = libm::frexp(m);
        Wide { m: mm, e: e + ee as i64 }
    }

    pub fn from_f64(x: f64) -> Self {
        Self::norm(x, 0)
    }

    /// Nearest `f64`, saturating to `±inf` or `±0`.
    pub fn to_f64(self) -> f64 {
        if self.m == 0.0 || !self.m.is_finite() {
            return self.m;
        }
        if self.e > 2000 {
            return self.m * f64::INFINITY;
        }
        if self.e < -2000 {
            return self.m * 0.0;
        }
        libm::ldexp(self.m, self.e as i32)
    }

    pub fn is_zero(self) -> bool {
        self.m == 0.0
    }

    pub fn is_nan(self) -> bool {
        self.m.is_nan()
    }

    pub fn abs(self) -> Self {
        Wide { m: self.m.abs(), e: self.e }
    }

    /// `log2 |x|`; `-inf` at zero.
    pub fn log2_abs(self) -> f64 {
        if self.m == 0.0 {
            return f64::NEG_INFINITY;
        }
        libm::log2(self.m.abs()) + self.e as f64
    }

    /// `|x| > t` for a finite positive `t`.
    pub fn exceeds(self, t: f64) -> bool {
        self.abs().cmp_abs(Wide::from_f64(t)) == Ordering::Greater
    }

    fn cmp_abs(self, other: Wide) -> Ordering {
        match (self.m == 0.0, other.m == 0.0) {
            (true, true) => Ordering::Equal,
            (true, false) => Ordering::Less,
            (false, true) => Ordering::Greater,
            _ => self
                .e
                .cmp(&other.e)
                .then(self.m.abs().total_cmp(&other.m.abs())),
        }
    }

    /// `2^t` for a real `t`.
    pub fn exp2(t: f64) -> Self {
        let k = libm::floor(t);
        Self::norm(libm::exp2(t - k), k as i64)
    }

    /// `sign(x)·|x|^b` with the same conventions as
    /// [`signed_pow`](crate::models::signed_pow). Uses `libm::pow` whenever
    /// the result fits in an `f64`.
    pub fn signed_pow(x: f64, b: f64) -> Self {
        let direct = crate::models::signed_pow(x, b);
        if direct.is_finite() && (direct != 0.0 || x == 0.0) && direct.abs() >= f64::MIN_POSITIVE {
            return Self::from_f64(direct);
        }
        if x == 0.0 {
            return Self::from_f64(direct);
        }
        let magnitude = Self::exp2(b * libm::log2(x.abs()));
        if x < 0.0 {
            -magnitude
        } else {
            magnitude
        }
    }
}

impl From<f64> for Wide {
    fn from(x: f64) -> Self {
        Wide::from_f64(x)
    }
}

impl Neg for Wide {
    type Output = Wide;
    fn neg(self) -> Wide {
        Wide { m: -self.m, e: self.e }
    }
}

impl Mul for Wide {
    type Output = Wide;
    fn mul(self, rhs: Wide) -> Wide {
        Wide::norm(self.m * rhs.m, self.e + rhs.e)
    }
}

impl Div for Wide {
    type Output = Wide;
    fn div(self, rhs: Wide) -> Wide {
        Wide::norm(self.m / rhs.m, self.e - rhs.e)
    }
}

impl Add for Wide {
    type Output = Wide;
    fn add(self, rhs: Wide) -> Wide {
        if self.m == 0.0 {
            return rhs;
        }
        if rhs.m == 0.0 {
            return self;
        }
        let (big, small) = if self.e >= rhs.e { (self, rhs) } else { (rhs, self) };
        let shift = big.e - small.e;
        if shift > 64 {
            return big;
        }
        Wide::norm(big.m + libm::ldexp(small.m, -(shift as i32)), big.e)
    }
}

impl Sub for Wide {
    type Output = Wide;
    fn sub(self, rhs: Wide) -> Wide {
        self + (-rhs)
    }
}
