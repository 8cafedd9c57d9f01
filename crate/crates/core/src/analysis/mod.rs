//! Closed-form stabilizability criteria and critical values.
//!
//! Boundary cases follow the closed side of each criterion and are also
//! flagged with [`RegimeVerdict::boundary`].

pub mod poly;

use alloc::format;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adversary::PiecewiseLinearFn;
use crate::models::{check_exponents, MjlsSpec};
use crate::{Error, Result};

pub use poly::Polynomial;

/// Tolerance for flagging a quantity as sitting on its critical value.
pub const BOUNDARY_TOL: f64 = 1e-12;

/// Critical growth exponent of the scalar parametric model.
pub const CRITICAL_EXPONENT: f64 = 4.0;

/// Lower edge of `L·h` at which a stabilizing sampled-data law exists.
pub fn sampled_stabilizable_edge() -> f64 {
    libm::log(4.0)
}

/// Upper edge of `L·h` beyond which no sampled-data law stabilizes.
pub const SAMPLED_IMPOSSIBLE_EDGE: f64 = 7.53;

/// Critical radius `3/2 + √2` of the first-order nonparametric problem.
pub fn critical_radius() -> f64 {
    1.5 + core::f64::consts::SQRT_2
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    Stabilizable,
    Impossible,
    /// Between the sufficient condition for stability and the one for
    /// impossibility (sampled-data only).
    Gap,
    /// A one-sided impossibility criterion did not fire.
    NotTriggered,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegimeVerdict {
    pub regime: Regime,
    pub boundary: bool,
    /// Point certifying the verdict (e.g. `z` with `P(z) < 0`).
    pub witness: Option<f64>,
    /// Value of the deciding quantity (e.g. `P(z)`, `L·h`, `C·P`).
    pub value: Option<f64>,
}

impl RegimeVerdict {
    fn new(regime: Regime) -> Self {
        Self {
            regime,
            boundary: false,
            witness: None,
            value: None,
        }
    }

    fn value(mut self, value: f64) -> Self {
        self.value = Some(value);
        self
    }

    fn boundary(mut self, boundary: bool) -> Self {
        self.boundary = boundary;
        self
    }

    pub fn is_impossible(&self) -> bool {
        self.regime == Regime::Impossible
    }
}

fn near(a: f64, b: f64) -> bool {
    (a - b).abs() <= BOUNDARY_TOL
}

/// Classifies the growth exponent of `y' = θ f(y) + u + w` with
/// `f(x) ~ M x^b`: stabilizable iff `b < 4`.
pub fn parametric_regime(b: f64) -> Result<RegimeVerdict> {
    if !(b >= 0.0) || !b.is_finite() {
        return Err(Error::Domain(format!("growth exponent must be nonnegative, got {b}")));
    }
    let regime = if b >= CRITICAL_EXPONENT {
        Regime::Impossible
    } else {
        Regime::Stabilizable
    };
    Ok(RegimeVerdict::new(regime)
        .value(b)
        .boundary(near(b, CRITICAL_EXPONENT)))
}

/// `P(z) = z^{p+1} - b_1 z^p + (b_1 - b_2) z^{p-1} + … + (b_{p-1} - b_p) z + b_p`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharPoly {
    poly: Polynomial,
    leading_exponent: f64,
}

impl CharPoly {
    pub fn coeffs(&self) -> &[f64] {
        self.poly.coeffs()
    }

    pub fn polynomial(&self) -> &Polynomial {
        &self.poly
    }

    /// The largest exponent `b_1`.
    pub fn leading_exponent(&self) -> f64 {
        self.leading_exponent
    }

    pub fn eval(&self, z: f64) -> f64 {
        self.poly.eval(z)
    }
}

pub fn characteristic_poly(exponents: &[f64]) -> Result<CharPoly> {
    check_exponents(exponents)?;
    let p = exponents.len();
    let mut coeffs = Vec::with_capacity(p + 2);
    coeffs.push(1.0);
    coeffs.push(-exponents[0]);
    for w in exponents.windows(2) {
        coeffs.push(w[0] - w[1]);
    }
    coeffs.push(exponents[p - 1]);
    Ok(CharPoly {
        poly: Polynomial::new(coeffs),
        leading_exponent: exponents[0],
    })
}

/// The two independent minimum searches of `P` over `(1, b_1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyMinimum {
    pub grid_z: f64,
    pub grid_value: f64,
    pub critical_z: f64,
    pub critical_value: f64,
}

impl PolyMinimum {
    /// The lower of the two minima. Near-ties go to the critical point, which
    /// is located to full precision while the grid refinement is not.
    pub fn best(&self) -> (f64, f64) {
        let tie = 8.0 * f64::EPSILON * self.grid_value.abs().max(1.0);
        if self.critical_value <= self.grid_value + tie {
            (self.critical_z, self.critical_value)
        } else {
            (self.grid_z, self.grid_value)
        }
    }
}

/// Minimum of `poly` over `(1, upper)`; `None` when the interval is empty.
pub fn poly_minimum(poly: &Polynomial, upper: f64) -> Option<PolyMinimum> {
    if !(upper > 1.0) {
        return None;
    }
    let (grid_z, grid_value) = poly::grid_minimum(poly, 1.0, upper);
    let (critical_z, critical_value) = poly::critical_minimum(poly, 1.0, upper);
    Some(PolyMinimum {
        grid_z,
        grid_value,
        critical_z,
        critical_value,
    })
}

/// Impossibility criterion: some `z ∈ (1, b_1)` with `P(z) < 0`.
///
/// Tangential minima (`min P = 0`) do not trigger.
pub fn poly_impossible(poly: &CharPoly, b1: f64) -> RegimeVerdict {
    let Some(min) = poly_minimum(poly.polynomial(), b1) else {
        return RegimeVerdict::new(Regime::NotTriggered);
    };
    let (z, value) = min.best();
    let regime = if value < -BOUNDARY_TOL {
        Regime::Impossible
    } else {
        Regime::NotTriggered
    };
    RegimeVerdict {
        regime,
        boundary: value.abs() <= BOUNDARY_TOL,
        witness: Some(z),
        value: Some(value),
    }
}

fn highorder_margin(slope: f64, order: usize) -> f64 {
    let p = order as f64;
    slope + 0.5 - (1.0 + 1.0 / p) * libm::pow(p * slope, 1.0 / (p + 1.0))
}

/// High-order impossibility: `L + 1/2 ≥ (1 + 1/p)(pL)^{1/(p+1)}`.
///
/// The margin is convex in `L` with its minimum `-1/2` at `L = 1/p`, so the
/// inequality also holds on a small interval near zero. Only the branch
/// `L > 1/p` carries the critical radius; below it the verdict is
/// `NotTriggered`.
pub fn highorder_impossible(slope: f64, order: usize) -> Result<RegimeVerdict> {
    if !(slope > 0.0 && slope.is_finite()) || order == 0 {
        return Err(Error::Domain(format!(
            "need L > 0 and p ≥ 1, got L = {slope}, p = {order}"
        )));
    }
    let margin = highorder_margin(slope, order);
    let upper_branch = slope > 1.0 / order as f64;
    let boundary = upper_branch && margin.abs() <= BOUNDARY_TOL;
    let regime = if upper_branch && (margin >= 0.0 || boundary) {
        Regime::Impossible
    } else {
        Regime::NotTriggered
    };
    Ok(RegimeVerdict::new(regime).value(margin).boundary(boundary))
}

/// Smallest `L > 1/p` at which [`highorder_impossible`] fires, by bisection
/// on the margin.
pub fn highorder_critical_radius(order: usize) -> Result<f64> {
    if order == 0 {
        return Err(Error::Domain("order must be at least 1".into()));
    }
    let lo = 1.0 / order as f64;
    let mut hi = 2.0 * lo + 1.0;
    while highorder_margin(hi, order) < 0.0 {
        hi *= 2.0;
    }
    Ok(poly::bisect(|l| highorder_margin(l, order), lo, hi))
}

/// `lim_{α→∞} sup |f(x) - f(y)| / (|x - y| + α)` for a piecewise-linear
/// function: the larger absolute tail slope.
pub fn quasi_norm(f: &PiecewiseLinearFn) -> Result<f64> {
    let (left, right) = f
        .tail_slopes()
        .ok_or_else(|| Error::Precondition("function has no anchors".into()))?;
    Ok(left.abs().max(right.abs()))
}

/// Sampled-data regimes by `L·h`: below `ln 4` stabilizable, above `7.53`
/// impossible, in between a gap.
pub fn sampled_regime(slope: f64, period: f64) -> Result<RegimeVerdict> {
    if !(slope > 0.0 && period > 0.0) || !(slope * period).is_finite() {
        return Err(Error::Domain(format!(
            "need L, h > 0, got L = {slope}, h = {period}"
        )));
    }
    let lh = slope * period;
    let low = sampled_stabilizable_edge();
    let regime = if lh < low {
        Regime::Stabilizable
    } else if lh > SAMPLED_IMPOSSIBLE_EDGE {
        Regime::Impossible
    } else {
        Regime::Gap
    };
    Ok(RegimeVerdict::new(regime)
        .value(lh)
        .boundary(near(lh, low) || near(lh, SAMPLED_IMPOSSIBLE_EDGE)))
}

/// Scalar two-mode jump system with `B = 1` and `p_12 = p_21`:
/// stabilizable iff `(A_2 - A_1)^2 (1 - p_12) p_12 < 1`.
pub fn scalar_mjls_stabilizable(a1: f64, a2: f64, p12: f64) -> Result<RegimeVerdict> {
    if !(p12 > 0.0 && p12 < 1.0) {
        return Err(Error::Domain(format!(
            "switching probability must lie in (0, 1), got {p12}"
        )));
    }
    let dispersion = (a2 - a1) * (a2 - a1);
    let uncertainty = (1.0 - p12) * p12;
    let cp = dispersion * uncertainty;
    let boundary = near(cp, 1.0);
    let regime = if cp < 1.0 && !boundary {
        Regime::Stabilizable
    } else {
        Regime::Impossible
    };
    Ok(RegimeVerdict::new(regime).value(cp).boundary(boundary))
}

/// Searches for `K` with `det[(A_i - A_j) - (B_i - B_j)K] ≠ 0` for all
/// `i ≠ j`, trying `trials` uniform draws on `[-1, 1]`.
pub fn verify_h2<R: Rng + ?Sized>(
    spec: &MjlsSpec,
    trials: usize,
    rng: &mut R,
) -> Option<DMatrix<f64>> {
    let (n, m) = (spec.state_dim(), spec.input_dim());
    if spec.modes() < 2 {
        return Some(DMatrix::zeros(m, n));
    }
    (0..trials).find_map(|_| {
        let k = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..=1.0));
        separates_modes(spec, &k).then_some(k)
    })
}

/// Whether `K` makes every pair of modes distinguishable.
pub fn separates_modes(spec: &MjlsSpec, k: &DMatrix<f64>) -> bool {
    let modes = spec.modes();
    (0..modes).all(|i| {
        (0..modes).filter(|&j| j != i).all(|j| {
            let diff = (spec.a(i) - spec.a(j)) - (spec.b(i) - spec.b(j)) * k;
            diff.determinant().abs() > 1e-9
        })
    })
}
