//! Lipschitz function stores and the greedy online adversaries that build
//! them.
//!
//! A [`PiecewiseLinearFn`] is a finite set of committed anchors plus an
//! extension rule. Every committed anchor is checked against all earlier
//! ones, so at any time the store describes a non-empty set of Lipschitz-`L`
//! functions; [`realize`] picks the canonical member.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::models::{rk4_hold, ScalarFn, SampledSpec};
use crate::{Error, Result};

/// Relative slack used by the consistency checks.
const CONSISTENCY_TOL: f64 = 1e-12;

fn slack(scale: f64) -> f64 {
    CONSISTENCY_TOL * (1.0 + scale)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub x: f64,
    pub v: f64,
}

/// How a function is extended away from its anchors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extension {
    /// `min_i (v_i + L|x - x_i|)`, the largest consistent extension.
    #[default]
    McShaneMin,
    /// `max_i (v_i - L|x - x_i|)`, the smallest consistent extension.
    McShaneMax,
    /// Average of the two envelopes.
    Midpoint,
    /// Linear interpolation; end segments are extended linearly.
    Linear,
}

/// Lipschitz-`L` function on the real line given by anchors and an
/// extension rule, optionally clamped to `|f(x)| ≤ L|x| + c`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinearFn {
    anchors: Vec<Anchor>,
    slope: f64,
    extension: Extension,
    growth_offset: Option<f64>,
}

impl PiecewiseLinearFn {
    pub fn new(slope: f64, extension: Extension) -> Result<Self> {
        if !(slope > 0.0 && slope.is_finite()) {
            return Err(Error::Domain(format!("slope budget must be positive, got {slope}")));
        }
        Ok(Self {
            anchors: Vec::new(),
            slope,
            extension,
            growth_offset: None,
        })
    }

    /// Store whose values are also confined to `|f(x)| ≤ L|x| + offset`.
    pub fn with_growth_bound(slope: f64, offset: f64, extension: Extension) -> Result<Self> {
        if !(offset > 0.0 && offset.is_finite()) {
            return Err(Error::Domain(format!("offset must be positive, got {offset}")));
        }
        let mut f = Self::new(slope, extension)?;
        f.growth_offset = Some(offset);
        Ok(f)
    }

    pub fn from_anchors(
        slope: f64,
        extension: Extension,
        anchors: impl IntoIterator<Item = (f64, f64)>,
    ) -> Result<Self> {
        let mut f = Self::new(slope, extension)?;
        for (x, v) in anchors {
            f.commit(x, v)?;
        }
        Ok(f)
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn extension(&self) -> Extension {
        self.extension
    }

    pub fn growth_offset(&self) -> Option<f64> {
        self.growth_offset
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn with_extension(mut self, extension: Extension) -> Self {
        self.extension = extension;
        self
    }

    fn lookup(&self, x: f64) -> core::result::Result<usize, usize> {
        // +0.0 folds -0.0 onto 0.0 for the total order
        let x = x + 0.0;
        self.anchors.binary_search_by(|a| a.x.total_cmp(&x))
    }

    fn envelope(&self, x: f64) -> Option<f64> {
        self.growth_offset.map(|c| self.slope * x.abs() + c)
    }

    /// Adds `(x, v)` after checking it against every stored anchor.
    ///
    /// Re-committing an existing abscissa with the same value is a no-op.
    pub fn commit(&mut self, x: f64, v: f64) -> Result<()> {
        let x = x + 0.0;
        if !(x.is_finite() && v.is_finite()) {
            return Err(Error::Precondition(format!("non-finite anchor ({x}, {v})")));
        }
        if let Some(bound) = self.envelope(x) {
            if v.abs() > bound + slack(bound) {
                return Err(Error::Precondition(format!(
                    "anchor ({x}, {v}) violates the growth bound {bound}"
                )));
            }
        }
        for a in &self.anchors {
            let run = self.slope * (x - a.x).abs();
            let rise = (v - a.v).abs();
            if rise > run + slack(run.max(v.abs()).max(a.v.abs())) {
                return Err(Error::Precondition(format!(
                    "anchor ({x}, {v}) is inconsistent with ({}, {}) at slope {}",
                    a.x, a.v, self.slope
                )));
            }
        }
        match self.lookup(x) {
            Ok(i) => {
                let existing = self.anchors[i].v;
                if (existing - v).abs() > slack(existing.abs()) {
                    return Err(Error::Precondition(format!(
                        "abscissa {x} already committed with value {existing}"
                    )));
                }
            }
            Err(i) => self.anchors.insert(i, Anchor { x, v }),
        }
        Ok(())
    }

    /// `(max_i (v_i - L|x - x_i|), min_i (v_i + L|x - x_i|))`; unbounded
    /// when no anchors are stored. Ignores the growth bound.
    pub fn feasible_interval(&self, x: f64) -> (f64, f64) {
        if let Ok(i) = self.lookup(x) {
            let v = self.anchors[i].v;
            return (v, v);
        }
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for a in &self.anchors {
            let reach = self.slope * (x - a.x).abs();
            lo = lo.max(a.v - reach);
            hi = hi.min(a.v + reach);
        }
        if lo > hi {
            // rounding only; the consistency invariant keeps the true interval nonempty
            let mid = 0.5 * (lo + hi);
            (mid, mid)
        } else {
            (lo, hi)
        }
    }

    /// Feasible interval intersected with the growth bound, if any.
    pub fn admissible_interval(&self, x: f64) -> (f64, f64) {
        let (lo, hi) = self.feasible_interval(x);
        match self.envelope(x) {
            Some(bound) => {
                let (lo, hi) = (lo.max(-bound), hi.min(bound));
                if lo > hi {
                    let mid = 0.5 * (lo + hi);
                    (mid, mid)
                } else {
                    (lo, hi)
                }
            }
            None => (lo, hi),
        }
    }

    /// Value under an explicit extension rule. Anchored abscissae return
    /// their committed value exactly. NaN when no anchors are stored.
    pub fn eval_with(&self, extension: Extension, x: f64) -> f64 {
        if self.anchors.is_empty() {
            return f64::NAN;
        }
        let raw = match self.lookup(x) {
            Ok(i) => return self.anchors[i].v,
            Err(i) => match extension {
                Extension::McShaneMin => self.feasible_interval(x).1,
                Extension::McShaneMax => self.feasible_interval(x).0,
                Extension::Midpoint => {
                    let (lo, hi) = self.feasible_interval(x);
                    0.5 * (lo + hi)
                }
                Extension::Linear => self.interpolate(i, x),
            },
        };
        match self.envelope(x) {
            Some(bound) => raw.clamp(-bound, bound),
            None => raw,
        }
    }

    fn interpolate(&self, insert_at: usize, x: f64) -> f64 {
        let n = self.anchors.len();
        if n == 1 {
            return self.anchors[0].v;
        }
        let (left, right) = if insert_at == 0 {
            (0, 1)
        } else if insert_at >= n {
            (n - 2, n - 1)
        } else {
            (insert_at - 1, insert_at)
        };
        let (a, b) = (self.anchors[left], self.anchors[right]);
        a.v + (b.v - a.v) * (x - a.x) / (b.x - a.x)
    }

    /// Slopes of the two unbounded pieces, `(left, right)`.
    pub fn tail_slopes(&self) -> Option<(f64, f64)> {
        if self.anchors.is_empty() {
            return None;
        }
        let l = self.slope;
        Some(match self.extension {
            Extension::McShaneMin => (-l, l),
            Extension::McShaneMax => (l, -l),
            Extension::Midpoint => (0.0, 0.0),
            Extension::Linear => {
                let n = self.anchors.len();
                if n == 1 {
                    (0.0, 0.0)
                } else {
                    let seg = |i: usize, j: usize| {
                        let (a, b) = (self.anchors[i], self.anchors[j]);
                        (b.v - a.v) / (b.x - a.x)
                    };
                    (seg(0, 1), seg(n - 2, n - 1))
                }
            }
        })
    }

    /// Largest pairwise slope among the anchors.
    pub fn max_anchor_slope(&self) -> f64 {
        let mut worst = 0.0f64;
        for (i, a) in self.anchors.iter().enumerate() {
            for b in &self.anchors[i + 1..] {
                worst = worst.max(((b.v - a.v) / (b.x - a.x)).abs());
            }
        }
        worst
    }
}

impl ScalarFn for PiecewiseLinearFn {
    fn eval(&self, x: f64) -> f64 {
        self.eval_with(self.extension, x)
    }
}

/// Canonical total extension: the McShane (min-of-cones) function of the
/// anchors, keeping any growth bound.
pub fn realize(f: &PiecewiseLinearFn) -> Result<PiecewiseLinearFn> {
    if f.is_empty() {
        return Err(Error::Precondition("cannot realise a function with no anchors".into()));
    }
    Ok(f.clone().with_extension(Extension::McShaneMin))
}

/// Free-function form of [`PiecewiseLinearFn::feasible_interval`].
pub fn feasible_interval(f: &PiecewiseLinearFn, x: f64) -> (f64, f64) {
    f.feasible_interval(x)
}

fn pick_endpoint(lo: f64, hi: f64, u: f64) -> f64 {
    if (lo + u).abs() > (hi + u).abs() {
        lo
    } else {
        hi
    }
}

fn sign_nonneg(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// Greedy one-step adversary choosing `f(x)` and the noise.
///
/// Picks the end of the admissible interval that maximizes `|v + u|`, then
/// pushes the noise the same way. Unbounded intervals are clipped to
/// `|v| ≤ L|x| + budget`.
pub fn adversary_choose(
    f: &mut PiecewiseLinearFn,
    x: f64,
    u: f64,
    noise_bound: f64,
    budget: f64,
) -> Result<(f64, f64)> {
    let (lo, hi) = f.admissible_interval(x);
    let cap = f.slope() * x.abs() + budget;
    let (lo, hi) = (lo.max(-cap), hi.min(cap));
    let (lo, hi) = if lo > hi { (hi, hi) } else { (lo, hi) };
    let v = pick_endpoint(lo, hi, u);
    let w = noise_bound * sign_nonneg(v + u);
    f.commit(x, v)?;
    Ok((v, w))
}

/// Greedy adversary state for the discrete-time nonparametric system.
#[derive(Clone, Debug, PartialEq)]
pub struct GreedyAdversary {
    pub function: PiecewiseLinearFn,
    pub noise_bound: f64,
    pub budget: f64,
}

impl GreedyAdversary {
    /// Budget defaults to ten noise bounds.
    pub fn new(slope: f64, noise_bound: f64) -> Result<Self> {
        if !(noise_bound > 0.0 && noise_bound.is_finite()) {
            return Err(Error::Domain(format!("noise bound must be positive, got {noise_bound}")));
        }
        Ok(Self {
            function: PiecewiseLinearFn::new(slope, Extension::McShaneMin)?,
            noise_bound,
            budget: 10.0 * noise_bound,
        })
    }

    pub fn choose(&mut self, x: f64, u: f64) -> Result<(f64, f64)> {
        adversary_choose(&mut self.function, x, u, self.noise_bound, self.budget)
    }
}

/// Adversary for the sampled-data system. Its function store carries the
/// growth bound `|f(x)| ≤ L|x| + c`.
///
/// During each sampling period the flow is driven by the extension that
/// pushes in the chosen direction, and every point where the integrator
/// evaluated `f` is committed afterwards, so the final realised function
/// reproduces the run exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledAdversary {
    state: PiecewiseLinearFn,
    spec: SampledSpec,
}

/// One adversarial sampling period.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledMove {
    pub value: f64,
    pub next: f64,
}

impl SampledAdversary {
    pub fn new(spec: SampledSpec) -> Result<Self> {
        Ok(Self {
            state: PiecewiseLinearFn::with_growth_bound(
                spec.slope,
                spec.offset,
                Extension::McShaneMin,
            )?,
            spec,
        })
    }

    pub fn function(&self) -> &PiecewiseLinearFn {
        &self.state
    }

    pub fn into_function(self) -> PiecewiseLinearFn {
        self.state
    }

    /// Chooses `f(x)` for the current sample point and commits it.
    pub fn choose(&mut self, x: f64, u: f64) -> Result<f64> {
        sampled_adversary_choose(&mut self.state, x, u)
    }

    /// Chooses `f(x)`, then integrates one period and commits the path.
    pub fn step(&mut self, x: f64, u: f64) -> Result<SampledMove> {
        let value = self.choose(x, u)?;
        let extension = if value + u >= 0.0 {
            Extension::McShaneMin
        } else {
            Extension::McShaneMax
        };
        let mut visited = Vec::with_capacity(4 * self.spec.substeps);
        let state = &self.state;
        let next = rk4_hold(
            x,
            |s| {
                let v = state.eval_with(extension, s);
                visited.push((s, v));
                v
            },
            u,
            self.spec.period,
            self.spec.substeps,
        );
        // commit whatever was evaluated, even if the flow left the guard
        for (s, v) in visited {
            self.state.commit(s, v)?;
        }
        Ok(SampledMove { value, next: next? })
    }
}

/// Sampled-data adversary choice: the feasible interval is also clipped to
/// `[-(L|x|+c), L|x|+c]`.
pub fn sampled_adversary_choose(state: &mut PiecewiseLinearFn, x: f64, u: f64) -> Result<f64> {
    if state.growth_offset().is_none() {
        return Err(Error::Precondition("sampled adversary needs a growth bound".into()));
    }
    let (lo, hi) = state.admissible_interval(x);
    let v = pick_endpoint(lo, hi, u);
    state.commit(x, v)?;
    Ok(v)
}

/// Draws a random consistent anchor set and returns its realisation.
///
/// Abscissae are uniform on `[-span, span]`; each value is uniform on the
/// admissible interval left by the earlier anchors, with `|v| ≤ L|x| + offset`.
pub fn random_lipschitz<R: Rng + ?Sized>(
    rng: &mut R,
    slope: f64,
    anchors: usize,
    span: f64,
    offset: f64,
    growth_bounded: bool,
) -> Result<PiecewiseLinearFn> {
    let mut f = if growth_bounded {
        PiecewiseLinearFn::with_growth_bound(slope, offset, Extension::McShaneMin)?
    } else {
        PiecewiseLinearFn::new(slope, Extension::McShaneMin)?
    };
    for _ in 0..anchors.max(1) {
        let x = rng.random_range(-span..=span);
        let (lo, hi) = f.admissible_interval(x);
        let cap = slope * x.abs() + offset;
        let (lo, hi) = (lo.max(-cap), hi.min(cap));
        let v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        f.commit(x, v)?;
    }
    Ok(f)
}

/// Lipschitz-`L` function on `R^p` under the ℓ1 norm, stored as anchors and
/// extended by the McShane formula.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzL1Fn {
    dim: usize,
    slope: f64,
    points: Vec<f64>,
    values: Vec<f64>,
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

impl LipschitzL1Fn {
    pub fn new(dim: usize, slope: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Domain("dimension must be at least 1".into()));
        }
        if !(slope > 0.0 && slope.is_finite()) {
            return Err(Error::Domain(format!("slope budget must be positive, got {slope}")));
        }
        Ok(Self {
            dim,
            slope,
            points: Vec::new(),
            values: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn anchor(&self, i: usize) -> (&[f64], f64) {
        (&self.points[i * self.dim..(i + 1) * self.dim], self.values[i])
    }

    fn find(&self, x: &[f64]) -> Option<usize> {
        (0..self.len()).find(|&i| self.anchor(i).0 == x)
    }

    pub fn commit(&mut self, x: &[f64], v: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Config(format!(
                "point has dimension {} but the function has {}",
                x.len(),
                self.dim
            )));
        }
        for i in 0..self.len() {
            let (p, pv) = self.anchor(i);
            let run = self.slope * l1(x, p);
            if (v - pv).abs() > run + slack(run.max(v.abs()).max(pv.abs())) {
                return Err(Error::Precondition(format!(
                    "anchor value {v} is inconsistent with stored value {pv}"
                )));
            }
        }
        if self.find(x).is_none() {
            self.points.extend_from_slice(x);
            self.values.push(v);
        }
        Ok(())
    }

    pub fn feasible_interval(&self, x: &[f64]) -> (f64, f64) {
        if let Some(i) = self.find(x) {
            let v = self.values[i];
            return (v, v);
        }
        let mut lo = f64::NEG_INFINITY;
        let mut hi = f64::INFINITY;
        for i in 0..self.len() {
            let (p, v) = self.anchor(i);
            let reach = self.slope * l1(x, p);
            lo = lo.max(v - reach);
            hi = hi.min(v + reach);
        }
        if lo > hi {
            let mid = 0.5 * (lo + hi);
            (mid, mid)
        } else {
            (lo, hi)
        }
    }

    /// McShane value; anchored points return their committed value.
    pub fn eval(&self, x: &[f64]) -> f64 {
        if self.is_empty() {
            return f64::NAN;
        }
        self.feasible_interval(x).1
    }
}

/// Free-function form of [`LipschitzL1Fn::feasible_interval`].
pub fn highorder_feasible_interval(f: &LipschitzL1Fn, x: &[f64]) -> (f64, f64) {
    f.feasible_interval(x)
}

/// Greedy adversary for the high-order system.
#[derive(Clone, Debug, PartialEq)]
pub struct HighOrderAdversary {
    pub function: LipschitzL1Fn,
    pub noise_bound: f64,
    pub budget: f64,
}

impl HighOrderAdversary {
    pub fn new(order: usize, slope: f64, noise_bound: f64) -> Result<Self> {
        if !(noise_bound > 0.0 && noise_bound.is_finite()) {
            return Err(Error::Domain(format!("noise bound must be positive, got {noise_bound}")));
        }
        Ok(Self {
            function: LipschitzL1Fn::new(order, slope)?,
            noise_bound,
            budget: 10.0 * noise_bound,
        })
    }

    pub fn choose(&mut self, window: &[f64], u: f64) -> Result<(f64, f64)> {
        let (lo, hi) = self.function.feasible_interval(window);
        let norm: f64 = window.iter().map(|x| x.abs()).sum();
        let cap = self.function.slope() * norm + self.budget;
        let (lo, hi) = (lo.max(-cap), hi.min(cap));
        let (lo, hi) = if lo > hi { (hi, hi) } else { (lo, hi) };
        let v = pick_endpoint(lo, hi, u);
        let w = self.noise_bound * sign_nonneg(v + u);
        self.function.commit(window, v)?;
        Ok((v, w))
    }
}
