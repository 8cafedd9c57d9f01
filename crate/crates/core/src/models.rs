//! One-step dynamics for every system class plus the noise and Markov-chain
//! generators that drive them.
//!
//! All step functions are pure: the only randomness enters through an
//! explicit, caller-owned RNG.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::wide::Wide;
use crate::{Error, Result};

/// Any state with magnitude above this counts as divergence.
pub const BLOWUP_GUARD: f64 = 1e150;

/// Default number of RK4 steps per sampling period.
pub const DEFAULT_SUBSTEPS: usize = 64;

/// Maps a raw next-state value to `Ok` or to the matching divergence signal.
pub(crate) fn guard(value: f64) -> Result<f64> {
    if value.is_nan() {
        Err(Error::NonFinite)
    } else if value.abs() > BLOWUP_GUARD {
        Err(Error::Overflow)
    } else {
        Ok(value)
    }
}

/// `sign(x)·|x|^b`, the odd extension of `x^b` to the whole real line.
///
/// For `b = 0` the value at the origin is `+1` (the `0^0 = 1` convention),
/// so the map is the step `x ↦ ±1`.
pub fn signed_pow(x: f64, b: f64) -> f64 {
    if b == 0.0 {
        return if x < 0.0 { -1.0 } else { 1.0 };
    }
    if x == 0.0 {
        return 0.0;
    }
    let magnitude = libm::pow(x.abs(), b);
    if x < 0.0 {
        -magnitude
    } else {
        magnitude
    }
}

/// A real function of one real variable.
pub trait ScalarFn {
    fn eval(&self, x: f64) -> f64;
}

impl<F: Fn(f64) -> f64> ScalarFn for F {
    fn eval(&self, x: f64) -> f64 {
        self(x)
    }
}

/// `f(x) = M·sign(x)·|x|^b`, growing like `M x^b` at infinity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PowerGrowthFn {
    gain: f64,
    exponent: f64,
}

impl PowerGrowthFn {
    pub fn new(gain: f64, exponent: f64) -> Result<Self> {
        if !(gain > 0.0 && gain.is_finite()) {
            return Err(Error::Domain(format!("gain must be positive, got {gain}")));
        }
        if !(exponent >= 0.0 && exponent.is_finite()) {
            return Err(Error::Domain(format!(
                "growth exponent must be nonnegative, got {exponent}"
            )));
        }
        Ok(Self { gain, exponent })
    }

    pub fn gain(&self) -> f64 {
        self.gain
    }

    pub fn exponent(&self) -> f64 {
        self.exponent
    }
}

impl ScalarFn for PowerGrowthFn {
    fn eval(&self, x: f64) -> f64 {
        eval_power(self, x)
    }
}

pub fn eval_power(f: &PowerGrowthFn, x: f64) -> f64 {
    f.gain * signed_pow(x, f.exponent)
}

/// Exponents and prior mean for the polynomial regression model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyRegressors {
    exponents: Vec<f64>,
    theta_mean: Vec<f64>,
}

impl PolyRegressors {
    /// Exponents must be strictly decreasing and positive.
    pub fn new(exponents: Vec<f64>, theta_mean: Vec<f64>) -> Result<Self> {
        check_exponents(&exponents)?;
        if theta_mean.len() != exponents.len() {
            return Err(Error::Config(format!(
                "theta_mean has {} entries for {} exponents",
                theta_mean.len(),
                exponents.len()
            )));
        }
        Ok(Self { exponents, theta_mean })
    }

    pub fn exponents(&self) -> &[f64] {
        &self.exponents
    }

    pub fn theta_mean(&self) -> &[f64] {
        &self.theta_mean
    }

    pub fn order(&self) -> usize {
        self.exponents.len()
    }

    /// The regressor vector `(sign(y)|y|^{b_1}, …, sign(y)|y|^{b_p})`.
    pub fn regressors(&self, y: f64) -> Vec<f64> {
        self.exponents.iter().map(|&b| signed_pow(y, b)).collect()
    }
}

pub(crate) fn check_exponents(exponents: &[f64]) -> Result<()> {
    if exponents.is_empty() {
        return Err(Error::Domain("at least one exponent is required".into()));
    }
    if exponents.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
        return Err(Error::Domain("exponents must be positive and finite".into()));
    }
    if exponents.windows(2).any(|w| w[0] <= w[1]) {
        return Err(Error::Domain("exponents must be strictly decreasing".into()));
    }
    Ok(())
}

/// Disturbance models.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseModel {
    /// i.i.d. `N(0, variance)`.
    Gaussian { variance: f64 },
    /// `|w| ≤ bound`, chosen by an adversary. Without one it is sampled
    /// uniformly like [`NoiseModel::BoundedRandom`].
    BoundedAdversarial { bound: f64 },
    /// i.i.d. uniform on `[-bound, bound]`.
    BoundedRandom { bound: f64 },
    /// Vector noise with `sigma_lo·I ≤ E[ww']` and `E[w'w] ≤ sigma_hi`;
    /// realised as i.i.d. `N(0, sigma_lo)` components.
    MartingaleDiff { sigma_lo: f64, sigma_hi: f64, dim: usize },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            NoiseModel::Gaussian { variance } => variance > 0.0 && variance.is_finite(),
            NoiseModel::BoundedAdversarial { bound } | NoiseModel::BoundedRandom { bound } => {
                bound > 0.0 && bound.is_finite()
            }
            NoiseModel::MartingaleDiff {
                sigma_lo,
                sigma_hi,
                dim,
            } => {
                sigma_lo > 0.0
                    && sigma_hi.is_finite()
                    && dim >= 1
                    && dim as f64 * sigma_lo <= sigma_hi
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!("invalid noise model {self:?}")))
        }
    }

    /// Bound on `|w|` for the bounded models.
    pub fn bound(&self) -> Option<f64> {
        match *self {
            NoiseModel::BoundedAdversarial { bound } | NoiseModel::BoundedRandom { bound } => {
                Some(bound)
            }
            _ => None,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            NoiseModel::MartingaleDiff { dim, .. } => dim,
            _ => 1,
        }
    }

    pub fn sample_scalar<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseModel::Gaussian { variance } => {
                let z: f64 = StandardNormal.sample(rng);
                libm::sqrt(variance) * z
            }
            NoiseModel::BoundedAdversarial { bound } | NoiseModel::BoundedRandom { bound } => {
                rng.random_range(-bound..=bound)
            }
            NoiseModel::MartingaleDiff { sigma_lo, .. } => {
                let z: f64 = StandardNormal.sample(rng);
                libm::sqrt(sigma_lo) * z
            }
        }
    }

    pub fn sample_vector<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for w in out.iter_mut() {
            *w = self.sample_scalar(rng);
        }
    }
}

/// Finite homogeneous Markov chain; states are `0..len()`.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovChain {
    transition: DMatrix<f64>,
    irreducible: bool,
    period: usize,
}

impl MarkovChain {
    /// Validates the matrix is square and row-stochastic, then classifies it.
    pub fn new(transition: DMatrix<f64>) -> Result<Self> {
        let n = transition.nrows();
        if n == 0 || transition.ncols() != n {
            return Err(Error::Config("transition matrix must be square and nonempty".into()));
        }
        for i in 0..n {
            let row = transition.row(i);
            if row.iter().any(|p| !(*p >= 0.0 && p.is_finite())) {
                return Err(Error::Config(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("row {i} sums to {sum}, not 1")));
            }
        }
        let (irreducible, period) = classify(&transition);
        Ok(Self {
            transition,
            irreducible,
            period,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Config("transition matrix must be square".into()));
        }
        Self::new(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
    }

    pub fn len(&self) -> usize {
        self.transition.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.transition
    }

    pub fn prob(&self, from: usize, to: usize) -> f64 {
        self.transition[(from, to)]
    }

    pub fn is_irreducible(&self) -> bool {
        self.irreducible
    }

    /// Period of the chain; only meaningful when irreducible.
    pub fn period(&self) -> usize {
        self.period
    }

    /// Homogeneous, irreducible and aperiodic.
    pub fn is_ergodic(&self) -> bool {
        self.irreducible && self.period == 1
    }
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        let r = a % b;
        a = b;
        b = r;
    }
    a
}

/// Strong connectivity by forward/backward reachability from state 0; the
/// period is the gcd of `level(u) + 1 - level(v)` over all edges `u → v`,
/// with levels from a BFS rooted at 0.
fn classify(p: &DMatrix<f64>) -> (bool, usize) {
    let n = p.nrows();
    let reach = |forward: bool| {
        let mut level = alloc::vec![usize::MAX; n];
        let mut queue = alloc::collections::VecDeque::new();
        level[0] = 0;
        queue.push_back(0);
        while let Some(u) = queue.pop_front() {
            for v in 0..n {
                let edge = if forward { p[(u, v)] } else { p[(v, u)] };
                if edge > 0.0 && level[v] == usize::MAX {
                    level[v] = level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        level
    };
    let forward = reach(true);
    let backward = reach(false);
    let irreducible =
        forward.iter().all(|&l| l != usize::MAX) && backward.iter().all(|&l| l != usize::MAX);
    let mut period = 0;
    for u in 0..n {
        for v in 0..n {
            if p[(u, v)] > 0.0 && forward[u] != usize::MAX && forward[v] != usize::MAX {
                let diff = (forward[u] + 1).abs_diff(forward[v]);
                period = gcd(period, diff);
            }
        }
    }
    (irreducible, period.max(1))
}

/// Draws the next state from row `mode` of the transition matrix.
pub fn markov_next<R: Rng + ?Sized>(mode: usize, chain: &MarkovChain, rng: &mut R) -> usize {
    let row = chain.transition.row(mode);
    let draw: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = mode;
    for (j, &p) in row.iter().enumerate() {
        if p > 0.0 {
            cumulative += p;
            last_positive = j;
            if draw < cumulative {
                return j;
            }
        }
    }
    last_positive
}

/// Markov jump linear system `x' = A(θ)x + B(θ)u + w`.
#[derive(Clone, Debug, PartialEq)]
pub struct MjlsSpec {
    chain: MarkovChain,
    a: Vec<DMatrix<f64>>,
    b: Vec<DMatrix<f64>>,
    noise: NoiseModel,
}

impl MjlsSpec {
    /// Requires an ergodic chain, one `(A_i, B_i)` pair per mode with
    /// consistent shapes, and vector noise of the state dimension.
    pub fn new(
        chain: MarkovChain,
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        noise: NoiseModel,
    ) -> Result<Self> {
        let spec = Self::new_unchecked_chain(chain, a, b, noise)?;
        if !spec.chain.is_ergodic() {
            return Err(Error::Config(
                "mode chain must be irreducible and aperiodic".into(),
            ));
        }
        Ok(spec)
    }

    /// Like [`MjlsSpec::new`] but accepts any row-stochastic chain.
    pub fn new_unchecked_chain(
        chain: MarkovChain,
        a: Vec<DMatrix<f64>>,
        b: Vec<DMatrix<f64>>,
        noise: NoiseModel,
    ) -> Result<Self> {
        let modes = chain.len();
        if a.len() != modes || b.len() != modes {
            return Err(Error::Config(format!(
                "{modes} modes but {} A and {} B matrices",
                a.len(),
                b.len()
            )));
        }
        let n = a[0].nrows();
        let m = b[0].ncols();
        if n == 0 || m == 0 {
            return Err(Error::Config("empty system matrices".into()));
        }
        for (i, (ai, bi)) in a.iter().zip(&b).enumerate() {
            if ai.shape() != (n, n) || bi.shape() != (n, m) {
                return Err(Error::Config(format!(
                    "mode {i}: A is {:?}, B is {:?}, expected ({n}, {n}) and ({n}, {m})",
                    ai.shape(),
                    bi.shape()
                )));
            }
        }
        noise.validate()?;
        if !matches!(noise, NoiseModel::MartingaleDiff { .. }) || noise.dim() != n {
            return Err(Error::Config(format!(
                "MJLS noise must be vector noise of dimension {n}"
            )));
        }
        Ok(Self { chain, a, b, noise })
    }

    pub fn chain(&self) -> &MarkovChain {
        &self.chain
    }

    pub fn modes(&self) -> usize {
        self.chain.len()
    }

    pub fn state_dim(&self) -> usize {
        self.a[0].nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b[0].ncols()
    }

    pub fn a(&self, mode: usize) -> &DMatrix<f64> {
        &self.a[mode]
    }

    pub fn b(&self, mode: usize) -> &DMatrix<f64> {
        &self.b[mode]
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }
}

/// Parameters of the sampled-data problem: slope `L`, offset `c`, period `h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledSpec {
    pub slope: f64,
    pub offset: f64,
    pub period: f64,
    pub substeps: usize,
}

impl SampledSpec {
    pub fn new(slope: f64, offset: f64, period: f64) -> Result<Self> {
        Self::with_substeps(slope, offset, period, DEFAULT_SUBSTEPS)
    }

    pub fn with_substeps(slope: f64, offset: f64, period: f64, substeps: usize) -> Result<Self> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !(positive(slope) && positive(offset) && positive(period)) || substeps == 0 {
            return Err(Error::Domain(format!(
                "sampled spec needs L, c, h > 0 and substeps ≥ 1 (got {slope}, {offset}, {period}, {substeps})"
            )));
        }
        Ok(Self {
            slope,
            offset,
            period,
            substeps,
        })
    }

    /// The product `L·h` that decides the regime.
    pub fn slope_period(&self) -> f64 {
        self.slope * self.period
    }

    /// Largest admissible `|f(x)|` at `x`.
    pub fn envelope(&self, x: f64) -> f64 {
        self.slope * x.abs() + self.offset
    }

    /// Membership of a sampled function in the admissible class: pairwise
    /// slopes at most `L` and `|v| ≤ L|x| + c` at every anchor.
    pub fn admits(&self, f: &crate::adversary::PiecewiseLinearFn) -> bool {
        let anchors = f.anchors();
        let tol = |scale: f64| 1e-12 * (1.0 + scale);
        let within_envelope = anchors
            .iter()
            .all(|a| a.v.abs() <= self.envelope(a.x) + tol(self.envelope(a.x)));
        let slopes_ok = anchors.windows(2).all(|w| {
            let rise = (w[1].v - w[0].v).abs();
            let run = self.slope * (w[1].x - w[0].x).abs();
            rise <= run + tol(run.max(rise))
        });
        within_envelope && slopes_ok && f.slope() <= self.slope
    }
}

/// `y' = θ f(y) + u + w`.
///
/// The drift is guarded on its own so that an overflowing `f(y)` reads as
/// divergence even when the input cancels it to `inf - inf`.
pub fn step_parametric(y: f64, theta: f64, u: f64, w: f64, f: &PowerGrowthFn) -> Result<f64> {
    let drift = guard(theta * eval_power(f, y))?;
    guard(drift + u + w)
}

/// `f(x)` without overflow or underflow.
pub fn eval_power_wide(f: &PowerGrowthFn, x: f64) -> Wide {
    Wide::from_f64(f.gain) * Wide::signed_pow(x, f.exponent)
}

/// Parametric step under certainty-equivalence minimum-variance control,
/// written in terms of the estimation error `err = θ − θ̂`:
/// `y' = err·f(y) + w`.
pub fn step_parametric_closed(y: f64, err: Wide, w: f64, f: &PowerGrowthFn) -> Result<f64> {
    let drift = err * eval_power_wide(f, y);
    if drift.is_nan() {
        return Err(Error::NonFinite);
    }
    if drift.exceeds(BLOWUP_GUARD) {
        return Err(Error::Overflow);
    }
    guard(drift.to_f64() + w)
}

/// `y' = Σ θ_i sign(y)|y|^{b_i} + u + w`.
pub fn step_polynomial(
    y: f64,
    theta: &[f64],
    u: f64,
    w: f64,
    regs: &PolyRegressors,
) -> Result<f64> {
    if theta.len() != regs.order() {
        return Err(Error::Config(format!(
            "theta has {} entries for {} regressors",
            theta.len(),
            regs.order()
        )));
    }
    let mut drift = 0.0;
    for (t, &b) in theta.iter().zip(regs.exponents()) {
        drift += guard(t * signed_pow(y, b))?;
    }
    guard(guard(drift)? + u + w)
}

/// `y' = f(y) + u + w`.
pub fn step_nonparametric<F: ScalarFn + ?Sized>(y: f64, f: &F, u: f64, w: f64) -> Result<f64> {
    guard(f.eval(y) + u + w)
}

/// `y' = f(y_t, …, y_{t-p+1}) + u + w`, with `window[0] = y_t`.
pub fn step_highorder<F>(window: &[f64], order: usize, f: F, u: f64, w: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if window.len() != order {
        return Err(Error::Config(format!(
            "window has length {} but the model order is {order}",
            window.len()
        )));
    }
    guard(f(window) + u + w)
}

/// Integrates `ẋ = f(x) + u` over `[0, h]` with `steps` classical RK4 steps.
///
/// `f` is `FnMut` so callers can observe every evaluation point; the
/// evaluation sequence is deterministic.
pub fn rk4_hold<F: FnMut(f64) -> f64>(
    x0: f64,
    mut f: F,
    u: f64,
    h: f64,
    steps: usize,
) -> Result<f64> {
    let dt = h / steps as f64;
    let mut x = x0;
    for _ in 0..steps {
        let k1 = f(x) + u;
        let x2 = guard(x + 0.5 * dt * k1)?;
        let k2 = f(x2) + u;
        let x3 = guard(x + 0.5 * dt * k2)?;
        let k3 = f(x3) + u;
        let x4 = guard(x + dt * k3)?;
        let k4 = f(x4) + u;
        x = guard(x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4))?;
    }
    Ok(x)
}

/// State after one sampling period under a zero-order-held input.
pub fn integrate_sampled<F: ScalarFn + ?Sized>(
    x0: f64,
    f: &F,
    u_const: f64,
    spec: &SampledSpec,
) -> Result<f64> {
    rk4_hold(x0, |x| f.eval(x), u_const, spec.period, spec.substeps)
}

/// `x' = A_mode x + B_mode u + w`.
pub fn step_mjls(
    x: &DVector<f64>,
    mode: usize,
    u: &DVector<f64>,
    w: &DVector<f64>,
    spec: &MjlsSpec,
) -> Result<DVector<f64>> {
    if mode >= spec.modes() {
        return Err(Error::Config(format!(
            "mode {mode} out of range for {} modes",
            spec.modes()
        )));
    }
    let (n, m) = (spec.state_dim(), spec.input_dim());
    if x.len() != n || w.len() != n || u.len() != m {
        return Err(Error::Config(format!(
            "dimension mismatch: x {}, u {}, w {} for n = {n}, m = {m}",
            x.len(),
            u.len(),
            w.len()
        )));
    }
    let next = spec.a(mode) * x + spec.b(mode) * u + w;
    for v in next.iter() {
        guard(*v)?;
    }
    Ok(next)
}
