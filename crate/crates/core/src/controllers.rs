//! Feedback laws. Every controller sees the observations one at a time
//! through [`Feedback::act`] and keeps whatever history it needs itself,
//! so an input can only depend on outputs already observed.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use ordered_float::OrderedFloat;
use serde::{Deserialize, Serialize};

use crate::models::{eval_power, MjlsSpec, PolyRegressors, PowerGrowthFn, SampledSpec};
use crate::riccati::pseudoinverse;
use crate::{Error, Result};

/// A causal control law: observe `y_t`, emit `u_t`.
pub trait Feedback {
    fn act(&mut self, y: &[f64], u: &mut [f64]) -> Result<()>;
}

/// `u ≡ 0`.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroInput;

impl Feedback for ZeroInput {
    fn act(&mut self, _y: &[f64], u: &mut [f64]) -> Result<()> {
        u.fill(0.0);
        Ok(())
    }
}

fn scalar_obs(y: &[f64]) -> Result<f64> {
    match y {
        [v] => Ok(*v),
        _ => Err(Error::Config(format!(
            "scalar controller got a {}-dimensional observation",
            y.len()
        ))),
    }
}

fn scalar_out(u: &mut [f64], v: f64) -> Result<()> {
    match u {
        [slot] => {
            *slot = v;
            Ok(())
        }
        _ => Err(Error::Config(format!(
            "scalar controller asked for a {}-dimensional input",
            u.len()
        ))),
    }
}

pub const DEFAULT_RLS_FLOOR: f64 = 1e-6;

/// Scalar recursive least squares with prior weight `s_0` at `θ_0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlsState {
    pub theta_hat: f64,
    /// Accumulated information `s_0 + Σ φ_i²`.
    pub s: f64,
    pub t: u64,
}

impl Default for RlsState {
    fn default() -> Self {
        Self { theta_hat: 0.0, s: DEFAULT_RLS_FLOOR, t: 0 }
    }
}

impl RlsState {
    /// `s0 = 0` gives plain least squares (undefined until the first
    /// nonzero regressor, reported as `θ_0`).
    pub fn new(s0: f64, theta0: f64) -> Result<Self> {
        if !(s0 >= 0.0 && s0.is_finite()) || !theta0.is_finite() {
            return Err(Error::Domain(format!(
                "need s0 >= 0 and finite theta0, got {s0} and {theta0}"
            )));
        }
        Ok(Self { theta_hat: theta0, s: s0, t: 0 })
    }

    /// Prior `N(θ̄, 1)`.
    pub fn bayesian(theta_mean: f64) -> Result<Self> {
        Self::new(1.0, theta_mean)
    }
}

/// One least-squares step on `z = θ φ + w`.
pub fn rls_update(state: RlsState, phi: f64, z: f64) -> RlsState {
    let t = state.t + 1;
    if phi == 0.0 {
        return RlsState { t, ..state };
    }
    let s = state.s + phi * phi;
    let theta_hat = state.theta_hat + (phi / s) * (z - state.theta_hat * phi);
    RlsState { theta_hat, s, t }
}

/// Certainty-equivalence minimum-variance input `−θ̂ f(y)`.
pub fn adaptive_mv_control(state: &RlsState, fy: f64) -> f64 {
    -state.theta_hat * fy
}

/// Adaptive minimum-variance controller for `y' = θ f(y) + u + w`.
#[derive(Clone, Debug)]
pub struct AdaptiveMv {
    f: PowerGrowthFn,
    rls: RlsState,
    prev: Option<(f64, f64)>,
}

impl AdaptiveMv {
    pub fn new(f: PowerGrowthFn, rls: RlsState) -> Self {
        Self { f, rls, prev: None }
    }

    pub fn rls(&self) -> &RlsState {
        &self.rls
    }
}

impl Feedback for AdaptiveMv {
    fn act(&mut self, y: &[f64], u: &mut [f64]) -> Result<()> {
        let y = scalar_obs(y)?;
        if let Some((phi, u_prev)) = self.prev {
            self.rls = rls_update(self.rls, phi, y - u_prev);
        }
        let fy = eval_power(&self.f, y);
        let out = adaptive_mv_control(&self.rls, fy);
        self.prev = Some((fy, out));
        scalar_out(u, out)
    }
}

/// Vector least squares in information form: `S = s_0 I + Σ φφ'`,
/// `r = s_0 θ_0 + Σ φ z`, `θ̂ = S^+ r`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorRls {
    info: DMatrix<f64>,
    moment: DVector<f64>,
    theta_hat: DVector<f64>,
    t: u64,
}

impl VectorRls {
    pub fn new(s0: f64, theta0: &[f64]) -> Result<Self> {
        if !(s0 >= 0.0 && s0.is_finite()) || theta0.is_empty() {
            return Err(Error::Domain(format!("need s0 >= 0 and a nonempty prior, got {s0}")));
        }
        let p = theta0.len();
        let theta = DVector::from_column_slice(theta0);
        Ok(Self {
            info: DMatrix::identity(p, p) * s0,
            moment: &theta * s0,
            theta_hat: theta,
            t: 0,
        })
    }

    pub fn theta_hat(&self) -> &DVector<f64> {
        &self.theta_hat
    }

    pub fn update(&mut self, phi: &[f64], z: f64) -> Result<()> {
        if phi.len() != self.moment.len() {
            return Err(Error::Config(format!(
                "regressor has {} entries, expected {}",
                phi.len(),
                self.moment.len()
            )));
        }
        self.t += 1;
        if phi.iter().all(|v| *v == 0.0) {
            return Ok(());
        }
        let phi = DVector::from_column_slice(phi);
        self.info += &phi * phi.transpose();
        self.moment += &phi * z;
        self.theta_hat = pseudoinverse(&self.info) * &self.moment;
        Ok(())
    }
}

/// Adaptive minimum-variance controller for the polynomial model.
#[derive(Clone, Debug)]
pub struct PolyAdaptiveMv {
    regs: PolyRegressors,
    rls: VectorRls,
    prev: Option<(Vec<f64>, f64)>,
}

impl PolyAdaptiveMv {
    pub fn new(regs: PolyRegressors, rls: VectorRls) -> Result<Self> {
        if rls.theta_hat.len() != regs.order() {
            return Err(Error::Config("prior and regressor orders differ".into()));
        }
        Ok(Self { regs, rls, prev: None })
    }

    pub fn rls(&self) -> &VectorRls {
        &self.rls
    }
}

impl Feedback for PolyAdaptiveMv {
    fn act(&mut self, y: &[f64], u: &mut [f64]) -> Result<()> {
        let y = scalar_obs(y)?;
        if let Some((phi, u_prev)) = self.prev.take() {
            self.rls.update(&phi, y - u_prev)?;
        }
        let phi = self.regs.regressors(y);
        let out = -phi
            .iter()
            .zip(self.rls.theta_hat.iter())
            .fold(0.0, |acc, (p, t)| acc + p * t);
        self.prev = Some((phi, out));
        scalar_out(u, out)
    }
}

/// One observed transition `y → next` under input `u`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NnRecord {
    pub y: f64,
    pub u: f64,
    pub next: f64,
}

/// Append-only transition history with an ordered index for
/// nearest-neighbour queries.
#[derive(Clone, Debug)]
pub struct NnHistory {
    records: Vec<NnRecord>,
    // first record index for each distinct y
    index: BTreeMap<OrderedFloat<f64>, usize>,
    lo: f64,
    hi: f64,
}

impl Default for NnHistory {
    fn default() -> Self {
        Self::new()
    }
}

impl NnHistory {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            index: BTreeMap::new(),
            lo: f64::INFINITY,
            hi: f64::NEG_INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[NnRecord] {
        &self.records
    }

    pub fn push(&mut self, y: f64, u: f64, next: f64) -> Result<()> {
        if !(y.is_finite() && u.is_finite() && next.is_finite()) {
            return Err(Error::NonFinite);
        }
        let y = y + 0.0;
        self.index.entry(OrderedFloat(y)).or_insert(self.records.len());
        self.records.push(NnRecord { y, u, next });
        self.lo = self.lo.min(y);
        self.hi = self.hi.max(y);
        Ok(())
    }

    /// `(min, max)` of the stored `y_i` together with `current`.
    pub fn bounds_with(&self, current: f64) -> (f64, f64) {
        (self.lo.min(current), self.hi.max(current))
    }

    /// Index of the stored `y_i` closest to `y` and the distance to it.
    /// Ties go to the smaller index.
    pub fn nearest(&self, y: f64) -> Option<(usize, f64)> {
        let key = OrderedFloat(y + 0.0);
        let below = self.index.range(..=key).next_back();
        let above = self.index.range(key..).next();
        let candidate = |(k, &i): (&OrderedFloat<f64>, &usize)| (i, (y - k.0).abs());
        match (below.map(candidate), above.map(candidate)) {
            (Some(a), Some(b)) => Some(if a.1 < b.1 || (a.1 == b.1 && a.0 <= b.0) { a } else { b }),
            (a, b) => a.or(b),
        }
    }
}

/// Nearest-neighbour estimate `f̂(y) = y_{i*+1} − u_{i*}` and the gap
/// `|y − y_{i*}|`.
pub fn nn_estimate(hist: &NnHistory, y: f64) -> Result<(f64, f64)> {
    let (i, gap) = hist
        .nearest(y)
        .ok_or_else(|| Error::Precondition("nearest-neighbour estimate on empty history".into()))?;
    let r = hist.records[i];
    Ok((r.next - r.u, gap))
}

/// Switches between recentering on the observed range (far from data) and
/// tracking `y_star_next` (near data). Returns 0 on an empty history.
pub fn switching_control(hist: &NnHistory, y: f64, eps: f64, y_star_next: f64) -> f64 {
    match nn_estimate(hist, y) {
        Err(_) => 0.0,
        Ok((fhat, gap)) => {
            if gap > eps {
                let (lo, hi) = hist.bounds_with(y);
                -fhat + 0.5 * (lo + hi)
            } else {
                -fhat + y_star_next
            }
        }
    }
}

/// Switching controller with a constant reference.
#[derive(Clone, Debug)]
pub struct SwitchingController {
    hist: NnHistory,
    eps: f64,
    reference: f64,
    prev: Option<(f64, f64)>,
}

impl SwitchingController {
    pub fn new(eps: f64, reference: f64) -> Result<Self> {
        if !(eps > 0.0) || !reference.is_finite() {
            return Err(Error::Domain(format!(
                "need eps > 0 and a finite reference, got {eps} and {reference}"
            )));
        }
        Ok(Self { hist: NnHistory::new(), eps, reference, prev: None })
    }

    /// `ε = 0.1·w̄`, `y* ≡ 0`.
    pub fn for_noise_bound(w_bar: f64) -> Result<Self> {
        Self::new(0.1 * w_bar, 0.0)
    }

    pub fn history(&self) -> &NnHistory {
        &self.hist
    }
}

impl Feedback for SwitchingController {
    fn act(&mut self, y: &[f64], u: &mut [f64]) -> Result<()> {
        let y = scalar_obs(y)?;
        if let Some((y_prev, u_prev)) = self.prev {
            self.hist.push(y_prev, u_prev, y)?;
        }
        let out = switching_control(&self.hist, y, self.eps, self.reference);
        self.prev = Some((y, out));
        scalar_out(u, out)
    }
}

pub const SAMPLED_CLIP_FACTOR: f64 = 4.0;

/// Heuristic sampled-data law `u = −f̃_NN(x) − x/h` with the surrogate
/// `f̃(x_k) = (x_{k+1} − x_k)/h − u_k`, clipped to `4(L|x| + c)`.
pub fn sampled_control(samples: &NnHistory, x: f64, spec: &SampledSpec) -> f64 {
    let Some((i, _)) = samples.nearest(x) else {
        return 0.0;
    };
    let r = samples.records[i];
    let h = spec.period;
    let surrogate = (r.next - r.y) / h - r.u;
    let cap = SAMPLED_CLIP_FACTOR * spec.envelope(x);
    (-surrogate - x / h).clamp(-cap, cap)
}

#[derive(Clone, Debug)]
pub struct SampledHeuristic {
    samples: NnHistory,
    spec: SampledSpec,
    prev: Option<(f64, f64)>,
}

impl SampledHeuristic {
    pub fn new(spec: SampledSpec) -> Self {
        Self { samples: NnHistory::new(), spec, prev: None }
    }

    pub fn samples(&self) -> &NnHistory {
        &self.samples
    }
}

impl Feedback for SampledHeuristic {
    fn act(&mut self, y: &[f64], u: &mut [f64]) -> Result<()> {
        let x = scalar_obs(y)?;
        if let Some((x_prev, u_prev)) = self.prev {
            self.samples.push(x_prev, u_prev, x)?;
        }
        let out = sampled_control(&self.samples, x, &self.spec);
        self.prev = Some((x, out));
        scalar_out(u, out)
    }
}

/// Which Riccati gain the jump-system controller applies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainSelection {
    /// `K` of the estimated previous mode, matching how the gains are built.
    #[default]
    PreviousMode,
    /// `K` of the most likely current mode under the predicted posterior.
    PredictedArgmax,
}

/// Certainty-equivalence controller for a Markov jump linear system.
#[derive(Clone, Debug)]
pub struct MjlsControllerState {
    spec: MjlsSpec,
    gains: Vec<DMatrix<f64>>,
    selection: GainSelection,
    prev: Option<(DVector<f64>, DVector<f64>)>,
    posterior: Vec<f64>,
    estimate: Option<usize>,
}

fn argmin_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn argmax_first(values: &[f64]) -> usize {
    argmin_first(values.iter().map(|v| -v))
}

impl MjlsControllerState {
    pub fn new(spec: MjlsSpec, gains: Vec<DMatrix<f64>>, selection: GainSelection) -> Result<Self> {
        let (n, m) = (spec.state_dim(), spec.input_dim());
        if gains.len() != spec.modes() || gains.iter().any(|k| k.shape() != (m, n)) {
            return Err(Error::Config(format!(
                "need {} gains of shape ({m}, {n})",
                spec.modes()
            )));
        }
        let modes = spec.modes();
        Ok(Self {
            spec,
            gains,
            selection,
            prev: None,
            posterior: vec![1.0 / modes as f64; modes],
            estimate: None,
        })
    }

    pub fn posterior(&self) -> &[f64] {
        &self.posterior
    }

    /// Last estimate of the previous mode, if any transition has been seen.
    pub fn estimate(&self) -> Option<usize> {
        self.estimate
    }

    /// Records the state and input applied at the current step.
    pub fn record(&mut self, x: DVector<f64>, u: DVector<f64>) {
        self.prev = Some((x, u));
    }

    /// Residual-matching estimate of the mode that produced `x_now`, then
    /// one Markov prediction step of the posterior.
    pub fn estimate_mode(&mut self, x_now: &DVector<f64>) -> Result<usize> {
        let (x, u) = self
            .prev
            .as_ref()
            .ok_or_else(|| Error::Precondition("no previous transition recorded".into()))?;
        let spec = &self.spec;
        let i = argmin_first((0..spec.modes()).map(|j| {
            let r = x_now - spec.a(j) * x - spec.b(j) * u;
            r.norm()
        }));
        for (j, p) in self.posterior.iter_mut().enumerate() {
            *p = spec.chain().prob(i, j);
        }
        self.estimate = Some(i);
        Ok(i)
    }

    /// The mode whose gain is applied now.
    pub fn active_mode(&self) -> usize {
        match (self.selection, self.estimate) {
            (GainSelection::PreviousMode, Some(i)) => i,
            _ => argmax_first(&self.posterior),
        }
    }

    pub fn control(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.gains[self.active_mode()] * x)
    }
}

pub fn mjls_estimate_mode(state: &mut MjlsControllerState, x_now: &DVector<f64>) -> Result<usize> {
    state.estimate_mode(x_now)
}

pub fn mjls_control(state: &MjlsControllerState, x: &DVector<f64>) -> DVector<f64> {
    state.control(x)
}

impl Feedback for MjlsControllerState {
    fn act(&mut self, y: &[f64], u: &mut [f64]) -> Result<()> {
        let n = self.spec.state_dim();
        if y.len() != n || u.len() != self.spec.input_dim() {
            return Err(Error::Config(format!(
                "MJLS controller expects state {n} and input {}",
                self.spec.input_dim()
            )));
        }
        let x = DVector::from_column_slice(y);
        if self.prev.is_some() {
            self.estimate_mode(&x)?;
        }
        let out = self.control(&x);
        u.copy_from_slice(out.as_slice());
        self.record(x, out);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::verify_h2;
    use crate::models::{MarkovChain, NoiseModel};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn rls_examples() {
        let s = RlsState::new(0.5, 1.0).unwrap();
        let same = rls_update(s, 0.0, 3.0);
        assert_eq!((same.theta_hat, same.s, same.t), (1.0, 0.5, 1));

        let exact = rls_update(RlsState::new(0.0, 0.0).unwrap(), 2.0, 7.0);
        assert_eq!(exact.theta_hat, 3.5);

        let theta = -1.3;
        let mut s = RlsState::new(1e-3, 0.0).unwrap();
        let mut err = (s.theta_hat - theta).abs();
        for phi in [0.5, -2.0, 1.5, 3.0, -0.1] {
            s = rls_update(s, phi, theta * phi);
            let e = (s.theta_hat - theta).abs();
            assert!(e <= err);
            err = e;
        }
        assert!(err < 1e-3);
    }

    #[test]
    fn mv_examples() {
        let s = RlsState { theta_hat: 2.0, s: 1.0, t: 0 };
        assert_eq!(adaptive_mv_control(&s, 3.0), -6.0);
        assert_eq!(adaptive_mv_control(&s, 0.0), 0.0);
        // θ̂ = θ cancels the drift exactly
        let f = PowerGrowthFn::new(1.0, 2.0).unwrap();
        let theta = 0.8;
        let y = 1.7;
        let u = adaptive_mv_control(&RlsState { theta_hat: theta, s: 1.0, t: 0 }, eval_power(&f, y));
        assert_eq!(crate::models::step_parametric(y, theta, u, 0.0, &f).unwrap(), 0.0);
    }

    #[test]
    fn rls_recovers_theta_after_first_informative_sample() {
        let f = PowerGrowthFn::new(1.0, 2.0).unwrap();
        let theta = 1.7;
        let mut ctl = AdaptiveMv::new(f, RlsState::new(0.0, 0.0).unwrap());
        let mut y = 0.5;
        let mut u = [0.0];
        for t in 0..5 {
            ctl.act(&[y], &mut u).unwrap();
            if t >= 1 {
                assert!((ctl.rls().theta_hat - theta).abs() < 1e-15);
            }
            y = crate::models::step_parametric(y, theta, u[0], 0.0, &f).unwrap();
            if t >= 1 {
                assert!(y.abs() < 1e-14);
            }
        }
    }

    #[test]
    fn vector_rls_recovers_parameters() {
        let mut rls = VectorRls::new(1e-9, &[0.0, 0.0]).unwrap();
        let theta = [0.4, -2.0];
        for y in [1.0f64, -2.0, 0.5, 3.0] {
            let phi = [y * y * y.signum(), y];
            rls.update(&phi, theta[0] * phi[0] + theta[1] * phi[1]).unwrap();
        }
        assert!((rls.theta_hat()[0] - theta[0]).abs() < 1e-6);
        assert!((rls.theta_hat()[1] - theta[1]).abs() < 1e-6);
    }

    fn history(points: &[(f64, f64, f64)]) -> NnHistory {
        let mut h = NnHistory::new();
        for &(y, u, n) in points {
            h.push(y, u, n).unwrap();
        }
        h
    }

    #[test]
    fn nn_examples() {
        let h = history(&[(0.0, 1.0, 5.0), (10.0, 0.0, 2.0)]);
        assert_eq!(h.nearest(4.0), Some((0, 4.0)));
        assert_eq!(nn_estimate(&h, 4.0).unwrap(), (4.0, 4.0));
        let single = history(&[(100.0, 0.0, 1.0)]);
        assert_eq!(single.nearest(-1e6).unwrap().0, 0);
        assert!(nn_estimate(&NnHistory::new(), 0.0).is_err());
        // equidistant neighbours and repeated abscissae resolve to the first record
        let tie = history(&[(2.0, 0.0, 0.0), (-2.0, 0.0, 0.0), (2.0, 1.0, 1.0)]);
        assert_eq!(tie.nearest(0.0).unwrap().0, 0);
        let tie = history(&[(-2.0, 0.0, 0.0), (2.0, 0.0, 0.0)]);
        assert_eq!(tie.nearest(0.0).unwrap().0, 0);
        assert_eq!(tie.nearest(-0.0).unwrap().0, 0);
    }

    #[test]
    fn nn_replays_noise_free_record() {
        let f = |y: f64| 1.5 * y - 0.3;
        let h = history(&[(0.7, 0.2, f(0.7) + 0.2), (-1.0, 0.0, f(-1.0))]);
        let (fhat, gap) = nn_estimate(&h, 0.7).unwrap();
        assert_eq!((fhat, gap), (f(0.7), 0.0));
    }

    #[test]
    fn switching_examples() {
        let f = |y: f64| 2.0 * y;
        let h = history(&[(1.0, 0.5, f(1.0) + 0.5)]);
        let u = switching_control(&h, 1.0, 0.1, 0.0);
        assert_eq!(f(1.0) + u, 0.0);

        let h = history(&[(-2.0, 0.0, 3.0), (0.0, 0.0, 1.0)]);
        // fhat = 1 from the record at 0, range [-2, 4]
        assert_eq!(switching_control(&h, 4.0, 0.1, 0.0), -1.0 + 1.0);
        assert_eq!(switching_control(&h, 4.0, f64::INFINITY, 0.25), -1.0 + 0.25);
        assert_eq!(switching_control(&NnHistory::new(), 3.0, 0.1, 0.0), 0.0);
    }

    #[test]
    fn sampled_examples() {
        let spec = SampledSpec::new(2.0, 1.0, 0.25).unwrap();
        assert_eq!(sampled_control(&NnHistory::new(), 0.0, &spec), 0.0);
        let h = history(&[(0.0, 0.0, 1e6)]);
        assert_eq!(sampled_control(&h, 0.0, &spec), -4.0);
        assert_eq!(sampled_control(&h, 3.0, &spec), -4.0 * 7.0);
    }

    fn drive(ctl: &mut dyn Feedback, ys: &[f64]) -> Vec<f64> {
        let mut u = [0.0];
        ys.iter()
            .map(|&y| {
                ctl.act(&[y], &mut u).unwrap();
                u[0]
            })
            .collect()
    }

    type Factory = fn() -> alloc::boxed::Box<dyn Feedback>;

    fn factories() -> [Factory; 5] {
        [
            || alloc::boxed::Box::new(AdaptiveMv::new(PowerGrowthFn::new(1.0, 2.0).unwrap(), RlsState::default())),
            || {
                let regs = PolyRegressors::new(vec![2.0, 1.0], vec![0.0, 0.0]).unwrap();
                alloc::boxed::Box::new(PolyAdaptiveMv::new(regs, VectorRls::new(1.0, &[0.0, 0.0]).unwrap()).unwrap())
            },
            || alloc::boxed::Box::new(SwitchingController::for_noise_bound(1.0).unwrap()),
            || alloc::boxed::Box::new(SampledHeuristic::new(SampledSpec::new(1.0, 1.0, 0.5).unwrap())),
            || alloc::boxed::Box::new(ZeroInput),
        ]
    }

    proptest! {
        #[test]
        fn causality_fuzz(
            ys in proptest::collection::vec(-5.0f64..5.0, 2..40),
            cut in 0usize..40,
            noise in proptest::collection::vec(-3.0f64..3.0, 40),
        ) {
            let cut = cut % ys.len();
            let mut altered = ys.clone();
            for (y, d) in altered.iter_mut().zip(&noise).skip(cut + 1) {
                *y += d;
            }
            for make in factories() {
                let a = drive(make().as_mut(), &ys);
                let b = drive(make().as_mut(), &altered);
                for t in 0..=cut {
                    prop_assert_eq!(a[t].to_bits(), b[t].to_bits());
                }
            }
        }

        #[test]
        fn sampled_clip_holds(
            points in proptest::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -1e4f64..1e4), 1..20),
            x in -100.0f64..100.0,
        ) {
            let spec = SampledSpec::new(1.5, 0.5, 0.3).unwrap();
            let h = history(&points);
            let u = sampled_control(&h, x, &spec);
            prop_assert!(u.abs() <= SAMPLED_CLIP_FACTOR * spec.envelope(x));
        }

        #[test]
        fn mode_estimate_exact_on_noise_free_h2_specs(
            entries in proptest::collection::vec(-2.0f64..2.0, 24),
            seed in any::<u64>(),
        ) {
            let chain = MarkovChain::from_rows(&[
                vec![0.6, 0.3, 0.1],
                vec![0.2, 0.5, 0.3],
                vec![0.3, 0.3, 0.4],
            ]).unwrap();
            let a: Vec<_> = (0..3).map(|i| DMatrix::from_row_slice(2, 2, &entries[4 * i..4 * i + 4])).collect();
            let b: Vec<_> = (0..3).map(|i| DMatrix::from_row_slice(2, 1, &entries[12 + 2 * i..14 + 2 * i])).collect();
            let noise = NoiseModel::MartingaleDiff { sigma_lo: 0.1, sigma_hi: 1.0, dim: 2 };
            let spec = MjlsSpec::new(chain, a, b, noise).unwrap();
            let mut rng = crate::EpisodeRng::seed_from_u64(seed);
            let Some(k) = verify_h2(&spec, 50, &mut rng) else { return Ok(()) };
            let gains = vec![k.clone(); 3];
            let mut state = MjlsControllerState::new(spec.clone(), gains, GainSelection::PreviousMode).unwrap();
            for _ in 0..20 {
                let x = DVector::from_fn(2, |_, _| rng.random_range(-1.0..1.0));
                let mode = rng.random_range(0..3);
                let u = state.control(&x);
                let next = spec.a(mode) * &x + spec.b(mode) * &u;
                state.record(x, u);
                prop_assert_eq!(state.estimate_mode(&next).unwrap(), mode);
            }
        }
    }

    #[test]
    fn mjls_examples() {
        let chain = MarkovChain::from_rows(&[vec![1.0]]).unwrap();
        let noise = NoiseModel::MartingaleDiff { sigma_lo: 0.1, sigma_hi: 0.1, dim: 1 };
        let spec = MjlsSpec::new(
            chain,
            vec![DMatrix::from_element(1, 1, 1.5)],
            vec![DMatrix::from_element(1, 1, 1.0)],
            noise,
        )
        .unwrap();
        let k = DMatrix::from_element(1, 1, 1.5);
        let mut state = MjlsControllerState::new(spec, vec![k], GainSelection::PreviousMode).unwrap();
        assert_eq!(state.control(&DVector::zeros(1))[0], 0.0);
        let mut u = [0.0];
        state.act(&[2.0], &mut u).unwrap();
        assert_eq!(u[0], -3.0);
        state.act(&[0.1], &mut u).unwrap();
        assert_eq!(state.estimate(), Some(0));

        // identical modes tie to the smaller index
        let chain = MarkovChain::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let noise = NoiseModel::MartingaleDiff { sigma_lo: 0.1, sigma_hi: 0.1, dim: 1 };
        let one = DMatrix::from_element(1, 1, 1.0);
        let spec = MjlsSpec::new(chain, vec![one.clone(), one.clone()], vec![one.clone(), one.clone()], noise)
            .unwrap();
        let mut state = MjlsControllerState::new(spec, vec![one.clone(), one], GainSelection::PreviousMode).unwrap();
        state.act(&[1.0], &mut u).unwrap();
        state.act(&[0.0], &mut u).unwrap();
        assert_eq!(state.estimate(), Some(0));
        assert_eq!(state.posterior(), &[0.5, 0.5]);
    }
}
