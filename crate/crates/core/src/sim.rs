//! Closed-loop episodes, bit-exact replay, Monte Carlo aggregation and the
//! regret and growth-rate audits.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adversary::{random_lipschitz, realize, GreedyAdversary, PiecewiseLinearFn, SampledAdversary};
use crate::controllers::{
    AdaptiveMv, Feedback, GainSelection, MjlsControllerState, PolyAdaptiveMv, RlsState,
    SampledHeuristic, SwitchingController, VectorRls, ZeroInput,
};
use crate::models::{
    eval_power_wide, integrate_sampled, markov_next, step_mjls, step_nonparametric, step_parametric,
    step_parametric_closed, step_polynomial, MjlsSpec, NoiseModel, PolyRegressors, PowerGrowthFn, SampledSpec, BLOWUP_GUARD,
};
use crate::wide::Wide;
use crate::{EpisodeRng, Error, Result};

/// Where the unknown nonlinearity of a nonparametric or sampled system
/// comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum FunctionSource {
    Fixed(PiecewiseLinearFn),
    /// A fresh random member of the class per episode (see
    /// [`random_lipschitz`]). For sampled systems the slope and offset of
    /// the `SampledSpec` are used and the growth bound is enforced.
    Random { slope: f64, anchors: usize, span: f64, offset: f64 },
    /// Chosen online by the greedy adversary. Nonparametric systems need
    /// bounded adversarial noise, which the adversary also picks.
    Adversary { slope: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum SystemSpec {
    /// `y' = θ f(y) + u + w`; `theta = None` draws `θ ~ N(theta_mean, 1)`.
    Parametric {
        f: PowerGrowthFn,
        theta: Option<f64>,
        theta_mean: f64,
        noise: NoiseModel,
        y0: f64,
    },
    /// Polynomial regression; `theta = None` draws `θ ~ N(θ̄, I)`.
    Polynomial {
        regs: PolyRegressors,
        theta: Option<Vec<f64>>,
        noise: NoiseModel,
        y0: f64,
    },
    /// `y' = f(y) + u + w`.
    Nonparametric { f: FunctionSource, noise: NoiseModel, y0: f64 },
    /// `ẋ = f(x) + u(kh)` observed at the sampling instants.
    Sampled { spec: SampledSpec, f: FunctionSource, x0: f64 },
    /// `x' = A(θ)x + B(θ)u + w`, mode chain started at `mode0`.
    Mjls { spec: MjlsSpec, x0: Vec<f64>, mode0: usize },
}

impl SystemSpec {
    pub fn state_dim(&self) -> usize {
        match self {
            SystemSpec::Mjls { spec, .. } => spec.state_dim(),
            _ => 1,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            SystemSpec::Mjls { spec, .. } => spec.input_dim(),
            _ => 1,
        }
    }

    pub fn class(&self) -> &'static str {
        match self {
            SystemSpec::Parametric { .. } => "parametric",
            SystemSpec::Polynomial { .. } => "polynomial",
            SystemSpec::Nonparametric { .. } => "nonparametric",
            SystemSpec::Sampled { .. } => "sampled",
            SystemSpec::Mjls { .. } => "mjls",
        }
    }

    fn noise_bound(&self) -> Option<f64> {
        match self {
            SystemSpec::Parametric { noise, .. }
            | SystemSpec::Polynomial { noise, .. }
            | SystemSpec::Nonparametric { noise, .. } => noise.bound(),
            _ => None,
        }
    }
}

/// How a least-squares minimum-variance loop is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MvLoop {
    /// Tracks `θ − θ̂` and the information `s` as [`Wide`] numbers and steps
    /// `y' = (θ − θ̂) f(y) + w`. Same closed loop as `BlackBox` in exact
    /// arithmetic, without the cancellation in `θ f(y) − θ̂ f(y)`.
    #[default]
    ErrorForm,
    /// Controller and plant exchange `f64` inputs. Once `|θ f(y)|` passes
    /// about `1e16` the next state is dominated by rounding.
    BlackBox,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ControllerSpec {
    Zero,
    /// Least-squares minimum variance. `theta0 = None` takes the system's
    /// prior mean; `s0 = 1` with that mean is the Bayesian-matched variant.
    AdaptiveMv { s0: f64, theta0: Option<f64>, form: MvLoop },
    PolyAdaptiveMv { s0: f64 },
    /// `eps = None` means `0.1·w̄`.
    Switching { eps: Option<f64>, reference: f64 },
    SampledHeuristic,
    Mjls { gains: Vec<DMatrix<f64>>, selection: GainSelection },
}

impl ControllerSpec {
    /// Bayesian-matched least squares.
    pub fn bayesian_mv() -> Self {
        ControllerSpec::AdaptiveMv { s0: 1.0, theta0: None, form: MvLoop::ErrorForm }
    }

    pub fn build(&self, system: &SystemSpec) -> Result<Box<dyn Feedback>> {
        let mismatch = || {
            Error::Config(format!(
                "controller {self:?} cannot drive a {} system",
                system.class()
            ))
        };
        Ok(match (self, system) {
            (ControllerSpec::Zero, _) => Box::new(ZeroInput),
            (ControllerSpec::AdaptiveMv { s0, theta0, .. }, SystemSpec::Parametric { f, theta_mean, .. }) => {
                let rls = RlsState::new(*s0, theta0.unwrap_or(*theta_mean))?;
                Box::new(AdaptiveMv::new(*f, rls))
            }
            (ControllerSpec::PolyAdaptiveMv { s0 }, SystemSpec::Polynomial { regs, .. }) => {
                let rls = VectorRls::new(*s0, regs.theta_mean())?;
                Box::new(PolyAdaptiveMv::new(regs.clone(), rls)?)
            }
            (
                ControllerSpec::Switching { eps, reference },
                SystemSpec::Parametric { .. } | SystemSpec::Polynomial { .. } | SystemSpec::Nonparametric { .. },
            ) => {
                let eps = match eps {
                    Some(e) => *e,
                    None => 0.1
                        * system.noise_bound().ok_or_else(|| {
                            Error::Config("switching threshold needs eps or a bounded noise model".into())
                        })?,
                };
                Box::new(SwitchingController::new(eps, *reference)?)
            }
            (ControllerSpec::SampledHeuristic, SystemSpec::Sampled { spec, .. }) => {
                Box::new(SampledHeuristic::new(*spec))
            }
            (ControllerSpec::Mjls { gains, selection }, SystemSpec::Mjls { spec, .. }) => Box::new(
                MjlsControllerState::new(spec.clone(), gains.clone(), *selection)?,
            ),
            _ => return Err(mismatch()),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeConfig {
    pub system: SystemSpec,
    pub controller: ControllerSpec,
    pub horizon: usize,
}

/// Closed-loop record. Vector quantities are stored flat, row per step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub dim: usize,
    pub input_dim: usize,
    /// `y_0 … y_steps`.
    pub states: Vec<f64>,
    /// `u_0 … u_{steps-1}`.
    pub inputs: Vec<f64>,
    /// `w_1 … w_steps`, the noise entering each new state.
    pub noises: Vec<f64>,
    /// Mode driving each transition (jump systems only).
    pub modes: Vec<usize>,
    /// Parameter drawn for the episode (parametric and polynomial).
    pub theta: Vec<f64>,
    /// Function realized by the episode: the random draw, or the adversary's
    /// commitments extended to the whole line.
    pub function: Option<PiecewiseLinearFn>,
    /// `θ − θ̂_t` before each transition of an error-form loop.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub estimation_errors: Vec<Wide>,
}

impl Trajectory {
    fn new(dim: usize, input_dim: usize) -> Self {
        Self {
            dim,
            input_dim,
            states: Vec::new(),
            inputs: Vec::new(),
            noises: Vec::new(),
            modes: Vec::new(),
            theta: Vec::new(),
            function: None,
            estimation_errors: Vec::new(),
        }
    }

    /// Number of completed transitions.
    pub fn steps(&self) -> usize {
        self.inputs.len() / self.input_dim
    }

    pub fn state(&self, t: usize) -> &[f64] {
        &self.states[t * self.dim..(t + 1) * self.dim]
    }

    pub fn input(&self, t: usize) -> &[f64] {
        &self.inputs[t * self.input_dim..(t + 1) * self.input_dim]
    }

    /// Noise that entered state `t + 1`.
    pub fn noise(&self, t: usize) -> &[f64] {
        &self.noises[t * self.dim..(t + 1) * self.dim]
    }

    /// `‖y_t‖²` for every stored state.
    pub fn squared_norms(&self) -> Vec<f64> {
        self.states
            .chunks(self.dim)
            .map(|c| c.iter().map(|v| v * v).sum())
            .collect()
    }

    /// Keeps every `every`-th state (and the matching inputs and noises).
    pub fn downsample(&self, every: usize) -> Trajectory {
        let every = every.max(1);
        let pick = |v: &[f64], width: usize| -> Vec<f64> {
            v.chunks(width).step_by(every).flatten().copied().collect()
        };
        Trajectory {
            dim: self.dim,
            input_dim: self.input_dim,
            states: pick(&self.states, self.dim),
            inputs: pick(&self.inputs, self.input_dim),
            noises: pick(&self.noises, self.dim),
            modes: self.modes.iter().step_by(every).copied().collect(),
            theta: self.theta.clone(),
            function: self.function.clone(),
            estimation_errors: self.estimation_errors.iter().step_by(every).copied().collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Outcome {
    Bounded,
    /// `step` is the index of the first state that could not be kept
    /// inside the guard.
    Blowup { step: usize },
    /// A function produced NaN from finite inputs.
    Inconclusive { step: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeVerdict {
    pub outcome: Outcome,
    pub sup_abs_state: f64,
    /// `Σ_{t=1}^{steps} ‖y_t − w_t‖²`.
    pub regret: f64,
    pub horizon: usize,
    /// Cumulative regret at each power-of-two step reached and at the
    /// final step.
    pub checkpoints: Vec<(usize, f64)>,
}

impl EpisodeVerdict {
    pub fn is_blowup(&self) -> bool {
        matches!(self.outcome, Outcome::Blowup { .. })
    }
}

/// Classifies a failed step.
fn stop(err: Error, step: usize) -> Result<Outcome> {
    match err {
        Error::Overflow => Ok(Outcome::Blowup { step }),
        Error::NonFinite => Ok(Outcome::Inconclusive { step }),
        other => Err(other),
    }
}

/// An input the model cannot absorb counts as divergence of the loop.
fn check_input(u: &[f64]) -> Result<()> {
    if u.iter().all(|v| v.abs() <= BLOWUP_GUARD) {
        Ok(())
    } else {
        Err(Error::Overflow)
    }
}

fn draw_theta(rng: &mut EpisodeRng, mean: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    mean + z
}

enum Driver {
    Fixed(PiecewiseLinearFn),
    Greedy(GreedyAdversary),
    Sampled(SampledAdversary),
}

fn function_driver(
    source: &FunctionSource,
    sampled: Option<&SampledSpec>,
    noise: Option<&NoiseModel>,
    rng: &mut EpisodeRng,
) -> Result<Driver> {
    Ok(match (source, sampled) {
        (FunctionSource::Fixed(f), _) => Driver::Fixed(f.clone()),
        (FunctionSource::Random { slope, anchors, span, offset }, None) => {
            Driver::Fixed(random_lipschitz(rng, *slope, *anchors, *span, *offset, false)?)
        }
        (FunctionSource::Random { anchors, span, .. }, Some(spec)) => {
            Driver::Fixed(random_lipschitz(rng, spec.slope, *anchors, *span, spec.offset, true)?)
        }
        (FunctionSource::Adversary { slope }, None) => {
            let bound = match noise {
                Some(NoiseModel::BoundedAdversarial { bound }) => *bound,
                _ => {
                    return Err(Error::Config(
                        "the greedy adversary needs bounded-adversarial noise".into(),
                    ))
                }
            };
            Driver::Greedy(GreedyAdversary::new(*slope, bound)?)
        }
        (FunctionSource::Adversary { .. }, Some(spec)) => Driver::Sampled(SampledAdversary::new(*spec)?),
    })
}

/// Runs one closed-loop episode.
pub fn run_episode(config: &EpisodeConfig, seed: u64) -> Result<(Trajectory, EpisodeVerdict)> {
    let system = &config.system;
    let mut controller = config.controller.build(system)?;
    let mut rng = EpisodeRng::seed_from_u64(seed);
    let (n, m) = (system.state_dim(), system.input_dim());
    let mut traj = Trajectory::new(n, m);
    let mut u = vec![0.0; m];
    let horizon = config.horizon;
    let mut outcome = Outcome::Bounded;

    match system {
        SystemSpec::Parametric { f, theta, theta_mean, noise, y0 } => {
            let theta = theta.unwrap_or_else(|| draw_theta(&mut rng, *theta_mean));
            traj.theta.push(theta);
            let mut y = *y0;
            traj.states.push(y);
            if let ControllerSpec::AdaptiveMv { s0, theta0, form: MvLoop::ErrorForm } = &config.controller {
                let start = ErrorFormStart { s0: *s0, theta0: theta0.unwrap_or(*theta_mean), theta };
                outcome = run_error_form(&mut traj, &mut rng, start, f, noise, horizon);
            } else {
                for t in 0..horizon {
                    controller.act(&[y], &mut u)?;
                    let w = noise.sample_scalar(&mut rng);
                    match check_input(&u).and_then(|_| step_parametric(y, theta, u[0], w, f)) {
                        Ok(next) => {
                            traj.inputs.push(u[0]);
                            traj.noises.push(w);
                            traj.states.push(next);
                            y = next;
                        }
                        Err(e) => {
                            outcome = stop(e, t + 1)?;
                            break;
                        }
                    }
                }
            }
        }
        SystemSpec::Polynomial { regs, theta, noise, y0 } => {
            let theta: Vec<f64> = match theta {
                Some(th) => th.clone(),
                None => regs.theta_mean().iter().map(|&mu| draw_theta(&mut rng, mu)).collect(),
            };
            traj.theta.clone_from(&theta);
            let mut y = *y0;
            traj.states.push(y);
            for t in 0..horizon {
                controller.act(&[y], &mut u)?;
                let w = noise.sample_scalar(&mut rng);
                match check_input(&u).and_then(|_| step_polynomial(y, &theta, u[0], w, regs)) {
                    Ok(next) => {
                        traj.inputs.push(u[0]);
                        traj.noises.push(w);
                        traj.states.push(next);
                        y = next;
                    }
                    Err(e) => {
                        outcome = stop(e, t + 1)?;
                        break;
                    }
                }
            }
        }
        SystemSpec::Nonparametric { f, noise, y0 } => {
            let mut driver = function_driver(f, None, Some(noise), &mut rng)?;
            let mut y = *y0;
            traj.states.push(y);
            for t in 0..horizon {
                controller.act(&[y], &mut u)?;
                let res = check_input(&u).and_then(|_| match &mut driver {
                    Driver::Fixed(func) => {
                        let w = noise.sample_scalar(&mut rng);
                        step_nonparametric(y, func, u[0], w).map(|next| (next, w))
                    }
                    Driver::Greedy(adv) => {
                        let (_, w) = adv.choose(y, u[0])?;
                        step_nonparametric(y, &adv.function, u[0], w).map(|next| (next, w))
                    }
                    Driver::Sampled(_) => unreachable!("sampled adversary on a discrete system"),
                });
                match res {
                    Ok((next, w)) => {
                        traj.inputs.push(u[0]);
                        traj.noises.push(w);
                        traj.states.push(next);
                        y = next;
                    }
                    Err(e) => {
                        outcome = stop(e, t + 1)?;
                        break;
                    }
                }
            }
            traj.function = Some(match driver {
                Driver::Fixed(func) => func,
                Driver::Greedy(adv) if adv.function.is_empty() => adv.function,
                Driver::Greedy(adv) => realize(&adv.function)?,
                Driver::Sampled(_) => unreachable!(),
            });
        }
        SystemSpec::Sampled { spec, f, x0 } => {
            let mut driver = function_driver(f, Some(spec), None, &mut rng)?;
            let mut x = *x0;
            traj.states.push(x);
            for t in 0..horizon {
                controller.act(&[x], &mut u)?;
                let res = check_input(&u).and_then(|_| match &mut driver {
                    Driver::Fixed(func) => integrate_sampled(x, func, u[0], spec),
                    Driver::Sampled(adv) => adv.step(x, u[0]).map(|mv| mv.next),
                    Driver::Greedy(_) => unreachable!("discrete adversary on a sampled system"),
                });
                match res {
                    Ok(next) => {
                        traj.inputs.push(u[0]);
                        traj.noises.push(0.0);
                        traj.states.push(next);
                        x = next;
                    }
                    Err(e) => {
                        outcome = stop(e, t + 1)?;
                        break;
                    }
                }
            }
            traj.function = Some(match driver {
                Driver::Fixed(func) => func,
                Driver::Sampled(adv) if adv.function().is_empty() => adv.into_function(),
                Driver::Sampled(adv) => realize(adv.function())?,
                Driver::Greedy(_) => unreachable!(),
            });
        }
        SystemSpec::Mjls { spec, x0, mode0 } => {
            if x0.len() != n || *mode0 >= spec.modes() {
                return Err(Error::Config(format!(
                    "initial state has {} entries (need {n}) and mode {mode0} of {}",
                    x0.len(),
                    spec.modes()
                )));
            }
            let mut x = DVector::from_column_slice(x0);
            let mut mode = *mode0;
            let mut w = vec![0.0; n];
            traj.states.extend_from_slice(x0);
            for t in 0..horizon {
                controller.act(x.as_slice(), &mut u)?;
                spec.noise().sample_vector(&mut rng, &mut w);
                let uv = DVector::from_column_slice(&u);
                let wv = DVector::from_column_slice(&w);
                match check_input(&u).and_then(|_| step_mjls(&x, mode, &uv, &wv, spec)) {
                    Ok(next) => {
                        traj.inputs.extend_from_slice(&u);
                        traj.noises.extend_from_slice(&w);
                        traj.modes.push(mode);
                        traj.states.extend_from_slice(next.as_slice());
                        x = next;
                    }
                    Err(e) => {
                        outcome = stop(e, t + 1)?;
                        break;
                    }
                }
                mode = markov_next(mode, spec.chain(), &mut rng);
            }
        }
    }

    let verdict = verdict_for(&traj, outcome, horizon);
    Ok((traj, verdict))
}

struct ErrorFormStart {
    s0: f64,
    theta0: f64,
    theta: f64,
}

/// Least-squares minimum variance on a parametric plant, evaluated in
/// estimation-error coordinates. Consumes the generator exactly like the
/// black-box loop.
fn run_error_form(
    traj: &mut Trajectory,
    rng: &mut EpisodeRng,
    start: ErrorFormStart,
    f: &PowerGrowthFn,
    noise: &NoiseModel,
    horizon: usize,
) -> Outcome {
    let theta = Wide::from_f64(start.theta);
    let mut err = theta - Wide::from_f64(start.theta0);
    let mut s = Wide::from_f64(start.s0);
    let mut y = traj.states[0];
    for t in 0..horizon {
        let phi = eval_power_wide(f, y);
        let u = (-(theta - err) * phi).to_f64();
        let w = noise.sample_scalar(rng);
        let next = match step_parametric_closed(y, err, w, f) {
            Ok(next) => next,
            Err(Error::NonFinite) => return Outcome::Inconclusive { step: t + 1 },
            Err(_) => return Outcome::Blowup { step: t + 1 },
        };
        traj.estimation_errors.push(err);
        traj.inputs.push(u);
        traj.noises.push(w);
        traj.states.push(next);
        if !phi.is_zero() {
            // θ̂' = θ̂ + (φ/s')(y' − θ̂φ) with y' − θ̂φ = err·φ + w
            let s_next = s + phi * phi;
            err = (err * s - phi * Wide::from_f64(w)) / s_next;
            s = s_next;
        }
        y = next;
    }
    Outcome::Bounded
}

fn verdict_for(traj: &Trajectory, outcome: Outcome, horizon: usize) -> EpisodeVerdict {
    let sup_abs_state = traj.states.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut regret = 0.0;
    let mut checkpoints = Vec::new();
    let mut next_checkpoint = 1;
    for t in 1..=traj.steps() {
        let (y, w) = (traj.state(t), traj.noise(t - 1));
        regret += y.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        if t == next_checkpoint {
            checkpoints.push((t, regret));
            next_checkpoint *= 2;
        } else if t == traj.steps() {
            checkpoints.push((t, regret));
        }
    }
    EpisodeVerdict { outcome, sup_abs_state, regret, horizon, checkpoints }
}

/// `Σ_{t=1}^{steps} ‖y_t − w_t‖²` recomputed from the stored trajectory.
pub fn trajectory_regret(traj: &Trajectory) -> f64 {
    (1..=traj.steps())
        .map(|t| {
            traj.state(t)
                .iter()
                .zip(traj.noise(t - 1))
                .map(|(y, w)| {
                    let d = y - w;
                    d * d
                })
                .sum::<f64>()
        })
        .sum()
}

/// Recomputes every transition from the stored states, inputs, noises,
/// modes and realized function. Returns the first step whose recomputed
/// next state differs in any bit.
pub fn replay(traj: &Trajectory, system: &SystemSpec) -> Result<Option<usize>> {
    let steps = traj.steps();
    for t in 0..steps {
        let (x, u, w) = (traj.state(t), traj.input(t), traj.noise(t));
        let next: Vec<f64> = match system {
            SystemSpec::Parametric { f, .. } if !traj.estimation_errors.is_empty() => {
                vec![step_parametric_closed(x[0], traj.estimation_errors[t], w[0], f)?]
            }
            SystemSpec::Parametric { f, .. } => {
                vec![step_parametric(x[0], traj.theta[0], u[0], w[0], f)?]
            }
            SystemSpec::Polynomial { regs, .. } => {
                vec![step_polynomial(x[0], &traj.theta, u[0], w[0], regs)?]
            }
            SystemSpec::Nonparametric { .. } => {
                let f = traj
                    .function
                    .as_ref()
                    .ok_or_else(|| Error::Precondition("trajectory has no realized function".into()))?;
                vec![step_nonparametric(x[0], f, u[0], w[0])?]
            }
            SystemSpec::Sampled { spec, .. } => {
                let f = traj
                    .function
                    .as_ref()
                    .ok_or_else(|| Error::Precondition("trajectory has no realized function".into()))?;
                vec![integrate_sampled(x[0], f, u[0], spec)?]
            }
            SystemSpec::Mjls { spec, .. } => {
                let xv = DVector::from_column_slice(x);
                let uv = DVector::from_column_slice(u);
                let wv = DVector::from_column_slice(w);
                step_mjls(&xv, traj.modes[t], &uv, &wv, spec)?.as_slice().to_vec()
            }
        };
        let stored = traj.state(t + 1);
        if next.iter().zip(stored).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

/// SplitMix64 finalizer.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of episode `index` under `master`: `splitmix64(splitmix64(master) ^ index)`.
pub fn episode_seed(master: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master) ^ index)
}

/// What Monte Carlo keeps from one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub index: u64,
    pub seed: u64,
    pub verdict: EpisodeVerdict,
    pub squared_norms: Vec<f64>,
}

pub fn summarize(config: &EpisodeConfig, master: u64, index: u64) -> Result<EpisodeSummary> {
    let seed = episode_seed(master, index);
    let (traj, verdict) = run_episode(config, seed)?;
    Ok(EpisodeSummary { index, seed, verdict, squared_norms: traj.squared_norms() })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegretPoint {
    pub horizon: usize,
    pub mean: f64,
    pub half_width: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McReport {
    pub seeds: usize,
    pub blowups: usize,
    pub inconclusive: usize,
    pub blowup_fraction: f64,
    /// 95% normal-approximation half-width of `blowup_fraction`.
    pub blowup_half_width: f64,
    /// Episodes that stayed bounded; the curves average over these only.
    pub bounded: usize,
    pub mean_sq_curve: Vec<f64>,
    pub mean_sq_half_width: Vec<f64>,
    pub regret_vs_log_t: Vec<RegretPoint>,
}

impl McReport {
    /// Largest entry of the mean-square curve.
    pub fn sup_mean_sq(&self) -> f64 {
        self.mean_sq_curve.iter().fold(0.0, |a, b| a.max(*b))
    }
}

const Z95: f64 = 1.959_963_984_540_054;

fn mean_half_width(sum: f64, sum_sq: f64, count: usize) -> (f64, f64) {
    if count == 0 {
        return (f64::NAN, f64::NAN);
    }
    let n = count as f64;
    let mean = sum / n;
    if count == 1 {
        return (mean, 0.0);
    }
    let var = ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0);
    (mean, Z95 * libm::sqrt(var / n))
}

/// Aggregates summaries in index order, whatever order they were produced in.
pub fn aggregate(mut summaries: Vec<EpisodeSummary>) -> McReport {
    summaries.sort_by_key(|s| s.index);
    let seeds = summaries.len();
    let blowups = summaries.iter().filter(|s| s.verdict.is_blowup()).count();
    let inconclusive = summaries
        .iter()
        .filter(|s| matches!(s.verdict.outcome, Outcome::Inconclusive { .. }))
        .count();
    let kept: Vec<&EpisodeSummary> = summaries
        .iter()
        .filter(|s| s.verdict.outcome == Outcome::Bounded)
        .collect();
    let len = kept.iter().map(|s| s.squared_norms.len()).max().unwrap_or(0);
    let mut mean_sq_curve = Vec::with_capacity(len);
    let mut mean_sq_half_width = Vec::with_capacity(len);
    for t in 0..len {
        let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0);
        for s in &kept {
            if let Some(v) = s.squared_norms.get(t) {
                sum += v;
                sum_sq += v * v;
                count += 1;
            }
        }
        let (mean, hw) = mean_half_width(sum, sum_sq, count);
        mean_sq_curve.push(mean);
        mean_sq_half_width.push(hw);
    }
    let mut horizons: Vec<usize> = kept
        .iter()
        .flat_map(|s| s.verdict.checkpoints.iter().map(|c| c.0))
        .collect();
    horizons.sort_unstable();
    horizons.dedup();
    let regret_vs_log_t = horizons
        .into_iter()
        .map(|h| {
            let (mut sum, mut sum_sq, mut count) = (0.0, 0.0, 0);
            for s in &kept {
                if let Some(&(_, r)) = s.verdict.checkpoints.iter().find(|c| c.0 == h) {
                    sum += r;
                    sum_sq += r * r;
                    count += 1;
                }
            }
            let (mean, half_width) = mean_half_width(sum, sum_sq, count);
            RegretPoint { horizon: h, mean, half_width, count }
        })
        .collect();
    let fraction = if seeds == 0 { 0.0 } else { blowups as f64 / seeds as f64 };
    let blowup_half_width = if seeds == 0 {
        0.0
    } else {
        Z95 * libm::sqrt(fraction * (1.0 - fraction) / seeds as f64)
    };
    McReport {
        seeds,
        blowups,
        inconclusive,
        blowup_fraction: fraction,
        blowup_half_width,
        bounded: kept.len(),
        mean_sq_curve,
        mean_sq_half_width,
        regret_vs_log_t,
    }
}

/// Serial Monte Carlo over episodes `0..n_seeds`.
pub fn monte_carlo(config: &EpisodeConfig, master: u64, n_seeds: usize) -> Result<McReport> {
    if n_seeds == 0 {
        return Err(Error::Domain("need at least one seed".into()));
    }
    let summaries = (0..n_seeds as u64)
        .map(|i| summarize(config, master, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(summaries))
}

/// Least-squares line `y = intercept + slope·x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub points: usize,
}

pub fn line_fit(points: &[(f64, f64)]) -> Result<LineFit> {
    if points.len() < 2 {
        return Err(Error::Precondition("a line fit needs two points".into()));
    }
    let n = points.len() as f64;
    // offsets from the first point keep flat series exactly flat
    let (x0, y0) = points[0];
    let mx = x0 + points.iter().map(|p| p.0 - x0).sum::<f64>() / n;
    let my = y0 + points.iter().map(|p| p.1 - y0).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my) * (p.1 - my)).sum();
    if sxx == 0.0 {
        return Err(Error::Precondition("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = points
        .iter()
        .map(|p| {
            let r = p.1 - intercept - slope * p.0;
            r * r
        })
        .sum();
    // a perfectly flat series is fitted exactly
    let r2 = if syy == 0.0 { 1.0 } else { 1.0 - sse / syy };
    Ok(LineFit { slope, intercept, r2, points: points.len() })
}

pub const REGRET_FIT_MIN_EXP: u32 = 7;
pub const REGRET_FIT_MAX_EXP: u32 = 13;

/// Fits mean regret against `ln T` over the checkpoints `T = 2^lo … 2^hi`.
pub fn regret_logfit_range(report: &McReport, lo: u32, hi: u32) -> Result<LineFit> {
    let points: Vec<(f64, f64)> = report
        .regret_vs_log_t
        .iter()
        .filter(|p| p.horizon >= 1usize << lo && p.horizon <= 1usize << hi && p.mean.is_finite())
        .map(|p| (libm::log(p.horizon as f64), p.mean))
        .collect();
    if points.len() < 5 {
        return Err(Error::Precondition(format!(
            "regret fit needs at least 5 checkpoints, have {}",
            points.len()
        )));
    }
    line_fit(&points)
}

pub fn regret_logfit(report: &McReport) -> Result<LineFit> {
    regret_logfit_range(report, REGRET_FIT_MIN_EXP, REGRET_FIT_MAX_EXP)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GrowthAudit {
    /// `(k, ln|x_{k+1}| / ln|x_k|)` for every `k` with `|x_k| > 1`.
    pub log_ratios: Vec<(usize, f64)>,
    /// `(k, |x_{k+1}| / |x_k|)` for every `k` with `x_k ≠ 0`.
    pub multipliers: Vec<(usize, f64)>,
}

/// Growth rates of a scalar sequence.
pub fn growth_rates(xs: &[f64]) -> GrowthAudit {
    let mut audit = GrowthAudit::default();
    for (k, w) in xs.windows(2).enumerate() {
        let (a, b) = (w[0].abs(), w[1].abs());
        if a > 1.0 {
            audit.log_ratios.push((k, libm::log(b) / libm::log(a)));
        }
        if a > 0.0 {
            audit.multipliers.push((k, b / a));
        }
    }
    audit
}

/// Growth audit of a diverged scalar trajectory; empty otherwise.
pub fn growth_rate_audit(traj: &Trajectory, verdict: &EpisodeVerdict) -> GrowthAudit {
    if !verdict.is_blowup() || traj.dim != 1 {
        return GrowthAudit::default();
    }
    growth_rates(&traj.states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adversary::Extension;
    use crate::models::MarkovChain;
    use proptest::prelude::*;

    fn parametric(b: f64, theta: Option<f64>, variance: f64) -> SystemSpec {
        SystemSpec::Parametric {
            f: PowerGrowthFn::new(1.0, b).unwrap(),
            theta,
            theta_mean: 0.0,
            noise: NoiseModel::Gaussian { variance },
            y0: 0.0,
        }
    }

    fn cfg(system: SystemSpec, controller: ControllerSpec, horizon: usize) -> EpisodeConfig {
        EpisodeConfig { system, controller, horizon }
    }

    #[test]
    fn zero_system_under_mv() {
        // θ = 0 and a vanishing noise variance leave y_t = w_t
        let c = cfg(
            SystemSpec::Parametric {
                f: PowerGrowthFn::new(1.0, 2.0).unwrap(),
                theta: Some(0.0),
                theta_mean: 0.0,
                noise: NoiseModel::Gaussian { variance: 1e-300 },
                y0: 3.0,
            },
            ControllerSpec::AdaptiveMv { s0: 1.0, theta0: Some(0.0), form: MvLoop::ErrorForm },
            50,
        );
        let (traj, v) = run_episode(&c, 1).unwrap();
        assert_eq!(v.outcome, Outcome::Bounded);
        assert_eq!(v.sup_abs_state, 3.0);
        assert_eq!(v.regret, 0.0);
        assert_eq!(traj.steps(), 50);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let c = cfg(parametric(2.0, None, 1.0), ControllerSpec::bayesian_mv(), 300);
        assert_eq!(run_episode(&c, 9).unwrap(), run_episode(&c, 9).unwrap());
        assert_ne!(run_episode(&c, 9).unwrap().0, run_episode(&c, 10).unwrap().0);
    }

    #[test]
    fn mismatched_controller_is_rejected() {
        let c = cfg(
            parametric(2.0, None, 1.0),
            ControllerSpec::Mjls { gains: vec![], selection: GainSelection::PreviousMode },
            10,
        );
        assert!(matches!(run_episode(&c, 0), Err(Error::Config(_))));
        let c = cfg(parametric(2.0, None, 1.0), ControllerSpec::Switching { eps: None, reference: 0.0 }, 10);
        assert!(matches!(run_episode(&c, 0), Err(Error::Config(_))));
    }

    #[test]
    fn high_exponent_blows_up_sometimes() {
        let c = cfg(parametric(5.0, None, 1.0), ControllerSpec::bayesian_mv(), 200);
        let report = monte_carlo(&c, 11, 300).unwrap();
        assert!(report.blowups > 0);
    }

    #[test]
    fn one_seed_report_matches_episode() {
        let c = cfg(parametric(2.0, None, 1.0), ControllerSpec::bayesian_mv(), 64);
        let report = monte_carlo(&c, 5, 1).unwrap();
        let (traj, v) = run_episode(&c, episode_seed(5, 0)).unwrap();
        assert_eq!(report.mean_sq_curve, traj.squared_norms());
        assert_eq!(report.blowup_fraction, 0.0);
        let last = report.regret_vs_log_t.last().unwrap();
        assert_eq!((last.horizon, last.mean), (64, v.regret));
    }

    #[test]
    fn report_is_independent_of_production_order() {
        let c = cfg(parametric(3.0, None, 1.0), ControllerSpec::bayesian_mv(), 128);
        let forward: Vec<_> = (0..20).map(|i| summarize(&c, 77, i).unwrap()).collect();
        let mut backward = forward.clone();
        backward.reverse();
        assert_eq!(aggregate(forward), aggregate(backward));
    }

    #[test]
    fn logfit_examples() {
        let report = |f: &dyn Fn(f64) -> f64| McReport {
            seeds: 1,
            blowups: 0,
            inconclusive: 0,
            blowup_fraction: 0.0,
            blowup_half_width: 0.0,
            bounded: 1,
            mean_sq_curve: vec![],
            mean_sq_half_width: vec![],
            regret_vs_log_t: (0..=13)
                .map(|k| {
                    let h = 1usize << k;
                    RegretPoint { horizon: h, mean: f(h as f64), half_width: 0.0, count: 1 }
                })
                .collect(),
        };
        let fit = regret_logfit(&report(&|t| 3.0 * libm::log(t))).unwrap();
        assert!((fit.slope - 3.0).abs() < 1e-12 && (fit.r2 - 1.0).abs() < 1e-12);
        assert_eq!(fit.points, 7);
        let flat = regret_logfit(&report(&|_| 4.0)).unwrap();
        assert_eq!(flat.slope, 0.0);
        let huge = regret_logfit(&report(&|_| 1.2796671128390321e95)).unwrap();
        assert_eq!((huge.slope, huge.r2), (0.0, 1.0));
        let mut short = report(&|t| t);
        short.regret_vs_log_t.truncate(11);
        assert!(regret_logfit(&short).is_err());
    }

    #[test]
    fn growth_examples() {
        let doubly: Vec<f64> = (0..8).map(|k| libm::pow(2.0, libm::pow(2.0, k as f64))).collect();
        let audit = growth_rates(&doubly);
        assert!(audit.log_ratios.iter().all(|r| (r.1 - 2.0).abs() < 1e-12));
        let geometric: Vec<f64> = (0..200).map(|k| libm::pow(2.0, k as f64)).collect();
        let audit = growth_rates(&geometric);
        let last = audit.log_ratios.last().unwrap().1;
        assert!((last - 1.0).abs() < 0.01);
        let traj = Trajectory { states: geometric, ..Trajectory::new(1, 1) };
        let bounded = EpisodeVerdict {
            outcome: Outcome::Bounded,
            sup_abs_state: 0.0,
            regret: 0.0,
            horizon: 0,
            checkpoints: vec![],
        };
        assert_eq!(growth_rate_audit(&traj, &bounded), GrowthAudit::default());
    }

    fn systems() -> Vec<EpisodeConfig> {
        let chain = MarkovChain::from_rows(&[vec![0.7, 0.3], vec![0.4, 0.6]]).unwrap();
        let mjls = MjlsSpec::new(
            chain,
            vec![DMatrix::from_element(1, 1, 0.5), DMatrix::from_element(1, 1, 1.5)],
            vec![DMatrix::from_element(1, 1, 1.0), DMatrix::from_element(1, 1, 1.0)],
            NoiseModel::MartingaleDiff { sigma_lo: 1.0, sigma_hi: 1.0, dim: 1 },
        )
        .unwrap();
        let sampled = SampledSpec::new(2.0, 1.0, 0.25).unwrap();
        let fixed = PiecewiseLinearFn::from_anchors(1.5, Extension::Linear, [(-1.0, 1.0), (2.0, -0.5)]).unwrap();
        vec![
            cfg(parametric(2.5, None, 1.0), ControllerSpec::bayesian_mv(), 200),
            cfg(
                parametric(2.5, None, 1.0),
                ControllerSpec::AdaptiveMv { s0: 1.0, theta0: None, form: MvLoop::BlackBox },
                200,
            ),
            cfg(
                SystemSpec::Polynomial {
                    regs: PolyRegressors::new(vec![2.0, 1.0], vec![0.5, -0.5]).unwrap(),
                    theta: None,
                    noise: NoiseModel::BoundedRandom { bound: 1.0 },
                    y0: 0.5,
                },
                ControllerSpec::PolyAdaptiveMv { s0: 1.0 },
                200,
            ),
            cfg(
                SystemSpec::Nonparametric {
                    f: FunctionSource::Random { slope: 2.0, anchors: 8, span: 5.0, offset: 1.0 },
                    noise: NoiseModel::BoundedRandom { bound: 1.0 },
                    y0: 0.0,
                },
                ControllerSpec::Switching { eps: None, reference: 0.0 },
                300,
            ),
            cfg(
                SystemSpec::Nonparametric {
                    f: FunctionSource::Fixed(fixed),
                    noise: NoiseModel::Gaussian { variance: 0.5 },
                    y0: 1.0,
                },
                ControllerSpec::Switching { eps: Some(0.1), reference: 0.0 },
                300,
            ),
            cfg(
                SystemSpec::Nonparametric {
                    f: FunctionSource::Adversary { slope: 6.0 },
                    noise: NoiseModel::BoundedAdversarial { bound: 1.0 },
                    y0: 0.0,
                },
                ControllerSpec::Switching { eps: None, reference: 0.0 },
                300,
            ),
            cfg(
                SystemSpec::Sampled {
                    spec: sampled,
                    f: FunctionSource::Random { slope: 2.0, anchors: 6, span: 3.0, offset: 1.0 },
                    x0: 0.3,
                },
                ControllerSpec::SampledHeuristic,
                100,
            ),
            cfg(
                SystemSpec::Sampled { spec: SampledSpec::new(8.0, 1.0, 1.0).unwrap(), f: FunctionSource::Adversary { slope: 8.0 }, x0: 0.0 },
                ControllerSpec::SampledHeuristic,
                60,
            ),
            cfg(
                SystemSpec::Sampled { spec: SampledSpec::new(8.0, 1.0, 1.0).unwrap(), f: FunctionSource::Adversary { slope: 8.0 }, x0: 0.0 },
                ControllerSpec::Zero,
                60,
            ),
            cfg(
                SystemSpec::Mjls { spec: mjls, x0: vec![1.0], mode0: 0 },
                ControllerSpec::Mjls {
                    gains: vec![DMatrix::from_element(1, 1, 0.8), DMatrix::from_element(1, 1, 1.0)],
                    selection: GainSelection::PreviousMode,
                },
                300,
            ),
        ]
    }

    #[test]
    fn replay_is_bit_exact_for_every_class() {
        for c in systems() {
            for seed in 0..4 {
                let (traj, verdict) = run_episode(&c, seed).unwrap();
                assert!(traj.steps() > 0, "{}", c.system.class());
                assert_eq!(replay(&traj, &c.system).unwrap(), None, "{} seed {seed}", c.system.class());
                let independent = trajectory_regret(&traj);
                let scale = verdict.regret.abs().max(1e-300);
                assert!((independent - verdict.regret).abs() <= 1e-9 * scale);
            }
        }
    }

    #[test]
    fn error_form_agrees_with_black_box_on_tame_paths() {
        let sys = parametric(1.5, None, 1.0);
        let black = ControllerSpec::AdaptiveMv { s0: 1.0, theta0: None, form: MvLoop::BlackBox };
        for seed in 0..20 {
            let (a, va) = run_episode(&cfg(sys.clone(), ControllerSpec::bayesian_mv(), 400), seed).unwrap();
            let (b, vb) = run_episode(&cfg(sys.clone(), black.clone(), 400), seed).unwrap();
            assert_eq!(a.noises, b.noises);
            assert_eq!((va.outcome, vb.outcome), (Outcome::Bounded, Outcome::Bounded));
            for (x, y) in a.states.iter().zip(&b.states) {
                assert!((x - y).abs() <= 1e-6 * (1.0 + x.abs()), "seed {seed}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn error_form_survives_large_transients() {
        // the black-box loop loses every digit of y' once |θf(y)| ≫ 1e16
        let c = cfg(parametric(3.5, None, 1.0), ControllerSpec::bayesian_mv(), 300);
        let mut peak = 0.0f64;
        for seed in 0..200 {
            let (traj, v) = run_episode(&c, episode_seed(2024, seed)).unwrap();
            assert_eq!(v.outcome, Outcome::Bounded, "seed {seed}");
            assert_eq!(replay(&traj, &c.system).unwrap(), None);
            peak = peak.max(v.sup_abs_state);
        }
        assert!(peak > 1e16);
    }

    #[test]
    fn replay_detects_tampering() {
        let c = &systems()[0];
        let (mut traj, _) = run_episode(c, 3).unwrap();
        traj.noises[17] += 1e-9;
        assert_eq!(replay(&traj, &c.system).unwrap(), Some(17));
    }

    #[test]
    fn sampled_adversary_grows_at_least_lh_over_2() {
        let c = &systems()[8];
        let (traj, verdict) = run_episode(c, 0).unwrap();
        assert!(verdict.is_blowup());
        let audit = growth_rate_audit(&traj, &verdict);
        for &(k, m) in audit.multipliers.iter().take(12) {
            assert!(m >= 4.0 * 0.95, "step {k}: {m}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn monte_carlo_reproducible(master in any::<u64>()) {
            let c = cfg(parametric(3.0, None, 1.0), ControllerSpec::bayesian_mv(), 64);
            prop_assert_eq!(monte_carlo(&c, master, 6).unwrap(), monte_carlo(&c, master, 6).unwrap());
        }
    }
}
