//! Experiment configuration files.
//!
//! One TOML file describes one experiment; the `experiment` key selects the
//! variant and every other key belongs to it. Unknown keys are rejected.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use feedback_lab_core::controllers::GainSelection;
use feedback_lab_core::models::{MarkovChain, MjlsSpec, NoiseModel, DEFAULT_SUBSTEPS};
use feedback_lab_core::sim::MvLoop;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, LabResult};

pub const DEFAULT_SEED: u64 = 2024;
pub const SEED_ENV: &str = "FEEDBACK_LAB_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSettings {
    pub dir: PathBuf,
    pub format: Format,
    pub force: bool,
    /// Write a `# generated …` first line (CSV) or `generated` key (JSON).
    pub timestamp: bool,
    /// Keep every n-th row of trajectory tables.
    pub every: usize,
}

impl Default for OutputSettings {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("results"),
            format: Format::Csv,
            force: false,
            timestamp: true,
            every: 1,
        }
    }
}

/// A list of values, written either as an array or as `start:stop:step`
/// (inclusive) or `a,b,c` in a string.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Grid {
    List(Vec<f64>),
    Spec(String),
}

impl Grid {
    pub fn values(&self) -> LabResult<Vec<f64>> {
        match self {
            Grid::List(v) => Ok(v.clone()),
            Grid::Spec(s) => parse_grid(s),
        }
    }
}

impl FromStr for Grid {
    type Err = LabError;
    fn from_str(s: &str) -> LabResult<Self> {
        parse_grid(s)?;
        Ok(Grid::Spec(s.to_string()))
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Grid::Spec(s) => f.write_str(s),
            Grid::List(v) => {
                let parts: Vec<String> = v.iter().map(|x| x.to_string()).collect();
                f.write_str(&parts.join(","))
            }
        }
    }
}

fn parse_number(s: &str) -> LabResult<f64> {
    s.trim()
        .parse::<f64>()
        .map_err(|_| LabError::Validation(format!("not a number: {s:?}")))
}

fn parse_grid(s: &str) -> LabResult<Vec<f64>> {
    let s = s.trim();
    if s.contains(':') {
        let parts: Vec<&str> = s.split(':').collect();
        let [start, stop, step] = parts[..] else {
            return Err(LabError::Validation(format!("range must be start:stop:step, got {s:?}")));
        };
        let (start, stop, step) = (parse_number(start)?, parse_number(stop)?, parse_number(step)?);
        if !(step > 0.0) || !(stop >= start) || !start.is_finite() || !stop.is_finite() {
            return Err(LabError::Validation(format!("empty or unbounded range {s:?}")));
        }
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        if count > 1_000_000 {
            return Err(LabError::Validation(format!("range {s:?} has {count} points")));
        }
        // round to 12 decimals so 0.1 steps give the nearest doubles to the decimals
        Ok((0..count)
            .map(|i| {
                let v = start + i as f64 * step;
                format!("{v:.12}").parse().unwrap_or(v)
            })
            .collect())
    } else {
        s.split(',').filter(|p| !p.trim().is_empty()).map(parse_number).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
pub enum ExperimentConfig {
    ParametricSweep(ParametricSweep),
    PolyCheck(PolyCheck),
    NonparamDuel(NonparamDuel),
    HighorderCheck(HighorderCheck),
    SampledSweep(SampledSweep),
    MjlsSolve(MjlsSolve),
    MjlsRun(MjlsRun),
}

impl ExperimentConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentConfig::ParametricSweep(_) => "parametric-sweep",
            ExperimentConfig::PolyCheck(_) => "poly-check",
            ExperimentConfig::NonparamDuel(_) => "nonparam-duel",
            ExperimentConfig::HighorderCheck(_) => "highorder-check",
            ExperimentConfig::SampledSweep(_) => "sampled-sweep",
            ExperimentConfig::MjlsSolve(_) => "mjls-solve",
            ExperimentConfig::MjlsRun(_) => "mjls-run",
        }
    }

    pub fn seed(&self) -> u64 {
        *self.common().0
    }

    pub fn output(&self) -> &OutputSettings {
        self.common().1
    }

    fn common(&self) -> (&u64, &OutputSettings) {
        match self {
            ExperimentConfig::ParametricSweep(c) => (&c.seed, &c.output),
            ExperimentConfig::PolyCheck(c) => (&c.seed, &c.output),
            ExperimentConfig::NonparamDuel(c) => (&c.seed, &c.output),
            ExperimentConfig::HighorderCheck(c) => (&c.seed, &c.output),
            ExperimentConfig::SampledSweep(c) => (&c.seed, &c.output),
            ExperimentConfig::MjlsSolve(c) => (&c.seed, &c.output),
            ExperimentConfig::MjlsRun(c) => (&c.seed, &c.output),
        }
    }

    pub fn common_mut(&mut self) -> (&mut u64, &mut OutputSettings) {
        match self {
            ExperimentConfig::ParametricSweep(c) => (&mut c.seed, &mut c.output),
            ExperimentConfig::PolyCheck(c) => (&mut c.seed, &mut c.output),
            ExperimentConfig::NonparamDuel(c) => (&mut c.seed, &mut c.output),
            ExperimentConfig::HighorderCheck(c) => (&mut c.seed, &mut c.output),
            ExperimentConfig::SampledSweep(c) => (&mut c.seed, &mut c.output),
            ExperimentConfig::MjlsSolve(c) => (&mut c.seed, &mut c.output),
            ExperimentConfig::MjlsRun(c) => (&mut c.seed, &mut c.output),
        }
    }

    pub fn from_toml(text: &str) -> LabResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| LabError::Validation(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            LabError::Validation(msg) => LabError::Validation(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> LabResult<String> {
        toml::to_string(self).map_err(|e| LabError::Emit(e.to_string()))
    }

    /// Checks everything that can be checked without running.
    pub fn validate(&self) -> LabResult<()> {
        let out = self.output();
        if out.every == 0 {
            return invalid("output.every must be at least 1");
        }
        match self {
            ExperimentConfig::ParametricSweep(c) => {
                let bs = c.b.values()?;
                if bs.is_empty() {
                    return invalid("b grid is empty");
                }
                if bs.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
                    return invalid("growth exponents must be finite and nonnegative");
                }
                positive("gain", c.gain)?;
                positive("noise_variance", c.noise_variance)?;
                nonnegative("s0", c.s0)?;
                at_least_one("seeds", c.seeds)?;
                at_least_one("horizon", c.horizon)
            }
            ExperimentConfig::PolyCheck(c) => {
                if c.exponents.is_empty() {
                    return invalid("need at least one exponent");
                }
                if c.exponents.windows(2).any(|w| !(w[0] > w[1])) || c.exponents.iter().any(|b| !(*b > 0.0)) {
                    return invalid("exponents must be positive and strictly decreasing");
                }
                Ok(())
            }
            ExperimentConfig::NonparamDuel(c) => {
                let slopes = c.slopes.values()?;
                if slopes.is_empty() || slopes.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                    return invalid("slopes must be a nonempty list of positive numbers");
                }
                positive("noise_bound", c.noise_bound)?;
                positive("escape", c.escape)?;
                positive("span", c.span)?;
                positive("offset", c.offset)?;
                if let Some(eps) = c.eps {
                    positive("eps", eps)?;
                }
                at_least_one("members", c.members)?;
                at_least_one("anchors", c.anchors)?;
                at_least_one("horizon", c.horizon)?;
                at_least_one("adversary_horizon", c.adversary_horizon)
            }
            ExperimentConfig::HighorderCheck(c) => {
                if c.orders.is_empty() || c.orders.contains(&0) {
                    return invalid("orders must be a nonempty list of positive integers");
                }
                if c.slopes.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                    return invalid("slopes must be positive");
                }
                Ok(())
            }
            ExperimentConfig::SampledSweep(c) => {
                let slopes = c.slopes.values()?;
                if slopes.is_empty() || slopes.iter().any(|l| !(*l > 0.0 && l.is_finite())) {
                    return invalid("slopes must be a nonempty list of positive numbers");
                }
                positive("period", c.period)?;
                positive("offset", c.offset)?;
                positive("span", c.span)?;
                at_least_one("seeds", c.seeds)?;
                at_least_one("horizon", c.horizon)?;
                at_least_one("anchors", c.anchors)?;
                at_least_one("substeps", c.substeps)
            }
            ExperimentConfig::MjlsSolve(c) => {
                c.system.build()?;
                positive("tol", c.tol)?;
                at_least_one("max_iter", c.max_iter)
            }
            ExperimentConfig::MjlsRun(c) => {
                let spec = c.system.build()?;
                if let Some(x0) = &c.x0 {
                    if x0.len() != spec.state_dim() {
                        return invalid(&format!("x0 has {} entries, state dimension is {}", x0.len(), spec.state_dim()));
                    }
                }
                if c.mode0 >= spec.modes() {
                    return invalid(&format!("mode0 = {} but there are {} modes (0-based)", c.mode0, spec.modes()));
                }
                positive("tol", c.tol)?;
                at_least_one("max_iter", c.max_iter)?;
                at_least_one("seeds", c.seeds)?;
                at_least_one("horizon", c.horizon)
            }
        }
    }
}

fn invalid(msg: &str) -> LabResult<()> {
    Err(LabError::Validation(msg.to_string()))
}

fn positive(name: &str, v: f64) -> LabResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        invalid(&format!("{name} must be positive, got {v}"))
    }
}

fn nonnegative(name: &str, v: f64) -> LabResult<()> {
    if v >= 0.0 && v.is_finite() {
        Ok(())
    } else {
        invalid(&format!("{name} must be nonnegative, got {v}"))
    }
}

fn at_least_one(name: &str, v: usize) -> LabResult<()> {
    if v >= 1 {
        Ok(())
    } else {
        invalid(&format!("{name} must be at least 1"))
    }
}

fn default_seed() -> u64 {
    DEFAULT_SEED
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParametricSweep {
    pub seed: u64,
    pub b: Grid,
    pub seeds: usize,
    pub horizon: usize,
    pub gain: f64,
    pub theta_mean: f64,
    pub noise_variance: f64,
    pub y0: f64,
    pub s0: f64,
    #[serde(rename = "loop")]
    pub loop_form: MvLoop,
    pub output: OutputSettings,
}

impl Default for ParametricSweep {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            b: Grid::Spec("1.5:6.0:0.5".into()),
            seeds: 200,
            horizon: 2000,
            gain: 1.0,
            theta_mean: 0.0,
            noise_variance: 1.0,
            y0: 0.0,
            s0: 1.0,
            loop_form: MvLoop::ErrorForm,
            output: OutputSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolyCheck {
    pub seed: u64,
    pub exponents: Vec<f64>,
    pub output: OutputSettings,
}

impl Default for PolyCheck {
    fn default() -> Self {
        Self { seed: default_seed(), exponents: vec![5.0], output: OutputSettings::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonparamDuel {
    pub seed: u64,
    pub slopes: Grid,
    pub noise_bound: f64,
    /// Random class members (and adversary seeds) per slope.
    pub members: usize,
    pub horizon: usize,
    pub adversary_horizon: usize,
    /// `|y|` counted as an escape.
    pub escape: f64,
    pub anchors: usize,
    pub span: f64,
    pub offset: f64,
    /// Switching threshold; `None` means `0.1·noise_bound`.
    pub eps: Option<f64>,
    pub output: OutputSettings,
}

impl Default for NonparamDuel {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            slopes: Grid::List(vec![2.0, 6.0]),
            noise_bound: 1.0,
            members: 100,
            horizon: 10_000,
            adversary_horizon: 500,
            escape: 1e6,
            anchors: 16,
            span: 10.0,
            offset: 1.0,
            eps: None,
            output: OutputSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HighorderCheck {
    pub seed: u64,
    pub orders: Vec<usize>,
    /// Radii to classify; empty means only the critical radius per order.
    pub slopes: Vec<f64>,
    pub output: OutputSettings,
}

impl Default for HighorderCheck {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            orders: vec![1, 2, 3, 4, 5],
            slopes: Vec::new(),
            output: OutputSettings::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Opponent {
    /// Random members of the function class.
    #[default]
    Random,
    /// The online adversary.
    Adversary,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SampledController {
    #[default]
    Heuristic,
    Zero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampledSweep {
    pub seed: u64,
    /// Slopes `L`; the regime depends on `L·period`.
    pub slopes: Grid,
    pub period: f64,
    pub offset: f64,
    pub x0: f64,
    pub horizon: usize,
    pub seeds: usize,
    pub opponent: Opponent,
    pub controller: SampledController,
    pub anchors: usize,
    pub span: f64,
    pub substeps: usize,
    /// Samples covered by the growth audit.
    pub audit_steps: usize,
    pub output: OutputSettings,
}

impl Default for SampledSweep {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            slopes: Grid::List(vec![0.5, 1.0, 2.0, 4.0, 8.0]),
            period: 1.0,
            offset: 1.0,
            x0: 0.0,
            horizon: 1000,
            seeds: 50,
            opponent: Opponent::Random,
            controller: SampledController::Heuristic,
            anchors: 12,
            span: 10.0,
            substeps: DEFAULT_SUBSTEPS,
            audit_steps: 12,
            output: OutputSettings::default(),
        }
    }
}

/// Jump system as written in a config file. Matrices are lists of rows;
/// modes are 0-based.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MjlsSystem {
    pub chain: Vec<Vec<f64>>,
    pub a: Vec<Vec<Vec<f64>>>,
    pub b: Vec<Vec<Vec<f64>>>,
    pub sigma_lo: f64,
    pub sigma_hi: f64,
}

impl Default for MjlsSystem {
    fn default() -> Self {
        Self::scalar_pair(0.0, 1.9, 0.5)
    }
}

fn matrix(name: &str, rows: &[Vec<f64>]) -> LabResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if r == 0 || c == 0 || rows.iter().any(|row| row.len() != c) {
        return Err(LabError::Validation(format!("{name} must be a nonempty rectangular list of rows")));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

impl MjlsSystem {
    /// Two scalar modes with `B = 1` and symmetric switching probability.
    pub fn scalar_pair(a1: f64, a2: f64, p12: f64) -> Self {
        Self {
            chain: vec![vec![1.0 - p12, p12], vec![p12, 1.0 - p12]],
            a: vec![vec![vec![a1]], vec![vec![a2]]],
            b: vec![vec![vec![1.0]], vec![vec![1.0]]],
            sigma_lo: 1.0,
            sigma_hi: 1.0,
        }
    }

    pub fn build(&self) -> LabResult<MjlsSpec> {
        let chain = MarkovChain::from_rows(&self.chain)?;
        let a = self
            .a
            .iter()
            .enumerate()
            .map(|(i, m)| matrix(&format!("a[{i}]"), m))
            .collect::<LabResult<Vec<_>>>()?;
        let b = self
            .b
            .iter()
            .enumerate()
            .map(|(i, m)| matrix(&format!("b[{i}]"), m))
            .collect::<LabResult<Vec<_>>>()?;
        let dim = a.first().map_or(0, |m| m.nrows());
        let noise = NoiseModel::MartingaleDiff { sigma_lo: self.sigma_lo, sigma_hi: self.sigma_hi, dim };
        Ok(MjlsSpec::new(chain, a, b, noise)?)
    }

    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
        toml::from_str(&text).map_err(|e| LabError::Validation(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MjlsSolve {
    pub seed: u64,
    pub system: MjlsSystem,
    pub tol: f64,
    pub max_iter: usize,
    /// Exit with status 3 when the solver cannot decide.
    pub strict: bool,
    pub output: OutputSettings,
}

impl Default for MjlsSolve {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            system: MjlsSystem::default(),
            tol: feedback_lab_core::riccati::DEFAULT_TOL,
            max_iter: feedback_lab_core::riccati::DEFAULT_MAX_ITER,
            strict: false,
            output: OutputSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MjlsRun {
    pub seed: u64,
    pub system: MjlsSystem,
    /// Defaults to all ones.
    pub x0: Option<Vec<f64>>,
    pub mode0: usize,
    pub horizon: usize,
    pub seeds: usize,
    pub selection: GainSelection,
    pub tol: f64,
    pub max_iter: usize,
    pub output: OutputSettings,
}

impl Default for MjlsRun {
    fn default() -> Self {
        Self {
            seed: default_seed(),
            system: MjlsSystem::default(),
            x0: None,
            mode0: 0,
            horizon: 2000,
            seeds: 100,
            selection: GainSelection::PreviousMode,
            tol: feedback_lab_core::riccati::DEFAULT_TOL,
            max_iter: feedback_lab_core::riccati::DEFAULT_MAX_ITER,
            output: OutputSettings::default(),
        }
    }
}
