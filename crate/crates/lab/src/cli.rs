use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use feedback_lab_core::controllers::GainSelection;
use feedback_lab_core::sim::MvLoop;

use crate::config::{
    ExperimentConfig, Format, Grid, HighorderCheck, MjlsRun, MjlsSolve, MjlsSystem, NonparamDuel, Opponent,
    ParametricSweep, PolyCheck, SampledController, SampledSweep, SEED_ENV,
};
use crate::emit::{write_tables, Provenance};
use crate::error::{LabError, LabResult};
use crate::experiments;

#[derive(Debug, Parser)]
#[command(
    name = "feedback-lab",
    version,
    about = "Stabilizability oracles and closed-loop Monte Carlo for feedback under uncertainty",
    after_help = "Exit status: 0 success, 1 runtime or I/O error, 2 invalid configuration, \
                  3 undecided Riccati verdict under --strict.\n\
                  The master seed is taken from --seed, then $FEEDBACK_LAB_SEED, then the config file."
)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Experiment config (TOML). Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overwrite existing output files.
    #[arg(long, global = true)]
    pub force: bool,
    #[arg(long, global = true, value_enum)]
    pub format: Option<Format>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Leave out the generation timestamp so reruns are byte-identical.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    /// Keep every N-th row of trajectory tables.
    #[arg(long, global = true, value_name = "N")]
    pub every: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the experiment named in a config file.
    Run {
        #[arg(value_name = "FILE")]
        file: PathBuf,
    },
    /// Critical exponent theorem: blowup fraction and regret slope of
    /// least-squares minimum-variance control of y' = θ f(y) + u + w,
    /// f(y) ~ M|y|^b, across b. Stabilizable iff b < 4; regret O(log T).
    ParametricSweep(ParametricArgs),
    /// Characteristic polynomial criterion: impossible if P(z) < 0 for some
    /// z in (1, b_1), for y' = Σ θ_i y^{b_i} + u + w.
    PolyCheck(PolyArgs),
    /// Critical radius theorem: nearest-neighbour switching control against
    /// random Lipschitz functions and the greedy adversary. Feedback can
    /// cope with slope L iff L < 3/2 + √2.
    NonparamDuel(DuelArgs),
    /// High-order impossibility criterion: L + 1/2 ≥ (1 + 1/p)(pL)^{1/(p+1)}
    /// for p-th order nonparametric systems.
    HighorderCheck(HighorderArgs),
    /// Sampled-data regimes: stabilizable for Lh < ln 4, impossible for
    /// Lh > 7.53, with the adversary's growth audit against (Lh/2)^k.
    SampledSweep(SampledArgs),
    /// Coupled Riccati criterion for Markov jump linear systems with hidden
    /// modes: solves the coupled equations and prints M_i, K_i and the
    /// verdict; compares with C·P < 1 in the scalar two-mode case.
    MjlsSolve(MjlsSolveArgs),
    /// Runs the certainty-equivalence jump-system controller built from the
    /// coupled Riccati gains and reports the mean-square curve.
    MjlsRun(MjlsRunArgs),
}

fn parse_grid(s: &str) -> Result<Grid, String> {
    s.parse().map_err(|e: LabError| e.to_string())
}

fn parse_loop(s: &str) -> Result<MvLoop, String> {
    match s {
        "error-form" => Ok(MvLoop::ErrorForm),
        "black-box" => Ok(MvLoop::BlackBox),
        _ => Err("expected error-form or black-box".into()),
    }
}

fn parse_selection(s: &str) -> Result<GainSelection, String> {
    match s {
        "previous-mode" => Ok(GainSelection::PreviousMode),
        "predicted-argmax" => Ok(GainSelection::PredictedArgmax),
        _ => Err("expected previous-mode or predicted-argmax".into()),
    }
}

#[derive(Debug, Args)]
pub struct ParametricArgs {
    /// Exponents: start:stop:step or a comma list.
    #[arg(long, value_parser = parse_grid)]
    pub b: Option<Grid>,
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Horizon.
    #[arg(long = "T", value_name = "T")]
    pub horizon: Option<usize>,
    /// Asymptotic gain M.
    #[arg(long)]
    pub gain: Option<f64>,
    #[arg(long)]
    pub theta_mean: Option<f64>,
    #[arg(long)]
    pub noise_variance: Option<f64>,
    #[arg(long)]
    pub y0: Option<f64>,
    /// Prior information of the least-squares estimator.
    #[arg(long)]
    pub s0: Option<f64>,
    /// error-form or black-box.
    #[arg(long = "loop", value_parser = parse_loop)]
    pub loop_form: Option<MvLoop>,
}

#[derive(Debug, Args)]
pub struct PolyArgs {
    /// Strictly decreasing exponents b_1, …, b_p.
    #[arg(long, value_delimiter = ',')]
    pub exponents: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct DuelArgs {
    #[arg(long, value_parser = parse_grid)]
    pub slopes: Option<Grid>,
    #[arg(long)]
    pub noise_bound: Option<f64>,
    /// Episodes per slope and opponent.
    #[arg(long)]
    pub members: Option<usize>,
    /// Horizon against random functions.
    #[arg(long = "T", value_name = "T")]
    pub horizon: Option<usize>,
    /// Horizon against the adversary.
    #[arg(long = "adversary-T", value_name = "T")]
    pub adversary_horizon: Option<usize>,
    /// Magnitude counted as an escape.
    #[arg(long)]
    pub escape: Option<f64>,
    #[arg(long)]
    pub anchors: Option<usize>,
    #[arg(long)]
    pub span: Option<f64>,
    #[arg(long)]
    pub offset: Option<f64>,
    /// Switching threshold (default 0.1 × noise bound).
    #[arg(long)]
    pub eps: Option<f64>,
}

#[derive(Debug, Args)]
pub struct HighorderArgs {
    #[arg(long, value_delimiter = ',')]
    pub orders: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub slopes: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
pub struct SampledArgs {
    #[arg(long, value_parser = parse_grid)]
    pub slopes: Option<Grid>,
    /// Sampling period h.
    #[arg(long)]
    pub period: Option<f64>,
    /// Growth offset c in |f(x)| ≤ L|x| + c.
    #[arg(long)]
    pub offset: Option<f64>,
    #[arg(long)]
    pub x0: Option<f64>,
    /// Number of samples.
    #[arg(long = "T", value_name = "T")]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long, value_enum)]
    pub opponent: Option<Opponent>,
    #[arg(long, value_enum)]
    pub controller: Option<SampledController>,
    #[arg(long)]
    pub anchors: Option<usize>,
    #[arg(long)]
    pub span: Option<f64>,
    /// RK4 steps per sampling period.
    #[arg(long)]
    pub substeps: Option<usize>,
    #[arg(long)]
    pub audit_steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SystemArgs {
    /// Jump system file (TOML with chain, a, b, sigma_lo, sigma_hi).
    #[arg(long, value_name = "FILE", conflicts_with = "scalar")]
    pub spec: Option<PathBuf>,
    /// Scalar two-mode system with B = 1: A1,A2,P12.
    #[arg(long, value_delimiter = ',', num_args = 1, value_name = "A1,A2,P12")]
    pub scalar: Option<Vec<f64>>,
}

impl SystemArgs {
    fn system(&self) -> LabResult<Option<MjlsSystem>> {
        if let Some(path) = &self.spec {
            return MjlsSystem::load(path).map(Some);
        }
        match self.scalar.as_deref() {
            None => Ok(None),
            Some(&[a1, a2, p12]) => Ok(Some(MjlsSystem::scalar_pair(a1, a2, p12))),
            Some(_) => Err(LabError::Validation("--scalar takes exactly A1,A2,P12".into())),
        }
    }
}

#[derive(Debug, Args)]
pub struct MjlsSolveArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
    /// Exit with status 3 if the solver cannot decide.
    #[arg(long)]
    pub strict: bool,
}

#[derive(Debug, Args)]
pub struct MjlsRunArgs {
    #[command(flatten)]
    pub system: SystemArgs,
    #[arg(long, value_delimiter = ',')]
    pub x0: Option<Vec<f64>>,
    /// Initial mode (0-based).
    #[arg(long)]
    pub mode0: Option<usize>,
    #[arg(long = "T", value_name = "T")]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub seeds: Option<usize>,
    /// previous-mode or predicted-argmax.
    #[arg(long, value_parser = parse_selection)]
    pub selection: Option<GainSelection>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn base<T: Default>(file: Option<ExperimentConfig>, pick: fn(ExperimentConfig) -> Option<T>, name: &str) -> LabResult<T> {
    match file {
        None => Ok(T::default()),
        Some(cfg) => {
            let found = cfg.name();
            pick(cfg).ok_or_else(|| {
                LabError::Validation(format!("config describes {found}, but the subcommand is {name}"))
            })
        }
    }
}

/// Resolves file, flags and environment into one validated config.
pub fn resolve(cli: &Cli, seed_env: Option<&str>) -> LabResult<ExperimentConfig> {
    let file = match (&cli.command, &cli.global.config) {
        (Command::Run { file }, _) => Some(ExperimentConfig::load(file)?),
        (_, Some(path)) => Some(ExperimentConfig::load(path)?),
        _ => None,
    };
    let mut cfg = match &cli.command {
        Command::Run { .. } => file.expect("loaded above"),
        Command::ParametricSweep(a) => {
            let mut c: ParametricSweep = base(file, |c| match c {
                ExperimentConfig::ParametricSweep(c) => Some(c),
                _ => None,
            }, "parametric-sweep")?;
            set(&mut c.b, a.b.clone());
            set(&mut c.seeds, a.seeds);
            set(&mut c.horizon, a.horizon);
            set(&mut c.gain, a.gain);
            set(&mut c.theta_mean, a.theta_mean);
            set(&mut c.noise_variance, a.noise_variance);
            set(&mut c.y0, a.y0);
            set(&mut c.s0, a.s0);
            set(&mut c.loop_form, a.loop_form);
            ExperimentConfig::ParametricSweep(c)
        }
        Command::PolyCheck(a) => {
            let mut c: PolyCheck = base(file, |c| match c {
                ExperimentConfig::PolyCheck(c) => Some(c),
                _ => None,
            }, "poly-check")?;
            set(&mut c.exponents, a.exponents.clone());
            ExperimentConfig::PolyCheck(c)
        }
        Command::NonparamDuel(a) => {
            let mut c: NonparamDuel = base(file, |c| match c {
                ExperimentConfig::NonparamDuel(c) => Some(c),
                _ => None,
            }, "nonparam-duel")?;
            set(&mut c.slopes, a.slopes.clone());
            set(&mut c.noise_bound, a.noise_bound);
            set(&mut c.members, a.members);
            set(&mut c.horizon, a.horizon);
            set(&mut c.adversary_horizon, a.adversary_horizon);
            set(&mut c.escape, a.escape);
            set(&mut c.anchors, a.anchors);
            set(&mut c.span, a.span);
            set(&mut c.offset, a.offset);
            if a.eps.is_some() {
                c.eps = a.eps;
            }
            ExperimentConfig::NonparamDuel(c)
        }
        Command::HighorderCheck(a) => {
            let mut c: HighorderCheck = base(file, |c| match c {
                ExperimentConfig::HighorderCheck(c) => Some(c),
                _ => None,
            }, "highorder-check")?;
            set(&mut c.orders, a.orders.clone());
            set(&mut c.slopes, a.slopes.clone());
            ExperimentConfig::HighorderCheck(c)
        }
        Command::SampledSweep(a) => {
            let mut c: SampledSweep = base(file, |c| match c {
                ExperimentConfig::SampledSweep(c) => Some(c),
                _ => None,
            }, "sampled-sweep")?;
            set(&mut c.slopes, a.slopes.clone());
            set(&mut c.period, a.period);
            set(&mut c.offset, a.offset);
            set(&mut c.x0, a.x0);
            set(&mut c.horizon, a.horizon);
            set(&mut c.seeds, a.seeds);
            set(&mut c.opponent, a.opponent);
            set(&mut c.controller, a.controller);
            set(&mut c.anchors, a.anchors);
            set(&mut c.span, a.span);
            set(&mut c.substeps, a.substeps);
            set(&mut c.audit_steps, a.audit_steps);
            ExperimentConfig::SampledSweep(c)
        }
        Command::MjlsSolve(a) => {
            let mut c: MjlsSolve = base(file, |c| match c {
                ExperimentConfig::MjlsSolve(c) => Some(c),
                _ => None,
            }, "mjls-solve")?;
            set(&mut c.system, a.system.system()?);
            set(&mut c.tol, a.tol);
            set(&mut c.max_iter, a.max_iter);
            c.strict |= a.strict;
            ExperimentConfig::MjlsSolve(c)
        }
        Command::MjlsRun(a) => {
            let mut c: MjlsRun = base(file, |c| match c {
                ExperimentConfig::MjlsRun(c) => Some(c),
                _ => None,
            }, "mjls-run")?;
            set(&mut c.system, a.system.system()?);
            if a.x0.is_some() {
                c.x0 = a.x0.clone();
            }
            set(&mut c.mode0, a.mode0);
            set(&mut c.horizon, a.horizon);
            set(&mut c.seeds, a.seeds);
            set(&mut c.selection, a.selection);
            set(&mut c.tol, a.tol);
            set(&mut c.max_iter, a.max_iter);
            ExperimentConfig::MjlsRun(c)
        }
    };

    let env_seed = match seed_env {
        Some(s) => Some(
            s.trim()
                .parse::<u64>()
                .map_err(|_| LabError::Validation(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?,
        ),
        None => None,
    };
    let g = &cli.global;
    let (seed, out) = cfg.common_mut();
    set(seed, env_seed);
    set(seed, g.seed);
    set(&mut out.dir, g.out.clone());
    set(&mut out.format, g.format);
    set(&mut out.every, g.every);
    out.force |= g.force;
    if g.no_timestamp {
        out.timestamp = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs a resolved config: prints the summary, writes the tables and
/// returns the exit status.
pub fn execute(cfg: &ExperimentConfig) -> LabResult<i32> {
    let report = experiments::run(cfg)?;
    let mut stdout = std::io::stdout().lock();
    for line in &report.summary {
        match writeln!(stdout, "{line}") {
            Ok(()) => {}
            // a closed pipe (`| head`) still gets its tables written
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => break,
            Err(e) => return Err(LabError::io("<stdout>", e)),
        }
    }
    drop(stdout);
    let out = cfg.output();
    let prov = Provenance::new(cfg.name(), cfg.seed(), out.timestamp);
    for path in write_tables(&out.dir, &report.tables, &prov, out.format, out.force)? {
        eprintln!("wrote {}", path.display());
    }
    let strict = matches!(cfg, ExperimentConfig::MjlsSolve(c) if c.strict);
    Ok(if strict && report.indeterminate { 3 } else { 0 })
}

/// Entry point shared by the binary and the tests.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let seed_env = std::env::var(SEED_ENV).ok();
    match resolve(&cli, seed_env.as_deref()).and_then(|cfg| execute(&cfg)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
