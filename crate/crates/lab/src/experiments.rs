//! The experiments behind the subcommands. Each returns printable summary
//! lines and the tables to emit.

use feedback_lab_core::analysis::{
    characteristic_poly, highorder_critical_radius, highorder_impossible, parametric_regime,
    poly_impossible, sampled_regime, scalar_mjls_stabilizable, Regime, RegimeVerdict,
};
use feedback_lab_core::models::{MjlsSpec, NoiseModel, PowerGrowthFn, SampledSpec};
use feedback_lab_core::riccati::{solve_coupled_riccati, RiccatiOutcome};
use feedback_lab_core::sim::{
    growth_rate_audit, regret_logfit_range, ControllerSpec, EpisodeConfig, FunctionSource, Outcome,
    SystemSpec, Trajectory, REGRET_FIT_MAX_EXP, REGRET_FIT_MIN_EXP,
};
use nalgebra::DMatrix;

use crate::config::{
    ExperimentConfig, HighorderCheck, MjlsRun, MjlsSolve, NonparamDuel, Opponent, ParametricSweep,
    PolyCheck, SampledController, SampledSweep,
};
use crate::emit::{Cell, Table};
use crate::error::{LabError, LabResult};
use crate::parallel;

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub summary: Vec<String>,
    pub tables: Vec<Table>,
    /// The solver could not decide (only `mjls-solve`).
    pub indeterminate: bool,
}

impl Report {
    fn new(summary: Vec<String>, tables: Vec<Table>) -> Self {
        Self { summary, tables, indeterminate: false }
    }
}

pub fn run(cfg: &ExperimentConfig) -> LabResult<Report> {
    cfg.validate()?;
    let every = cfg.output().every;
    match cfg {
        ExperimentConfig::ParametricSweep(c) => parametric_sweep(c),
        ExperimentConfig::PolyCheck(c) => poly_check(c),
        ExperimentConfig::NonparamDuel(c) => nonparam_duel(c, every),
        ExperimentConfig::HighorderCheck(c) => highorder_check(c),
        ExperimentConfig::SampledSweep(c) => sampled_sweep(c),
        ExperimentConfig::MjlsSolve(c) => mjls_solve(c),
        ExperimentConfig::MjlsRun(c) => mjls_run(c, every),
    }
}

/// Six decimals with trailing zeros removed.
pub fn approx(v: f64) -> String {
    let s = format!("{v:.6}");
    let s = if s.contains('.') { s.trim_end_matches('0').trim_end_matches('.') } else { &s };
    if s == "-0" { "0".to_string() } else { s.to_string() }
}

fn regime_label(v: &RegimeVerdict) -> &'static str {
    match v.regime {
        Regime::Stabilizable => "stabilizable",
        Regime::Impossible => "impossible",
        Regime::Gap => "gap",
        Regime::NotTriggered => "not-triggered",
    }
}

fn parametric_sweep(c: &ParametricSweep) -> LabResult<Report> {
    let bs = c.b.values()?;
    let configs = bs
        .iter()
        .map(|&b| {
            Ok(EpisodeConfig {
                system: SystemSpec::Parametric {
                    f: PowerGrowthFn::new(c.gain, b)?,
                    theta: None,
                    theta_mean: c.theta_mean,
                    noise: NoiseModel::Gaussian { variance: c.noise_variance },
                    y0: c.y0,
                },
                controller: ControllerSpec::AdaptiveMv { s0: c.s0, theta0: None, form: c.loop_form },
                horizon: c.horizon,
            })
        })
        .collect::<LabResult<Vec<_>>>()?;
    let reports = parallel::monte_carlo_many(&configs, c.seed, c.seeds)?;

    let mut main = Table::new("parametric-sweep", &["b", "blowup_fraction", "mean_regret_slope"]);
    let mut detail = Table::new(
        "parametric-sweep-detail",
        &[
            "b",
            "regime",
            "seeds",
            "blowups",
            "inconclusive",
            "blowup_fraction",
            "blowup_half_width",
            "mean_regret_slope",
            "regret_r2",
            "sup_mean_sq",
        ],
    );
    let mut summary = Vec::new();
    for (&b, r) in bs.iter().zip(&reports) {
        let fit = regret_logfit_range(r, REGRET_FIT_MIN_EXP, REGRET_FIT_MAX_EXP).ok();
        let slope = fit.map_or(f64::NAN, |f| f.slope);
        let regime = parametric_regime(b)?;
        main.push(vec![b.into(), r.blowup_fraction.into(), slope.into()]);
        detail.push(vec![
            b.into(),
            regime_label(&regime).into(),
            r.seeds.into(),
            r.blowups.into(),
            r.inconclusive.into(),
            r.blowup_fraction.into(),
            r.blowup_half_width.into(),
            slope.into(),
            fit.map(|f| f.r2).into(),
            (if r.bounded > 0 { r.sup_mean_sq() } else { f64::NAN }).into(),
        ]);
        let fit_text = match fit {
            Some(f) => format!("regret slope {} (r² {})", approx(f.slope), approx(f.r2)),
            None => "regret slope n/a".to_string(),
        };
        summary.push(format!(
            "b={}  blowups {}/{} ({} ± {})  {}  [{}]",
            approx(b),
            r.blowups,
            r.seeds,
            approx(r.blowup_fraction),
            approx(r.blowup_half_width),
            fit_text,
            regime_label(&regime)
        ));
    }
    Ok(Report::new(summary, vec![main, detail]))
}

/// The one-line verdict of `poly-check`.
pub fn poly_verdict_line(exponents: &[f64]) -> LabResult<(String, RegimeVerdict)> {
    let poly = characteristic_poly(exponents)?;
    let v = poly_impossible(&poly, exponents[0]);
    let line = match (v.regime, v.witness, v.value) {
        (Regime::Impossible, Some(z), Some(p)) => {
            format!("IMPOSSIBLE, witness z≈{}, P(z)={}", approx(z), approx(p))
        }
        (_, Some(z), Some(p)) => format!("NOT TRIGGERED, min P(z)={} at z≈{}", approx(p), approx(z)),
        _ => format!("NOT TRIGGERED, interval (1, {}) is empty", approx(exponents[0])),
    };
    Ok((line, v))
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| approx(*v)).collect::<Vec<_>>().join(";")
}

fn poly_check(c: &PolyCheck) -> LabResult<Report> {
    let poly = characteristic_poly(&c.exponents)?;
    let (line, v) = poly_verdict_line(&c.exponents)?;
    let mut t = Table::new(
        "poly-check",
        &["exponents", "coefficients", "verdict", "witness", "value", "boundary"],
    );
    t.push(vec![
        join(&c.exponents).into(),
        join(poly.coeffs()).into(),
        regime_label(&v).into(),
        v.witness.into(),
        v.value.into(),
        v.boundary.into(),
    ]);
    Ok(Report::new(vec![line], vec![t]))
}

fn highorder_check(c: &HighorderCheck) -> LabResult<Report> {
    let mut t = Table::new(
        "highorder-check",
        &["order", "critical_radius", "slope", "margin", "verdict", "boundary"],
    );
    let mut summary = Vec::new();
    for &p in &c.orders {
        let radius = highorder_critical_radius(p)?;
        summary.push(format!("p={p}: critical radius {}", approx(radius)));
        let slopes = if c.slopes.is_empty() { vec![radius] } else { c.slopes.clone() };
        for l in slopes {
            let v = highorder_impossible(l, p)?;
            t.push(vec![
                p.into(),
                radius.into(),
                l.into(),
                v.value.into(),
                regime_label(&v).into(),
                v.boundary.into(),
            ]);
            if !c.slopes.is_empty() {
                summary.push(format!("  L={}: {}", approx(l), regime_label(&v)));
            }
        }
    }
    Ok(Report::new(summary, vec![t]))
}

fn median(mut v: Vec<usize>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_unstable();
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] as f64 } else { (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0 })
}

/// One row per kept step: prefix, `t`, optionally the mode, state, input
/// and the noise entering the next state.
fn trajectory_rows(table: &mut Table, prefix: &[Cell], traj: &Trajectory, every: usize, with_mode: bool) {
    for t in (0..=traj.steps()).step_by(every.max(1)) {
        let mut row = prefix.to_vec();
        row.push(t.into());
        if with_mode {
            row.push(traj.modes.get(t).copied().into());
        }
        row.extend(traj.state(t).iter().map(|&v| Cell::float(v)));
        if t < traj.steps() {
            row.extend(traj.input(t).iter().map(|&v| Cell::float(v)));
            row.extend(traj.noise(t).iter().map(|&v| Cell::float(v)));
        } else {
            row.extend((0..traj.input_dim + traj.dim).map(|_| Cell::Empty));
        }
        table.push(row);
    }
}

fn nonparam_duel(c: &NonparamDuel, every: usize) -> LabResult<Report> {
    let mut t = Table::new(
        "nonparam-duel",
        &["slope", "opponent", "regime", "episodes", "escaped", "median_escape_step", "max_abs_state"],
    );
    let mut traj_table = Table::new("nonparam-duel-trajectory", &["slope", "t", "y", "u", "w"]);
    let mut summary = Vec::new();
    let controller = ControllerSpec::Switching { eps: c.eps, reference: 0.0 };
    for l in c.slopes.values()? {
        let regime = highorder_impossible(l, 1)?;
        let random = EpisodeConfig {
            system: SystemSpec::Nonparametric {
                f: FunctionSource::Random { slope: l, anchors: c.anchors, span: c.span, offset: c.offset },
                noise: NoiseModel::BoundedRandom { bound: c.noise_bound },
                y0: 0.0,
            },
            controller: controller.clone(),
            horizon: c.horizon,
        };
        let adversary = EpisodeConfig {
            system: SystemSpec::Nonparametric {
                f: FunctionSource::Adversary { slope: l },
                noise: NoiseModel::BoundedAdversarial { bound: c.noise_bound },
                y0: 0.0,
            },
            controller: controller.clone(),
            horizon: c.adversary_horizon,
        };
        for (opponent, config) in [("random", &random), ("adversary", &adversary)] {
            let escape = c.escape;
            let results = parallel::map_episodes(config, c.seed, c.members, |i, traj, v| {
                let first = traj.states.iter().position(|y| y.abs() > escape);
                let first = first.or(matches!(v.outcome, Outcome::Blowup { .. }).then_some(traj.steps() + 1));
                let keep = (opponent == "adversary" && i == 0).then(|| traj.clone());
                (first, v.sup_abs_state, keep)
            })?;
            let steps: Vec<usize> = results.iter().filter_map(|r| r.0).collect();
            let max_abs = results.iter().fold(0.0f64, |a, r| a.max(r.1));
            t.push(vec![
                l.into(),
                opponent.into(),
                regime_label(&regime).into(),
                c.members.into(),
                steps.len().into(),
                median(steps.clone()).into(),
                max_abs.into(),
            ]);
            summary.push(format!(
                "L={} vs {opponent}: {}/{} past {} (median step {})  [{}]",
                approx(l),
                steps.len(),
                c.members,
                c.escape,
                median(steps).map_or("-".to_string(), approx),
                regime_label(&regime)
            ));
            if let Some(traj) = results.into_iter().find_map(|r| r.2) {
                trajectory_rows(&mut traj_table, &[l.into()], &traj, every, false);
            }
        }
    }
    Ok(Report::new(summary, vec![t, traj_table]))
}

fn sampled_sweep(c: &SampledSweep) -> LabResult<Report> {
    let mut t = Table::new(
        "sampled-sweep",
        &[
            "slope",
            "period",
            "lh",
            "regime",
            "controller",
            "opponent",
            "episodes",
            "bounded",
            "max_abs_state",
            "min_multiplier",
            "growth_bound",
        ],
    );
    let mut summary = Vec::new();
    let (controller, controller_name) = match c.controller {
        SampledController::Heuristic => (ControllerSpec::SampledHeuristic, "heuristic"),
        SampledController::Zero => (ControllerSpec::Zero, "zero"),
    };
    let opponent_name = match c.opponent {
        Opponent::Random => "random",
        Opponent::Adversary => "adversary",
    };
    for l in c.slopes.values()? {
        let spec = SampledSpec::with_substeps(l, c.offset, c.period, c.substeps)?;
        let regime = sampled_regime(l, c.period)?;
        let f = match c.opponent {
            Opponent::Random => FunctionSource::Random { slope: l, anchors: c.anchors, span: c.span, offset: c.offset },
            Opponent::Adversary => FunctionSource::Adversary { slope: l },
        };
        let config = EpisodeConfig {
            system: SystemSpec::Sampled { spec, f, x0: c.x0 },
            controller: controller.clone(),
            horizon: c.horizon,
        };
        let audit_steps = c.audit_steps;
        let results = parallel::map_episodes(&config, c.seed, c.seeds, |_, traj, v| {
            let audit = growth_rate_audit(traj, v);
            let min_mult = audit
                .multipliers
                .iter()
                .take(audit_steps)
                .map(|m| m.1)
                .fold(f64::INFINITY, f64::min);
            (v.outcome == Outcome::Bounded, v.sup_abs_state, (!audit.multipliers.is_empty()).then_some(min_mult))
        })?;
        let bounded = results.iter().filter(|r| r.0).count();
        let max_abs = results.iter().filter(|r| r.0).fold(f64::NAN, |a, r| if a.is_nan() { r.1 } else { a.max(r.1) });
        let min_mult = results.iter().filter_map(|r| r.2).reduce(f64::min);
        let lh = spec.slope_period();
        t.push(vec![
            l.into(),
            c.period.into(),
            lh.into(),
            regime_label(&regime).into(),
            controller_name.into(),
            opponent_name.into(),
            c.seeds.into(),
            bounded.into(),
            max_abs.into(),
            min_mult.into(),
            (lh / 2.0).into(),
        ]);
        summary.push(format!(
            "Lh={}: {bounded}/{} bounded{}  [{}]",
            approx(lh),
            c.seeds,
            min_mult.map_or(String::new(), |m| format!(", min growth multiplier {} (Lh/2 = {})", approx(m), approx(lh / 2.0))),
            regime_label(&regime)
        ));
    }
    Ok(Report::new(summary, vec![t]))
}

fn format_matrix(m: &DMatrix<f64>) -> String {
    let rows: Vec<String> = m
        .row_iter()
        .map(|r| format!("[{}]", r.iter().map(|v| approx(*v)).collect::<Vec<_>>().join(", ")))
        .collect();
    if rows.len() == 1 && m.ncols() == 1 {
        approx(m[(0, 0)])
    } else {
        format!("[{}]", rows.join(", "))
    }
}

/// `C·P` when the system is the scalar two-mode case with `B = 1` and a
/// symmetric chain.
fn closed_form_cp(spec: &MjlsSpec) -> Option<RegimeVerdict> {
    let scalar = spec.modes() == 2 && spec.state_dim() == 1 && spec.input_dim() == 1;
    if !scalar || spec.b(0)[(0, 0)] != 1.0 || spec.b(1)[(0, 0)] != 1.0 {
        return None;
    }
    let p12 = spec.chain().prob(0, 1);
    if (p12 - spec.chain().prob(1, 0)).abs() > 1e-12 {
        return None;
    }
    scalar_mjls_stabilizable(spec.a(0)[(0, 0)], spec.a(1)[(0, 0)], p12).ok()
}

fn mjls_solve(c: &MjlsSolve) -> LabResult<Report> {
    let spec = c.system.build()?;
    let outcome = solve_coupled_riccati(&spec, c.tol, c.max_iter)?;
    let cp = closed_form_cp(&spec);
    let mut verdict = Table::new(
        "mjls-solve",
        &["verdict", "iterations", "residual", "min_eigenvalue", "cp", "cp_verdict"],
    );
    let mut matrices = Table::new("mjls-solve-matrices", &["mode", "matrix", "row", "col", "value"]);
    let mut summary = Vec::new();
    let iterations = match &outcome {
        RiccatiOutcome::Solved(s) => s.iterations,
        RiccatiOutcome::NoSolution { iterations, .. } | RiccatiOutcome::Indeterminate { iterations, .. } => *iterations,
    };
    summary.push(format!("verdict: {} after {iterations} iterations", outcome.label()));
    if let Some(sol) = outcome.solution() {
        for (i, (m, k)) in sol.m.iter().zip(&sol.gains).enumerate() {
            summary.push(format!("M_{i} = {}", format_matrix(m)));
            summary.push(format!("K_{i} = {}", format_matrix(k)));
            for (name, mat) in [("M", m), ("K", k)] {
                for r in 0..mat.nrows() {
                    for col in 0..mat.ncols() {
                        matrices.push(vec![i.into(), name.into(), r.into(), col.into(), mat[(r, col)].into()]);
                    }
                }
            }
        }
        summary.push(format!("residual = {:.3e}", sol.residual));
    }
    if let RiccatiOutcome::NoSolution { norm, .. } = &outcome {
        summary.push(format!("iterates diverged (norm {norm:e})"));
    }
    if let Some(v) = &cp {
        summary.push(format!("closed form: C·P = {} -> {}", approx(v.value.unwrap_or(f64::NAN)), regime_label(v)));
    }
    let sol = outcome.solution();
    verdict.push(vec![
        outcome.label().into(),
        iterations.into(),
        sol.map(|s| s.residual).into(),
        sol.map(|s| s.min_eigenvalue()).into(),
        cp.and_then(|v| v.value).into(),
        cp.as_ref().map(regime_label).into(),
    ]);
    let mut report = Report::new(summary, vec![verdict, matrices]);
    report.indeterminate = matches!(outcome, RiccatiOutcome::Indeterminate { .. });
    Ok(report)
}

fn mjls_run(c: &MjlsRun, every: usize) -> LabResult<Report> {
    let spec = c.system.build()?;
    let outcome = solve_coupled_riccati(&spec, c.tol, c.max_iter)?;
    let Some(sol) = outcome.solution() else {
        return Err(LabError::Unsolvable(format!(
            "coupled Riccati equations: {}; no gains to run with",
            outcome.label()
        )));
    };
    let n = spec.state_dim();
    let x0 = c.x0.clone().unwrap_or_else(|| vec![1.0; n]);
    let config = EpisodeConfig {
        system: SystemSpec::Mjls { spec: spec.clone(), x0, mode0: c.mode0 },
        controller: ControllerSpec::Mjls { gains: sol.gains.clone(), selection: c.selection },
        horizon: c.horizon,
    };
    let report = parallel::monte_carlo(&config, c.seed, c.seeds)?;
    let mut curve = Table::new("mjls-run", &["t", "mean_sq", "half_width"]);
    for t in (0..report.mean_sq_curve.len()).step_by(every) {
        curve.push(vec![t.into(), report.mean_sq_curve[t].into(), report.mean_sq_half_width[t].into()]);
    }
    let (traj, _) = feedback_lab_core::sim::run_episode(&config, feedback_lab_core::sim::episode_seed(c.seed, 0))?;
    let mut columns: Vec<String> = vec!["t".into(), "mode".into()];
    columns.extend((0..n).map(|i| format!("x{i}")));
    columns.extend((0..spec.input_dim()).map(|i| format!("u{i}")));
    columns.extend((0..n).map(|i| format!("w{i}")));
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let mut traj_table = Table::new("mjls-run-trajectory", &cols);
    trajectory_rows(&mut traj_table, &[], &traj, every, true);
    let last = report.mean_sq_curve.last().copied().unwrap_or(f64::NAN);
    let summary = vec![
        format!("verdict: {} ({} iterations)", outcome.label(), sol.iterations),
        format!("blowups {}/{}", report.blowups, report.seeds),
        format!("sup_t mean ‖x_t‖² = {}, final = {}", approx(report.sup_mean_sq()), approx(last)),
    ];
    Ok(Report::new(summary, vec![curve, traj_table]))
}
