//! The six subcommands. Each writes its result files into the output
//! directory and reports an [`Outcome`].

use std::fmt::Write as _;

use maglev_mpc::shooting::{sqp_solve, SolveStatus};
use maglev_mpc::simkit::{asymmetric_std, grid, l2_norm, mean, rcso, roa_point, run_closed_loop, std_dev, ControllerKind, Scenario, SimLog, Verdict};
use nalgebra::Vector3;

use crate::config::RunConfig;
use crate::output::{num, Table};
use crate::{par_map, CliError, Context, Exit, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Simulate,
    Roa,
    HorizonSweep,
    TuneSweep,
    Robustness,
    Suboptimality,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Roa => "roa",
            Command::HorizonSweep => "horizon-sweep",
            Command::TuneSweep => "tune-sweep",
            Command::Robustness => "robustness",
            Command::Suboptimality => "suboptimality",
        }
    }
}

pub fn run(command: Command, config: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    let config = config.resolved()?;
    match command {
        Command::Simulate => simulate(&config, ctx),
        Command::Roa => roa(&config, ctx),
        Command::HorizonSweep => horizon_sweep(&config, ctx),
        Command::TuneSweep => tune_sweep(&config, ctx),
        Command::Robustness => robustness(&config, ctx),
        Command::Suboptimality => suboptimality(&config, ctx),
    }
}

fn verdict_cells(log: &SimLog) -> [String; 2] {
    match log.verdict() {
        Verdict::Stable => ["stable".into(), String::new()],
        Verdict::Diverged(t) => ["diverged".into(), num(t)],
    }
}

fn flag(b: bool) -> String {
    if b { "1" } else { "0" }.into()
}

fn simulate(config: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    let sc = config.scenario()?;
    let log = run_closed_loop(&sc)?;

    let mut series = Table::new(
        &["t", "s", "zdd", "current", "u", "load_estimate", "d_gw", "status", "iterations", "solve_time"],
        &["solve_time"],
    );
    for k in 0..log.len() {
        series.push(vec![
            num(log.time[k]),
            num(log.s[k]),
            num(log.zdd[k]),
            num(log.current[k]),
            num(log.u[k]),
            num(log.load_estimate[k]),
            num(log.d_gw[k]),
            log.status[k].map(|s| s.as_str()).unwrap_or("").into(),
            log.iterations[k].to_string(),
            num(log.wall_time[k]),
        ]);
    }

    let err = log.gap_error();
    let mut summary = Table::new(
        &["controller", "verdict", "diverged_at", "mean_gap_error", "std_s", "std_zdd", "std_u", "l2_u", "solver_failures", "mean_solve_time", "max_solve_time"],
        &["mean_solve_time", "max_solve_time"],
    );
    let [verdict, at] = verdict_cells(&log);
    summary.push(vec![
        sc.controller.name().into(),
        verdict.clone(),
        at,
        num(mean(&err)),
        num(std_dev(&log.s)),
        num(std_dev(&log.zdd)),
        num(std_dev(&log.u)),
        num(l2_norm(&log.u)),
        log.solver_failures().to_string(),
        num(log.mean_wall_time()),
        num(log.max_wall_time()),
    ]);

    let files = vec![
        series.write(&ctx.out, "simulate.csv", "simulate", config)?,
        summary.write(&ctx.out, "simulate_summary.csv", "simulate", config)?,
    ];
    let exit = if !log.verdict().is_stable() {
        Exit::Diverged
    } else if log.solver_failures() > 0 {
        Exit::SolverFailure
    } else {
        Exit::Ok
    };
    let text = format!(
        "{}: {verdict} after {} samples, std(s) = {:.3e} m, std(u) = {:.3} V, {} solver failures, mean solve {:.1} us",
        sc.controller,
        log.len(),
        std_dev(&log.s),
        std_dev(&log.u),
        log.solver_failures(),
        1e6 * log.mean_wall_time()
    );
    Ok(Outcome { files, summary: text, exit })
}

fn roa(config: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    let base = config.scenario()?;
    let settings = config.roa_settings()?;
    let n: usize = config.parsed("roa.points")?;
    let ds = grid(config.parsed("roa.ds_min")?, config.parsed("roa.ds_max")?, n);
    let sdot = grid(config.parsed("roa.sdot_min")?, config.parsed("roa.sdot_max")?, n);
    let points: Vec<(f64, f64)> = ds.iter().flat_map(|&a| sdot.iter().map(move |&b| (a, b))).collect();

    let mut files = Vec::new();
    let mut results: Vec<(ControllerKind, Vec<bool>)> = Vec::new();
    for c in config.controllers("roa.controllers")? {
        let mut sc = base.clone();
        sc.controller = c;
        let ok = par_map(ctx.jobs, &points, |&(a, b)| Ok(roa_point(&sc, a, b, &settings)?))?;
        let mut t = Table::new(&["ds", "sdot", "controller", "stabilized"], &[]);
        for (&(a, b), &s) in points.iter().zip(&ok) {
            t.push(vec![num(a), num(b), c.name().into(), flag(s)]);
        }
        files.push(t.write(&ctx.out, &format!("roa_{}.csv", c.name()), "roa", config)?);
        results.push((c, ok));
    }

    let lqr = results.iter().find(|(c, _)| *c == ControllerKind::Lqr).map(|(_, r)| r.clone());
    let mut summary = Table::new(&["controller", "stabilized", "points", "lqr_points_lost"], &[]);
    let mut text = String::new();
    for (c, ok) in &results {
        let count = ok.iter().filter(|&&b| b).count();
        let lost = lqr.as_ref().map(|l| l.iter().zip(ok).filter(|(&a, &b)| a && !b).count());
        summary.push(vec![c.name().into(), count.to_string(), ok.len().to_string(), lost.map(|v| v.to_string()).unwrap_or_default()]);
        let _ = writeln!(text, "{c}: {count} of {} points stabilized", ok.len());
    }
    files.push(summary.write(&ctx.out, "roa_summary.csv", "roa", config)?);
    Ok(Outcome {
        files,
        summary: text.trim_end().into(),
        exit: Exit::Ok,
    })
}

/// Open-loop solution of one horizon-sweep point.
struct HorizonPoint {
    q_s: f64,
    horizon: f64,
    intervals: usize,
    status: SolveStatus,
    iterations: usize,
    controls: Vec<f64>,
    at_bound: bool,
    wall_time: f64,
}

fn horizon_sweep(config: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    let sc = config.scenario()?;
    let model = sc.control_model()?;
    let base = sc.ocp_config(&model);
    let interval = base.interval();
    let x0: Vec<f64> = config.list("horizon_sweep.x0")?;
    if x0.len() != 3 {
        return Err(CliError::Usage("`horizon_sweep.x0` needs three entries".into()));
    }
    let x0 = Vector3::new(x0[0], x0[1], x0[2]);
    let weights: Vec<f64> = config.list("horizon_sweep.q_s")?;
    let horizons: Vec<f64> = config.list("horizon_sweep.horizons")?;
    let cases: Vec<(f64, f64)> = weights.iter().flat_map(|&q| horizons.iter().map(move |&t| (q, t))).collect();

    let points = par_map(ctx.jobs, &cases, |&(q_s, horizon)| {
        let intervals = ((horizon / interval).round() as usize).max(1);
        let mut cfg = base.clone().with_horizon(horizon, intervals);
        cfg.q[0] = q_s;
        cfg.validate()?;
        let r = sqp_solve(&model, &cfg, &x0, None, &sc.sqp);
        let u0 = r.controls[0];
        let at_bound = (u0 - cfg.u_upper).abs() < 1e-9 || (u0 - cfg.u_lower).abs() < 1e-9;
        Ok(HorizonPoint {
            q_s,
            horizon,
            intervals,
            status: r.status,
            iterations: r.iterations,
            controls: r.controls,
            at_bound,
            wall_time: r.wall_time,
        })
    })?;

    let mut first = Table::new(
        &["q_s", "horizon", "intervals", "status", "iterations", "first_input", "first_input_volts", "first_input_change", "saturated", "solve_time"],
        &["solve_time"],
    );
    let mut traj = Table::new(&["q_s", "horizon", "t", "u"], &[]);
    let mut text = String::new();
    for (i, p) in points.iter().enumerate() {
        let prev = (i > 0 && points[i - 1].q_s == p.q_s).then(|| points[i - 1].controls[0]);
        let change = prev.map_or(f64::NAN, |v| (p.controls[0] - v).abs() / v.abs().max(1e-12));
        first.push(vec![
            num(p.q_s),
            num(p.horizon),
            p.intervals.to_string(),
            p.status.as_str().into(),
            p.iterations.to_string(),
            num(p.controls[0]),
            num(sc.scaling.unscale_input(p.controls[0])),
            num(change),
            flag(p.at_bound),
            num(p.wall_time),
        ]);
        let dt = p.horizon / p.intervals as f64;
        for (k, &u) in p.controls.iter().enumerate() {
            traj.push(vec![num(p.q_s), num(p.horizon), num(k as f64 * dt), num(u)]);
        }
        let _ = writeln!(text, "Q_s = {} T = {:.0} ms: u0 = {:.4} ({})", p.q_s, 1e3 * p.horizon, p.controls[0], p.status);
    }
    let files = vec![
        first.write(&ctx.out, "horizon_sweep.csv", "horizon-sweep", config)?,
        traj.write(&ctx.out, "horizon_trajectories.csv", "horizon-sweep", config)?,
    ];
    let exit = if points.iter().any(|p| matches!(p.status, SolveStatus::QpFailure | SolveStatus::DomainError)) {
        Exit::SolverFailure
    } else {
        Exit::Ok
    };
    Ok(Outcome {
        files,
        summary: text.trim_end().into(),
        exit,
    })
}

fn tune_sweep(config: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    let base = config.scenario()?;
    let q_s: Vec<f64> = config.list("tune_sweep.q_s")?;
    let q_zdd: Vec<f64> = config.list("tune_sweep.q_zdd")?;
    let cases: Vec<(f64, f64)> = q_s.iter().flat_map(|&a| q_zdd.iter().map(move |&b| (a, b))).collect();
    let logs = par_map(ctx.jobs, &cases, |&(a, b)| {
        let mut sc = base.clone();
        sc.ocp.q[0] = a;
        sc.ocp.q[1] = b;
        Ok(run_closed_loop(&sc)?)
    })?;
    let mut t = Table::new(
        &["q_s", "q_zdd", "q_i", "verdict", "diverged_at", "std_s", "std_zdd", "degenerate_weights", "mean_solve_time"],
        &["mean_solve_time"],
    );
    let mut unstable = 0;
    for (&(a, b), log) in cases.iter().zip(&logs) {
        let [verdict, at] = verdict_cells(log);
        unstable += usize::from(!log.verdict().is_stable());
        t.push(vec![
            num(a),
            num(b),
            num(base.ocp.q[2]),
            verdict,
            at,
            num(std_dev(&log.s)),
            num(std_dev(&log.zdd)),
            flag(a == 0.0 && b == 0.0),
            num(log.mean_wall_time()),
        ]);
    }
    let files = vec![t.write(&ctx.out, "tune_sweep.csv", "tune-sweep", config)?];
    Ok(Outcome {
        files,
        summary: format!("{} weight pairs, {unstable} unstable", cases.len()),
        exit: Exit::Ok,
    })
}

fn robustness(config: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    let mut base = config.scenario()?;
    base.duration = config.parsed("robustness.duration")?;
    let velocities: Vec<f64> = config.list("robustness.velocities")?;
    let controllers = config.controllers("robustness.controllers")?;
    let cases: Vec<(ControllerKind, f64)> = controllers.iter().flat_map(|&c| velocities.iter().map(move |&v| (c, v))).collect();
    let logs = par_map(ctx.jobs, &cases, |&(c, v)| {
        let mut sc = base.clone();
        sc.controller = c;
        sc.velocity = v;
        Ok(run_closed_loop(&sc)?)
    })?;
    let mut t = Table::new(
        &[
            "controller",
            "velocity",
            "verdict",
            "diverged_at",
            "mean_gap_error",
            "std_s",
            "std_s_above",
            "std_s_below",
            "std_u",
            "std_u_above",
            "std_u_below",
            "mean_solve_time",
            "max_solve_time",
        ],
        &["mean_solve_time", "max_solve_time"],
    );
    let mut text = String::new();
    for (&(c, v), log) in cases.iter().zip(&logs) {
        let [verdict, at] = verdict_cells(log);
        let (sa, sb) = asymmetric_std(&log.s, log.eq.s0);
        let (ua, ub) = asymmetric_std(&log.u, 0.0);
        let _ = writeln!(text, "{c} {v} km/h: {verdict}, std(u) = {:.2} V", std_dev(&log.u));
        t.push(vec![
            c.name().into(),
            num(v),
            verdict,
            at,
            num(mean(&log.gap_error())),
            num(std_dev(&log.s)),
            num(sa),
            num(sb),
            num(std_dev(&log.u)),
            num(ua),
            num(ub),
            num(log.mean_wall_time()),
            num(log.max_wall_time()),
        ]);
    }
    let files = vec![t.write(&ctx.out, "robustness.csv", "robustness", config)?];
    Ok(Outcome {
        files,
        summary: text.trim_end().into(),
        exit: Exit::Ok,
    })
}

/// Scenario for one solver configuration of the suboptimality study.
pub fn suboptimality_scenario(base: &Scenario, config: &RunConfig, controller: ControllerKind, horizon: f64, interval: f64) -> Result<Scenario, CliError> {
    let mut sc = base.clone();
    sc.controller = controller;
    sc.duration = config.parsed("suboptimality.duration")?;
    let intervals = ((horizon / interval).round() as usize).max(1);
    sc.ocp = sc.ocp.clone().with_horizon(horizon, intervals);
    sc.gpm = config.gpm_settings(controller, &sc)?;
    sc.validate()?;
    Ok(sc)
}

fn suboptimality(config: &RunConfig, ctx: &Context) -> Result<Outcome, CliError> {
    let base = config.scenario()?;
    let reference_sc = suboptimality_scenario(
        &base,
        config,
        ControllerKind::MpcShooting,
        config.parsed("suboptimality.reference_horizon")?,
        config.parsed("suboptimality.reference_interval")?,
    )?;
    let reference = run_closed_loop(&reference_sc)?;

    let solvers = config.controllers("suboptimality.solvers")?;
    let intervals: Vec<f64> = config.list("suboptimality.intervals")?;
    let horizons: Vec<f64> = config.list("suboptimality.horizons")?;
    let mut cases = Vec::new();
    for &c in &solvers {
        for &dn in &intervals {
            for &t in &horizons {
                cases.push((c, dn, t));
            }
        }
    }
    let runs = par_map(ctx.jobs, &cases, |&(c, dn, t)| {
        let sc = suboptimality_scenario(&base, config, c, t, dn)?;
        let log = run_closed_loop(&sc)?;
        Ok((sc.ocp.intervals, log))
    })?;

    let mut table = Table::new(
        &["solver", "horizon", "interval", "intervals", "verdict", "diverged_at", "l2_u", "rcso", "not_converged", "solver_failures", "mean_solve_time", "max_solve_time"],
        &["mean_solve_time", "max_solve_time"],
    );
    let q = reference_sc.ocp.q;
    let r = reference_sc.ocp.r;
    let scaling = reference_sc.scaling;
    let not_converged = |log: &SimLog| log.status.iter().filter(|s| matches!(s, Some(st) if *st != SolveStatus::Converged)).count();
    let mut push = |name: &str, horizon: f64, interval: f64, n: usize, log: &SimLog| -> Result<(), CliError> {
        let [verdict, at] = verdict_cells(log);
        // diverged runs are shorter than the reference; their rcso is undefined
        let value = rcso(log, &reference, &q, r, &scaling).unwrap_or(f64::NAN);
        table.push(vec![
            name.into(),
            num(horizon),
            num(interval),
            n.to_string(),
            verdict,
            at,
            num(l2_norm(&log.u)),
            num(value),
            not_converged(log).to_string(),
            log.solver_failures().to_string(),
            num(log.mean_wall_time()),
            num(log.max_wall_time()),
        ]);
        Ok(())
    };
    push("reference", reference_sc.ocp.horizon, reference_sc.ocp.interval(), reference_sc.ocp.intervals, &reference)?;
    let mut text = String::new();
    for (&(c, dn, t), (n, log)) in cases.iter().zip(&runs) {
        push(c.name(), t, dn, *n, log)?;
        let value = rcso(log, &reference, &q, r, &scaling).unwrap_or(f64::NAN);
        let _ = writeln!(text, "{c} T = {:.0} ms, dN = {:.0} ms: rcso {value:.4}, mean solve {:.1} us", 1e3 * t, 1e3 * dn, 1e6 * log.mean_wall_time());
    }
    let files = vec![table.write(&ctx.out, "suboptimality.csv", "suboptimality", config)?];
    Ok(Outcome {
        files,
        summary: text.trim_end().into(),
        exit: Exit::Ok,
    })
}
