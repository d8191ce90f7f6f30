use std::path::Path;

use dissnet::analysis::{analyze, estimate_indices, AnalysisOptions, IndexMode};
use dissnet::decentralized::{decentralized_analyze_nsc1, decentralized_general, DecentralizedOptions, GeneralMode, Session};
use dissnet::linalg::DenseMatrix;
use dissnet::lti_sim::{builtin_study, decay_metric, decay_metric_of, feedback_gain_demo, simulate, ClosedLoop, TimeSeries};
use dissnet::nsc::{template_mask, ColGroup, InterconnectionMatrix, NscProblem, RowGroup, StructureTemplate, TemplateName, TopologyMode, Variant};
use dissnet::sdp::SolveOptions;
use dissnet::synthesis::{synthesize, SynthesisObjective, SynthesisOptions, SynthesisRequest, SynthesisResult};
use serde_json::json;

use crate::config::{Config, ObjectiveConfig, SolverConfig};
use crate::report::{Report, Status};
use crate::{Cli, CliError, Command, ModeArg, ObjectiveArg, Study};

/// Relative tolerance when the index found by synthesis is re-estimated on the returned `M`.
const INDEX_AGREEMENT: f64 = 0.05;

pub fn run(cli: &Cli) -> Result<Report, CliError> {
    match &cli.command {
        Command::Demo { study } => demo(cli, *study),
        command => {
            let path = cli
                .config
                .as_deref()
                .ok_or_else(|| CliError::Usage("this command needs --config PATH".into()))?;
            let cfg = Config::load(path)?;
            let problem = cfg.problem(cli.mode.map(topology_mode))?;
            match command {
                Command::Analyze => run_analyze(cli, &cfg, &problem),
                Command::Synthesize => run_synthesize(cli, &cfg, &problem),
                Command::Estimate => run_estimate(cli, &cfg, &problem),
                Command::Decentralized => run_decentralized(cli, &cfg, &problem),
                Command::Simulate => run_simulate(cli, &cfg, &problem),
                Command::Demo { .. } => unreachable!(),
            }
        }
    }
}

fn topology_mode(m: ModeArg) -> TopologyMode {
    match m {
        ModeArg::Hard => TopologyMode::Hard,
        ModeArg::Soft => TopologyMode::Soft,
        ModeArg::Both => TopologyMode::Both,
    }
}

fn solver_options(s: &SolverConfig) -> SolveOptions {
    let d = SolveOptions::default();
    SolveOptions {
        tolerance: s.tolerance.unwrap_or(d.tolerance),
        max_iterations: s.max_iterations.unwrap_or(d.max_iterations),
        ..d
    }
}

fn analysis_options(cli: &Cli, s: &SolverConfig) -> AnalysisOptions {
    let d = AnalysisOptions::default();
    AnalysisOptions {
        margin: cli.margin.or(s.margin),
        p_min: s.p_min.unwrap_or(d.p_min),
        solver: solver_options(s),
        ..d
    }
}

fn synthesis_options(cli: &Cli, s: &SolverConfig) -> SynthesisOptions {
    let d = SynthesisOptions::default();
    SynthesisOptions {
        margin: cli.margin.or(s.margin),
        p_min: s.p_min.unwrap_or(d.p_min),
        alpha: s.alpha,
        solver: solver_options(s),
        ..d
    }
}

fn objective(cli: &Cli, cfg: Option<ObjectiveConfig>) -> SynthesisObjective {
    match (cli.objective, cfg) {
        (Some(ObjectiveArg::Feasible), _) => SynthesisObjective::Feasible,
        (Some(ObjectiveArg::MaxPassivity), Some(ObjectiveConfig::MaxPassivity { c1, c2 })) => SynthesisObjective::MaxPassivity { c1, c2 },
        (Some(ObjectiveArg::MaxPassivity), _) => SynthesisObjective::MaxPassivity { c1: 1.0, c2: 1.0 },
        (Some(ObjectiveArg::MinL2gain), _) => SynthesisObjective::MinL2Gain,
        (None, Some(ObjectiveConfig::Feasible) | None) => SynthesisObjective::Feasible,
        (None, Some(ObjectiveConfig::MaxPassivity { c1, c2 })) => SynthesisObjective::MaxPassivity { c1, c2 },
        (None, Some(ObjectiveConfig::MinL2gain)) => SynthesisObjective::MinL2Gain,
        (None, Some(ObjectiveConfig::SoftTopologyCost)) => SynthesisObjective::SoftTopologyCost,
    }
}

fn index_mode(objective: SynthesisObjective) -> IndexMode {
    match objective {
        SynthesisObjective::MinL2Gain => IndexMode::MinL2Gain,
        SynthesisObjective::MaxPassivity { c1, c2 } => IndexMode::MaxPassivity { c1, c2 },
        _ => IndexMode::MaxPassivity { c1: 1.0, c2: 1.0 },
    }
}

fn require_interconnection(cfg: &Config, problem: &NscProblem) -> Result<InterconnectionMatrix, CliError> {
    cfg.interconnection(problem)?
        .ok_or_else(|| CliError::Config("this command needs an `interconnection` section".into()))
}

fn run_analyze(cli: &Cli, cfg: &Config, problem: &NscProblem) -> Result<Report, CliError> {
    let m = require_interconnection(cfg, problem)?;
    let r = analyze(problem, &m, &analysis_options(cli, &cfg.solver))?;
    let mut report = Report::new(Status::certified(r.certified()))
        .with("path", r.path)
        .with("achieved_margin", finite(r.achieved_margin))
        .with("required_margin", r.required_margin);
    report.p = r.p;
    report.pbar = r.pbar;
    report.m = Some(m);
    Ok(report)
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

fn template(name: Option<TemplateName>, problem: &NscProblem) -> Result<StructureTemplate, CliError> {
    Ok(match name {
        Some(n) => template_mask(n, problem.variant, &problem.layout())?,
        None => StructureTemplate::free(),
    })
}

fn synthesis_report(r: SynthesisResult) -> Report {
    let ok = r.is_success() && r.verified();
    let mut report = Report::new(Status::feasible(ok))
        .with("verified", r.verification.as_ref().map(|v| v.certified()))
        .with("achieved_margin", finite(r.achieved_margin))
        .with("alpha", r.alpha)
        .with("soft_cost", r.soft_cost)
        .with("message", &r.message);
    report.indices = r.indices;
    report.p = r.p;
    report.pbar = r.pbar;
    report.m = r.m;
    report
}

fn run_synthesize(cli: &Cli, cfg: &Config, problem: &NscProblem) -> Result<Report, CliError> {
    let request = SynthesisRequest::new(problem.clone())
        .with_template(template(cfg.template, problem)?)
        .with_objective(objective(cli, cfg.objective))
        .with_options(synthesis_options(cli, &cfg.solver));
    Ok(synthesis_report(synthesize(&request)?))
}

fn run_estimate(cli: &Cli, cfg: &Config, problem: &NscProblem) -> Result<Report, CliError> {
    let m = require_interconnection(cfg, problem)?;
    let mode = index_mode(objective(cli, cfg.objective));
    let (indices, r) = estimate_indices(problem, &m, mode, &analysis_options(cli, &cfg.solver))?;
    let mut report = Report::new(Status::certified(r.certified())).with("path", r.path);
    report.indices = indices;
    report.p = r.p;
    report.pbar = r.pbar;
    report.m = Some(m);
    Ok(report)
}

fn session_report(session: Session, status: Status) -> Report {
    let mut report = Report::new(status).with("failed_at", session.failed_at);
    report.p = session.p;
    report.pbar = session.pbar;
    report.m = session.interconnection;
    report.steps = session.log;
    report
}

fn run_decentralized(cli: &Cli, cfg: &Config, problem: &NscProblem) -> Result<Report, CliError> {
    let d = DecentralizedOptions::default();
    let opts = DecentralizedOptions {
        margin: cli.margin.or(cfg.solver.margin),
        p_min: cfg.solver.p_min.unwrap_or(d.p_min),
        solver: solver_options(&cfg.solver),
        ..d
    };
    let given = cfg.interconnection(problem)?;
    let session = match (&given, problem.variant) {
        (Some(m), Variant::Nsc1) => decentralized_analyze_nsc1(problem, &m.block(RowGroup::Input, ColGroup::Output), &opts)?,
        _ => decentralized_general(
            problem,
            GeneralMode::Enforce {
                interconnection: given.clone(),
            },
            &opts,
        )?,
    };
    let passed = session.passed();
    let status = if given.is_some() {
        Status::certified(passed)
    } else {
        Status::feasible(passed)
    };
    let mut report = session_report(session, status);
    if report.m.is_none() {
        report.m = given;
    }
    Ok(report)
}

fn write_csv(path: Option<&Path>, ts: &TimeSeries) -> Result<(), CliError> {
    if let Some(p) = path {
        std::fs::write(p, ts.to_csv()).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn timed(cli: &Cli, lp: ClosedLoop, dt: Option<f64>, horizon: Option<f64>) -> ClosedLoop {
    let (dt, horizon) = (cli.dt.or(dt).unwrap_or(lp.dt), cli.horizon.or(horizon).unwrap_or(lp.horizon));
    lp.with_timing(dt, horizon)
}

fn run_simulate(cli: &Cli, cfg: &Config, problem: &NscProblem) -> Result<Report, CliError> {
    let sim = cfg
        .simulation
        .as_ref()
        .ok_or_else(|| CliError::Config("this command needs a `simulation` section".into()))?;
    let m = require_interconnection(cfg, problem)?;
    let controllers = sim.controllers.iter().map(|c| c.system()).collect::<Result<Vec<_>, _>>()?;
    let plants = sim.plants.iter().map(|c| c.system()).collect::<Result<Vec<_>, _>>()?;
    let lp = timed(cli, ClosedLoop::new(controllers, plants, m.clone()), sim.dt, sim.horizon);
    let ts = simulate(&lp)?;
    write_csv(cli.out.as_deref(), &ts)?;
    let decay = decay_metric(&ts)?;
    let mut report = Report::new(Status::decayed(decay.decayed))
        .with("decay_ratio", decay.ratio)
        .with("diverged", ts.diverged);
    report.m = Some(m);
    Ok(report)
}

fn demo(cli: &Cli, study: Study) -> Result<Report, CliError> {
    let s = builtin_study();
    let mode = topology_mode(cli.mode.unwrap_or(ModeArg::Hard));
    let options = synthesis_options(cli, &SolverConfig::default());
    let analysis = analysis_options(cli, &SolverConfig::default());
    let problem = match study {
        Study::Nsc1 => s.nsc1(mode),
        Study::Nsc2 => s.nsc2(None, mode),
        Study::Nsc3 => s.nsc3(mode),
        Study::Nsc4 => s.nsc4(None, mode),
    };
    let default_objective = match study {
        Study::Nsc2 => SynthesisObjective::MaxPassivity { c1: 1.0, c2: 1.0 },
        Study::Nsc4 => SynthesisObjective::MinL2Gain,
        _ if mode.is_soft() => SynthesisObjective::SoftTopologyCost,
        _ => SynthesisObjective::Feasible,
    };
    let objective = if cli.objective.is_some() { objective(cli, None) } else { default_objective };
    let tmpl = match study {
        Study::Nsc4 => template_mask(TemplateName::ApproximateSimulation, Variant::Nsc4, &problem.layout())?,
        _ => StructureTemplate::free(),
    };
    let request = SynthesisRequest::new(problem.clone())
        .with_template(tmpl)
        .with_objective(objective)
        .with_options(options);
    let result = synthesize(&request)?;
    let mut report = synthesis_report(result.clone());
    let Some(m) = result.m.clone().filter(|_| result.is_success()) else {
        report.status = Status::Infeasible;
        return Ok(report);
    };

    // Every demo re-checks its interconnection through the analysis path.
    let index_check = matches!(objective, SynthesisObjective::MaxPassivity { .. } | SynthesisObjective::MinL2Gain);
    let recheck_ok = if index_check {
        let (est, r) = estimate_indices(&problem, &m, index_mode(objective), &analysis)?;
        let agrees = match objective {
            SynthesisObjective::MinL2Gain => close(est.gamma, result.indices.gamma),
            _ => close(est.rho, result.indices.rho) || est.rho.zip(result.indices.rho).is_some_and(|(a, b)| a >= b),
        };
        report = report.with("reverified_indices", json!({"nu": est.nu, "rho": est.rho, "gamma": est.gamma}));
        r.certified() && agrees
    } else {
        analyze(&problem, &m, &analysis)?.certified()
    };
    report = report.with("reverified", recheck_ok);

    let lp = timed(cli, s.closed_loop(m.clone()), None, None);
    let decayed = match study {
        Study::Nsc1 => {
            let ts = simulate(&lp)?;
            write_csv(cli.out.as_deref(), &ts)?;
            let d = decay_metric(&ts)?;
            let mut baseline = lp.clone();
            baseline.m = InterconnectionMatrix::from_full(Variant::Nsc1, problem.layout(), DenseMatrix::identity(s.agents(), s.agents()))?;
            let b = simulate(&baseline)?;
            report = report
                .with("decay_ratio", d.ratio)
                .with("identity_interconnection_diverged", b.diverged);
            d.decayed
        }
        Study::Nsc2 => {
            let rho = result.indices.rho.unwrap_or(f64::NAN);
            let stable = feedback_gain_demo(&lp, -rho + 1.0)?;
            let unstable = feedback_gain_demo(&lp, -rho - 1.0)?;
            write_csv(cli.out.as_deref(), &stable)?;
            let d = decay_metric_of(&stable, "z")?;
            report = report
                .with("feedback_inside_ratio", d.ratio)
                .with("feedback_outside_diverged", unstable.diverged);
            d.decayed
        }
        Study::Nsc3 | Study::Nsc4 => {
            let ts = simulate(&lp)?;
            write_csv(cli.out.as_deref(), &ts)?;
            let y = decay_metric_of(&ts, "y")?;
            let ybar = decay_metric_of(&ts, "ybar")?;
            report = report.with("decay_ratio_y", y.ratio).with("decay_ratio_ybar", ybar.ratio);
            y.decayed && ybar.decayed
        }
    };
    report.status = Status::decayed(recheck_ok && decayed);
    Ok(report)
}

fn close(a: Option<f64>, b: Option<f64>) -> bool {
    a.zip(b).is_some_and(|(a, b)| (a - b).abs() <= INDEX_AGREEMENT * b.abs().max(1e-12))
}
