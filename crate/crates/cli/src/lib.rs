//! Batch driver for the `goursat` solvers. One TOML config describes one
//! run; results go to an output directory as CSV fields, a JSON report and
//! a manifest.

pub mod checks;
pub mod config;
mod output;
mod tsunami;

use std::path::PathBuf;
use std::time::Instant;

use serde_json::json;
use thiserror::Error;

use goursat::adjoint::VrMode;
use goursat::forward::{residual_csv, solve_state};
use goursat::geometry::{build_domain, Domain, NodeKind};
use goursat::optimize::{check_extremum, cost, evaluate, projected_gradient};
use goursat::problem::ProblemSpec;

pub use config::{Command, Overrides, RunConfig};
pub use output::Output;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Solver(goursat::Error),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<goursat::Error> for CliError {
    fn from(e: goursat::Error) -> Self {
        use goursat::Error as E;
        match e {
            E::ConfigInvalid(m) => CliError::Config(m),
            E::DepthNonPositive(_) | E::CompatibilityViolated(_) | E::NonMonotoneBoundary(_) | E::DisconnectedCurve(_) => {
                CliError::Config(e.to_string())
            }
            e => CliError::Solver(e),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Solver(_) | CliError::Io(_) => 3,
        }
    }
}

/// What a run wrote and whether its check passed.
#[derive(Debug)]
pub struct Outcome {
    pub command: Command,
    pub pass: bool,
    pub out_dir: PathBuf,
    pub files: Vec<String>,
    pub report: serde_json::Value,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            1
        }
    }
}

/// Validates, dispatches and writes every artifact including the manifest.
pub fn run(cfg: &RunConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    let command = cfg.command()?;
    let started = Instant::now();
    let out_dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out").join(command.name()));
    let mut out = Output::new(&out_dir, cfg.seed)?;
    let (pass, report) = match command {
        Command::Forward => forward(cfg, &mut out)?,
        Command::AdjointCheck => adjoint_check(cfg, &mut out)?,
        Command::GradientCheck => gradient_check(cfg, &mut out)?,
        Command::Optimize => optimize(cfg, &mut out)?,
        Command::TsunamiTwin | Command::TsunamiInvert => tsunami::run(cfg, command, &mut out)?,
    };
    let mut report = report;
    report["command"] = json!(command.name());
    report["seed"] = json!(cfg.seed);
    report["pass"] = json!(pass);
    out.json("report.json", &report)?;
    out.manifest(cfg, started.elapsed().as_secs_f64())?;
    Ok(Outcome { command, pass, out_dir, files: out.files().to_vec(), report })
}

struct Setup {
    dom: Domain,
    spec: ProblemSpec,
    u: Vec<f64>,
}

fn setup(cfg: &RunConfig) -> Result<Setup, CliError> {
    let spec = cfg.problem.as_ref().expect("validated").build()?;
    let (curves, vertices) = cfg.domain.as_ref().expect("validated").curves();
    let dom = build_domain(&curves, &vertices, cfg.grid.as_ref().expect("validated"))?;
    let c = &cfg.control;
    let u = checks::field(&dom, spec.m(), |s, t, _| c.value + c.s_slope * s + c.t_slope * t);
    Ok(Setup { dom, spec, u })
}

fn kind_name(k: NodeKind) -> &'static str {
    match k {
        NodeKind::Inside => "inside",
        NodeKind::OnArc => "on_arc",
        NodeKind::OnFlat => "on_flat",
        NodeKind::Outside => "outside",
    }
}

fn forward(cfg: &RunConfig, out: &mut Output) -> Result<(bool, serde_json::Value), CliError> {
    let Setup { dom, spec, u } = setup(cfg)?;
    let st = solve_state(&dom, &spec, &u, cfg.tolerances.state, cfg.tolerances.max_iter)?;
    let n = spec.n();
    let mut header = vec!["s".to_string(), "t".into(), "kind".into()];
    for prefix in ["x", "x_s", "x_t"] {
        header.extend((0..n).map(|k| format!("{prefix}{k}")));
    }
    let g = &dom.grid;
    let rows = (0..g.len()).filter(|&k| g.mask[k].in_domain()).map(|k| {
        let [s, t] = g.point(k);
        let mut row = vec![output::num(s), output::num(t), kind_name(g.mask[k]).to_string()];
        for f in [&st.x, &st.x_s, &st.x_t] {
            row.extend(f[k * n..(k + 1) * n].iter().map(|v| output::num(*v)));
        }
        row
    });
    out.csv_rows("state.csv", &header, rows)?;
    out.text_csv("residuals.csv", &residual_csv(&st.residual_history))?;
    let c = cost(&dom, &spec, &st, &u);
    let report = json!({
        "problem": spec.name,
        "h": g.h_actual(),
        "nodes": g.mask.iter().filter(|k| k.in_domain()).count(),
        "iterations": st.iterations,
        "rho": st.rho,
        "final_residual": st.residual_history.last().map(|r| r.sup),
        "cost": c,
    });
    Ok((true, report))
}

fn adjoint_check(cfg: &RunConfig, out: &mut Output) -> Result<(bool, serde_json::Value), CliError> {
    let Setup { dom, spec, u } = setup(cfg)?;
    let ac = &cfg.adjoint_check;
    let (rep, csv) = checks::adjoint_check(&dom, &spec, &u, ac.checkpoints, cfg.seed, ac.rel_tol)?;
    out.text_csv("costate.csv", &csv)?;
    let pass = rep.pass;
    let mut report = serde_json::to_value(&rep).expect("report serializes");
    report["problem"] = json!(spec.name);
    report["h"] = json!(dom.grid.h_actual());
    Ok((pass, report))
}

fn gradient_check(cfg: &RunConfig, out: &mut Output) -> Result<(bool, serde_json::Value), CliError> {
    let Setup { dom, spec, u } = setup(cfg)?;
    let gc = &cfg.gradient_check;
    let rep = checks::gradient_check(&dom, &spec, &u, gc.directions, gc.eps, cfg.seed, gc.rel_tol)?;
    let header = ["seed", "adjoint", "finite_difference", "rel_gap"].map(String::from);
    let rows = rep.directions.iter().map(|d| vec![d.seed.to_string(), output::num(d.adjoint), output::num(d.finite_difference), output::num(d.rel_gap)]);
    out.csv_rows("directions.csv", &header, rows)?;
    let pass = rep.pass;
    let mut report = serde_json::to_value(&rep).expect("report serializes");
    report["problem"] = json!(spec.name);
    report["h"] = json!(dom.grid.h_actual());
    Ok((pass, report))
}

fn optimize(cfg: &RunConfig, out: &mut Output) -> Result<(bool, serde_json::Value), CliError> {
    let Setup { dom, spec, u } = setup(cfg)?;
    let oc = &cfg.optimize;
    let bounds = spec.bounds.clone();
    let mut u0 = u;
    bounds.project(&mut u0);
    let mut tr = projected_gradient(&dom, &spec, &u0, &bounds, &oc.solver)?;
    out.text_csv("trace.csv", &tr.to_csv())?;
    let m = spec.m();
    let g = &dom.grid;
    let mut header = vec!["s".to_string(), "t".into()];
    header.extend((0..m).map(|k| format!("u{k}")));
    let rows = (0..g.len()).filter(|&k| g.mask[k].in_domain()).map(|k| {
        let [s, t] = g.point(k);
        let mut row = vec![output::num(s), output::num(t)];
        row.extend(tr.control[k * m..(k + 1) * m].iter().map(|v| output::num(*v)));
        row
    });
    out.csv_rows("control.csv", &header, rows)?;
    let ev = evaluate(&dom, &spec, &tr.control, VrMode::default())?;
    let ext = check_extremum(&dom, &spec, &ev.state, &ev.costate, &tr.control, &bounds, oc.extremum_samples, oc.extremum_lattice, oc.extremum_rel_tol, cfg.seed)?;
    let pass = tr.converged && ext.violations.is_empty();
    tr.extremum = Some(ext);
    let report = json!({
        "problem": spec.name,
        "h": g.h_actual(),
        "cost": ev.cost,
        "trace": tr,
    });
    Ok((pass, report))
}
