//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! fails. Pass criterion numbers as arguments to run a subset.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use goursat::adjoint::{flat_with, jump_with, pde_residual_single_valued, sweep_with, verify_hamiltonian_pde, CostateInputs, VertexLine, VrMode};
use goursat::forward::{contraction_bound, picard_solve, solve_state, Block, Direction, Linearization, PicardOptions, VolterraSystem};
use goursat::geometry::{build_domain, shapes, CurveSpec, Domain, GridOptions, Point};
use goursat::optimize::{check_extremum, evaluate, needle_increment, needle_refinement, projected_gradient, PgOptions};
use goursat::problem::{builtin, ControlBox, ProblemSpec, QuadraticFamily};
use goursat::riemann::{node_at, riemann_adjoint, riemann_forward};
use goursat_cli::checks::{adjoint_check_at, field, gradient_check, regular_checkpoints};
use goursat_cli::{run, RunConfig};

type Verdict = Result<(bool, String), String>;

fn dom_of(shape: &[CurveSpec], h: f64) -> Result<Domain, String> {
    build_domain(shape, &[], &GridOptions::uniform(h)).map_err(|e| e.to_string())
}

fn family(q: QuadraticFamily) -> ProblemSpec {
    q.build("acceptance").expect("valid family")
}

/// `Σ_{k<30} c^k z^k / (k!)^2`
fn series(z: f64, c: f64) -> f64 {
    let (mut term, mut sum) = (1.0, 1.0);
    for k in 1..30 {
        term *= c * z / (k as f64 * k as f64);
        sum += term;
    }
    sum
}

fn affine_control(dom: &Domain, m: usize) -> Vec<f64> {
    field(dom, m, |s, t, _| 0.1 + 0.3 * s - 0.2 * t)
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scratch(name: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("goursat-acceptance-{}-{name}", std::process::id()));
    let _ = std::fs::remove_dir_all(&d);
    d
}

fn e<T: std::fmt::Display>(x: T) -> String {
    x.to_string()
}

// 1
fn forward_order() -> Verdict {
    let err = |h: f64| -> Result<f64, String> {
        let dom = dom_of(&shapes::rectangle(1.0, 1.0), h)?;
        let spec = family(QuadraticFamily { a: vec![1.0], d: vec![0.0], x0: 1.0, ..Default::default() });
        let st = solve_state(&dom, &spec, &vec![0.0; dom.grid.len()], 1e-13, 100).map_err(e)?;
        let corner = dom.grid.idx(dom.grid.ns() - 1, dom.grid.nt() - 1);
        Ok((st.x[corner] - series(1.0, 1.0)).abs())
    };
    let (e1, e2) = (err(1.0 / 32.0)?, err(1.0 / 64.0)?);
    let ratio = e1 / e2;
    Ok(((3.5..=4.5).contains(&ratio), format!("error at (1,1) {e1:.3e} -> {e2:.3e}, ratio {ratio:.3}")))
}

// 2
fn riemann_reciprocity() -> Verdict {
    let h = 1.0 / 64.0;
    let dom = dom_of(&shapes::rectangle(1.0, 1.0), h)?;
    let spec = family(QuadraticFamily { a: vec![1.0], d: vec![0.0], ..Default::default() });
    let u = vec![0.0; dom.grid.len()];
    let st = solve_state(&dom, &spec, &u, 1e-13, 100).map_err(e)?;
    let lin = Linearization::new(&dom, &spec, &st, &u);
    let base = [0.125, 0.25];
    let fw = riemann_forward(&dom, &spec, &lin, base).map_err(e)?;
    let bnode = node_at(&dom, base).map_err(e)?;
    let grid: Vec<Point> = (3..8).flat_map(|i| (3..8).map(move |j| [i as f64 / 8.0, j as f64 / 8.0])).collect();
    let (mut worst, mut vs_series) = (0.0_f64, 0.0_f64);
    for p in &grid {
        let ad = riemann_adjoint(&dom, &spec, &lin, *p).map_err(e)?;
        let a = ad.value(bnode, &dom.grid)[0];
        let f = fw.value(node_at(&dom, *p).map_err(e)?, &dom.grid)[0];
        worst = worst.max((a - f).abs() / f.abs());
        let exact = series((p[0] - base[0]) * (p[1] - base[1]), 1.0);
        vs_series = vs_series.max((f - exact).abs() / exact);
    }
    Ok((worst < 5e-3, format!("{} nodes, max relative gap {worst:.3e} (forward vs series {vs_series:.3e})", grid.len())))
}

// 3
fn costate_oracle() -> Verdict {
    let spec = builtin("lq").map_err(e)?;
    let coarse = dom_of(&shapes::quarter_disk(1.0), 1.0 / 32.0)?;
    let points = regular_checkpoints(&coarse, 20, 20);
    let mut errs = Vec::new();
    for h in [1.0 / 32.0, 1.0 / 64.0] {
        let dom = dom_of(&shapes::quarter_disk(1.0), h)?;
        let (rep, _) = adjoint_check_at(&dom, &spec, &affine_control(&dom, 1), &points, 1e-2).map_err(e)?;
        errs.push(rep.max_rel_error);
    }
    let pass = points.len() == 20 && errs[1] < 1e-2 && errs[1] < errs[0];
    Ok((pass, format!("20 checkpoints, max relative error {:.3e} (h=1/32) -> {:.3e} (h=1/64)", errs[0], errs[1])))
}

/// `c0/2 x^2 + c1 x` at the vertex `at`, zero at every other vertex.
fn single_vertex_cost(spec: &mut ProblemSpec, at: Point, c0: f64, c1: f64) {
    let here = move |p: Point| (p[0] - at[0]).abs() < 1e-12 && (p[1] - at[1]).abs() < 1e-12;
    spec.cost.phi0 = Arc::new(move |p, x| if here(p) { 0.5 * c0 * x[0] * x[0] + c1 * x[0] } else { 0.0 });
    spec.cost.phi0_x = Some(Arc::new(move |p, x, o| o[0] = if here(p) { c0 * x[0] + c1 } else { 0.0 }));
}

// 4
// The continuous-adjoint gradient differs from the discrete cost's derivative
// by O(h^2); at h = 1/64 the quarter disk and staircase gaps are still above
// 1e-3, so the verdict is taken at h = 1/256 and the 1/64 gaps are printed.
fn keystone_gradient() -> Verdict {
    let lq = QuadraticFamily::preset("lq").expect("preset");
    let mut staircase = family(lq.clone());
    single_vertex_cost(&mut staircase, [1.0, 1.0], 1.0, 0.5);
    let cases = [
        ("rectangle LQ", shapes::rectangle(1.0, 1.0), family(lq.clone())),
        ("quarter disk, arc cost", shapes::quarter_disk(1.0), family(QuadraticFamily { kxx: 1.0, kxe: 0.5, kee: 0.3, kx: 0.2, ..lq })),
        ("staircase, cost at (1,1)", shapes::staircase(), staircase),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (k, (name, shape, spec)) in cases.into_iter().enumerate() {
        let mut gaps = Vec::new();
        for h in [1.0 / 64.0, 1.0 / 256.0] {
            let dom = dom_of(&shape, h)?;
            let rep = gradient_check(&dom, &spec, &affine_control(&dom, 1), 10, 1e-4, 100 * k as u64, 1e-3).map_err(e)?;
            gaps.push((rep.max_rel_gap, rep.pass && rep.directions.len() == 10));
        }
        pass &= gaps[1].1 && gaps[1].0 < gaps[0].0;
        parts.push(format!("{name} {:.2e} -> {:.2e}", gaps[0].0, gaps[1].0));
    }
    Ok((pass, format!("max relative gap over 10 directions, h = 1/64 -> 1/256: {}", parts.join(", "))))
}

// 5
fn rectangle_reduction() -> Verdict {
    let q = QuadraticFamily { w: 1.0, wp: 0.4, wq: 0.3, kxx: 0.6, kxe: 0.5, kee: 0.8, kx: 0.2, c0: 1.5, c1: -0.4, ..Default::default() };
    let spec = family(q.clone());
    let dom = dom_of(&shapes::rectangle(1.0, 1.0), 0.05)?;
    // f = u = 1 gives x = st and a polynomial co-state on both sides
    let u = vec![1.0; dom.grid.len()];
    let st = solve_state(&dom, &spec, &u, 1e-13, 100).map_err(e)?;
    let inp = CostateInputs::new(&dom, &spec, &st, &u, VrMode::default());
    let corner = q.c0 + q.c1 + 2.0 * q.kee;
    let mut worst = 0.0_f64;
    for (arc, coef) in [(0, q.wp), (1, q.wq)] {
        let fl = flat_with(&dom, &spec, &inp, arc).map_err(e)?;
        for (k, &node) in fl.nodes.iter().enumerate() {
            let p = dom.grid.point(node);
            let v = if arc == 0 { p[1] } else { p[0] };
            let want = corner + (coef + q.kxx) * (1.0 - v * v) / 2.0 + q.kx * (1.0 - v);
            worst = worst.max((fl.psi[k] - want).abs());
        }
    }
    Ok((worst < 1e-8, format!("max residual of side and corner conditions {worst:.3e}")))
}

// 6
fn jump_verification() -> Verdict {
    let mut spec = builtin("lq").map_err(e)?;
    single_vertex_cost(&mut spec, [1.0, 1.0], 1.0, 1.0);
    let p = [1.0, 0.5];
    let mut rows = Vec::new();
    for h in [0.05, 0.025] {
        let dom = dom_of(&shapes::staircase(), h)?;
        let v = dom.vertices.iter().position(|q| q == &[1.0, 1.0]).ok_or("no vertex at (1,1)")?;
        let u = field(&dom, 1, |s, _, _| s);
        let st = solve_state(&dom, &spec, &u, 1e-13, 200).map_err(e)?;
        let inp = CostateInputs::new(&dom, &spec, &st, &u, VrMode::default());
        let sol = sweep_with(&dom, &spec, &inp).map_err(e)?;
        let sheets = sol.sheets(&dom, node_at(&dom, p).map_err(e)?);
        let side = |k: usize| sheets.iter().find(|s| dom.zones.regions[s.region].p == k).map(|s| s.psi[0]).ok_or("missing sheet");
        let measured = side(0)? - side(1)?;
        let jump = jump_with(&dom, &spec, &inp, VertexLine::T(v), p).map_err(e)?[0];
        let within = verify_hamiltonian_pde(&dom, &spec, &inp, &sol).sup;
        let across = pde_residual_single_valued(&dom, &spec, &inp, &sol.merged(&dom)).sup;
        rows.push((h, (measured - jump).abs(), jump, within, across));
    }
    let c: Vec<f64> = rows.iter().map(|r| r.1 / r.0).collect();
    let jump_ok = rows[1].1 <= c[0] * rows[1].0 * 1.2 && rows[1].1 < 0.05 * (1.0 + rows[1].2.abs());
    let within_ok = rows[1].3 < rows[0].3 / 3.0;
    let across_ok = rows[1].4 >= rows[0].4 && rows[0].4 > 1.0;
    Ok((
        jump_ok && within_ok && across_ok,
        format!(
            "jump {:.4}, sheet gap {:.2e} -> {:.2e} (C = gap/h {:.3} -> {:.3}); PDE residual within sheets {:.2e} -> {:.2e}, across the line {:.2e} -> {:.2e}",
            rows[1].2, rows[0].1, rows[1].1, c[0], c[1], rows[0].3, rows[1].3, rows[0].4, rows[1].4
        ),
    ))
}

// 7
fn extremum_principle() -> Verdict {
    let spec = family(QuadraticFamily { a: vec![0.0], w: 2.0, r0: 0.0, r1: 1.0, lambda: 0.02, ..Default::default() });
    let dom = dom_of(&shapes::rectangle(1.0, 1.0), 1.0 / 16.0)?;
    let bounds = ControlBox::unbounded(1);
    let opts = PgOptions { tol: 1e-6, ..PgOptions::default() };
    let tr = projected_gradient(&dom, &spec, &vec![0.0; dom.grid.len()], &bounds, &opts).map_err(e)?;
    let monotone = tr.iterates.windows(2).all(|w| w[1].cost <= w[0].cost);
    let ev = evaluate(&dom, &spec, &tr.control, VrMode::default()).map_err(e)?;
    let rep = check_extremum(&dom, &spec, &ev.state, &ev.costate, &tr.control, &bounds, 200, 11, 1e-6, 7).map_err(e)?;

    let lq = builtin("lq").map_err(e)?;
    let c = [0.5, 0.5];
    let mut errs = Vec::new();
    for eps in [0.04, 0.02, 0.01] {
        let opts = GridOptions { h_max: 1.0 / 16.0, refine: vec![needle_refinement(c, eps)] };
        let dom = build_domain(&shapes::rectangle(1.0, 1.0), &[], &opts).map_err(e)?;
        let u = field(&dom, 1, |s, t, _| 0.2 * s + 0.1 * t);
        let r = needle_increment(&dom, &lq, &u, c, &[1.5], eps).map_err(e)?;
        errs.push((r.ratio - r.delta_h).abs() / r.delta_h.abs());
    }
    let order = (errs[1] / errs[2]).log2();
    let needle_ok = errs[2] < errs[1] && errs[1] < errs[0] && order >= 1.0;
    Ok((
        tr.converged && monotone && rep.violations.is_empty() && needle_ok,
        format!(
            "descent converged in {} iterations (grad {:.1e}), {} violations in 200x11 samples; needle errors {:.2e}, {:.2e}, {:.2e}, order {order:.2}",
            tr.iterates.len() - 1,
            tr.iterates.last().map(|r| r.grad_norm).unwrap_or(f64::NAN),
            rep.violations.len(),
            errs[0],
            errs[1],
            errs[2]
        ),
    ))
}

// 8
fn picard_contraction() -> Verdict {
    let dom = dom_of(&shapes::rectangle(1.0, 1.0), 0.02)?;
    let g = &dom.grid;
    let block = Block::rect(g, 0, g.ns() - 1, 0, g.nt() - 1);
    let mut worst = f64::NEG_INFINITY;
    let mut parts = Vec::new();
    for (l, rho) in [(3.0, 4.0), (1.0, 2.0), (0.5, 1.0)] {
        let kernel = move |_: usize, psi: &[f64], _: &[f64], _: &[f64], out: &mut [f64]| out[0] = l * psi[0];
        let zeros = vec![0.0; block.len()];
        let sys = VolterraSystem {
            grid: g,
            block: &block,
            dim: 1,
            direction: Direction::Backward,
            psi0: vec![1.0; block.len()],
            p0: zeros.clone(),
            q0: zeros,
            kernel: &kernel,
            clip: None,
        };
        let sol = picard_solve(&sys, &PicardOptions { rho: Some(rho), ..Default::default() }).map_err(e)?;
        let bound = contraction_bound(l, rho, 1.0, 1.0);
        let top = sol.psi_ratios().into_iter().fold(f64::NEG_INFINITY, f64::max);
        worst = worst.max(top - bound);
        parts.push(format!("L={l} rho={rho}: {top:.4} <= {bound:.4}"));
    }
    Ok((worst <= 0.05, parts.join("; ")))
}

fn load(name: &str, out: &Path) -> Result<RunConfig, String> {
    let mut cfg = RunConfig::load(&configs().join(name)).map_err(e)?;
    cfg.out = Some(out.to_path_buf());
    Ok(cfg)
}

// 9
fn twin_experiment() -> Verdict {
    let out = scratch("twin");
    let o = run(&load("tsunami_twin.toml", &out)?).map_err(e)?;
    let rows = o.report["sweep"].as_array().ok_or("no sweep in report")?;
    let mut pts: Vec<(f64, f64)> = rows.iter().map(|r| (r["lambda"].as_f64().unwrap_or(f64::NAN), r["rel_error"].as_f64().unwrap_or(f64::NAN))).collect();
    pts.sort_by(|a, b| b.0.total_cmp(&a.0));
    let h = o.report["h"].as_f64().unwrap_or(f64::NAN);
    let decreasing = pts.windows(2).all(|w| w[1].1 < w[0].1);
    let last = pts.last().map(|p| p.1).unwrap_or(f64::NAN);
    let _ = std::fs::remove_dir_all(&out);
    let listed: Vec<String> = pts.iter().map(|(l, r)| format!("{l:.0e}: {r:.4}")).collect();
    Ok((decreasing && last < 0.1 && (h - 1.0 / 64.0).abs() < 1e-12, format!("h = {h}, relative L2 error by lambda {}", listed.join(", "))))
}

// 10
fn determinism() -> Verdict {
    let exe = env!("CARGO_BIN_EXE_goursat");
    let cfg = configs().join("tsunami_twin_coarse.toml");
    let go = |name: &str, seed: Option<u64>| -> Result<PathBuf, String> {
        let out = scratch(name);
        let mut cmd = std::process::Command::new(exe);
        cmd.arg("--config").arg(&cfg).arg("--out").arg(&out);
        if let Some(s) = seed {
            cmd.arg("--seed").arg(s.to_string());
        }
        let st = cmd.output().map_err(e)?;
        if !st.status.success() {
            return Err(format!("run {name} exited with {}: {}", st.status, String::from_utf8_lossy(&st.stderr)));
        }
        Ok(out)
    };
    let (a, b, c) = (go("det-a", None)?, go("det-b", None)?, go("det-c", Some(12))?);
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .map_err(e)?
        .filter_map(|d| d.ok().map(|d| d.file_name().to_string_lossy().into_owned()))
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    let read = |d: &Path, n: &str| std::fs::read(d.join(n)).map_err(e);
    let mut same = true;
    for n in &names {
        same &= read(&a, n)? == read(&b, n)?;
    }
    let reseeded = read(&a, "observations.csv")? != read(&c, "observations.csv")?;
    for d in [a, b, c] {
        let _ = std::fs::remove_dir_all(d);
    }
    Ok((
        same && names.len() >= 5 && reseeded,
        format!("{} CSV files byte-identical across two runs: {same}; another seed changes the observations: {reseeded}", names.len()),
    ))
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget_s: Option<f64>,
    check: fn() -> Verdict,
}

fn main() {
    let list = [
        Criterion { id: 1, name: "forward-solver order", budget_s: Some(5.0), check: forward_order },
        Criterion { id: 2, name: "Riemann reciprocity", budget_s: Some(10.0), check: riemann_reciprocity },
        Criterion { id: 3, name: "co-state oracle equivalence", budget_s: Some(60.0), check: costate_oracle },
        Criterion { id: 4, name: "keystone gradient test", budget_s: Some(120.0), check: keystone_gradient },
        Criterion { id: 5, name: "rectangle reduction", budget_s: None, check: rectangle_reduction },
        Criterion { id: 6, name: "jump verification", budget_s: None, check: jump_verification },
        Criterion { id: 7, name: "extremum principle", budget_s: None, check: extremum_principle },
        Criterion { id: 8, name: "Picard contraction", budget_s: None, check: picard_contraction },
        Criterion { id: 9, name: "tsunami twin experiment", budget_s: Some(600.0), check: twin_experiment },
        Criterion { id: 10, name: "determinism", budget_s: None, check: determinism },
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for c in list.iter().filter(|c| only.is_empty() || only.contains(&c.id)) {
        let start = Instant::now();
        let verdict = (c.check)();
        let secs = start.elapsed().as_secs_f64();
        let in_budget = c.budget_s.map_or(true, |b| secs <= b);
        let (pass, detail) = match verdict {
            Ok((p, d)) => (p && in_budget, d),
            Err(msg) => (false, format!("error: {msg}")),
        };
        let budget = c.budget_s.map(|b| format!(", budget {b:.0} s")).unwrap_or_default();
        println!("{} criterion {:>2} {}: {detail} [{secs:.1} s{budget}]", if pass { "PASS" } else { "FAIL" }, c.id, c.name);
        if !pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
