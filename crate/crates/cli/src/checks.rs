//! Oracle checks shared by the `adjoint-check` and `gradient-check`
//! commands and the acceptance suite.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use goursat::adjoint::{quadrature_with, sweep_with, CostateInputs, VrMode};
use goursat::error::Result;
use goursat::forward::solve_state;
use goursat::geometry::{Domain, NodeKind, Point};
use goursat::riemann::node_at;
use goursat::optimize::{evaluate, fd_cost_derivative, inner, STATE_MAX_ITER, STATE_TOL};
use goursat::problem::ProblemSpec;

/// Node field with `m` components from `f(s, t, component)`.
pub fn field(dom: &Domain, m: usize, f: impl Fn(f64, f64, usize) -> f64) -> Vec<f64> {
    let g = &dom.grid;
    (0..g.len() * m)
        .map(|k| {
            let [s, t] = g.point(k / m);
            f(s, t, k % m)
        })
        .collect()
}

/// Random smooth direction: six seeded coefficients per component on the
/// basis `1, s, t, sin 3st, t cos 2s, s^2`.
pub fn smooth_direction(dom: &Domain, m: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c: Vec<f64> = (0..6 * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
    field(dom, m, |s, t, l| {
        let k = &c[6 * l..6 * l + 6];
        k[0] + k[1] * s + k[2] * t + k[3] * (3.0 * s * t).sin() + k[4] * (2.0 * s).cos() * t + k[5] * s * s
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DirectionGap {
    pub seed: u64,
    pub adjoint: f64,
    pub finite_difference: f64,
    pub rel_gap: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradientCheckReport {
    pub eps: f64,
    pub directions: Vec<DirectionGap>,
    pub max_rel_gap: f64,
    pub rel_tol: f64,
    pub pass: bool,
}

/// `|∬ H_u du - fd| / max(|fd|, 1e-8)` for `count` smooth directions.
pub fn gradient_check(dom: &Domain, spec: &ProblemSpec, u: &[f64], count: usize, eps: f64, seed: u64, rel_tol: f64) -> Result<GradientCheckReport> {
    let m = spec.m();
    let ev = evaluate(dom, spec, u, VrMode::default())?;
    let directions: Vec<DirectionGap> = (0..count as u64)
        .into_par_iter()
        .map(|k| {
            let s = seed.wrapping_add(k);
            let du = smooth_direction(dom, m, s);
            let fd = fd_cost_derivative(dom, spec, u, &du, eps)?;
            let adj = inner(dom, m, &ev.grad, &du);
            Ok(DirectionGap { seed: s, adjoint: adj, finite_difference: fd, rel_gap: (adj - fd).abs() / fd.abs().max(1e-8) })
        })
        .collect::<Result<_>>()?;
    let max_rel_gap = directions.iter().map(|d| d.rel_gap).fold(0.0, f64::max);
    Ok(GradientCheckReport { eps, directions, max_rel_gap, rel_tol, pass: max_rel_gap < rel_tol })
}

#[derive(Clone, Debug, Serialize)]
pub struct Checkpoint {
    pub s: f64,
    pub t: f64,
    pub sweep: Vec<f64>,
    pub quadrature: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AdjointCheckReport {
    pub checkpoints: Vec<Checkpoint>,
    pub max_abs_error: f64,
    /// Largest `|psi|` from the quadrature over the checkpoints.
    pub scale: f64,
    /// `max_abs_error / scale`
    pub max_rel_error: f64,
    pub rel_tol: f64,
    pub pass: bool,
}

/// `count` distinct seeded interior nodes of G_R, off every vertex line.
pub fn regular_checkpoints(dom: &Domain, count: usize, seed: u64) -> Vec<Point> {
    let g = &dom.grid;
    let regular: Vec<usize> = (0..g.len()).filter(|&k| g.mask[k] == NodeKind::Inside && dom.is_regular_node(k) && !dom.on_vertex_line(g.point(k))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = regular.choose_multiple(&mut rng, count).copied().collect();
    picked.sort_unstable();
    picked.into_iter().map(|k| g.point(k)).collect()
}

/// Sweep against quadrature at `count` seeded checkpoints.
pub fn adjoint_check(dom: &Domain, spec: &ProblemSpec, u: &[f64], count: usize, seed: u64, rel_tol: f64) -> Result<(AdjointCheckReport, String)> {
    adjoint_check_at(dom, spec, u, &regular_checkpoints(dom, count, seed), rel_tol)
}

/// Sweep against quadrature at grid nodes `points`. Where a node carries
/// several sheets every sheet is compared.
pub fn adjoint_check_at(dom: &Domain, spec: &ProblemSpec, u: &[f64], points: &[Point], rel_tol: f64) -> Result<(AdjointCheckReport, String)> {
    let state = solve_state(dom, spec, u, STATE_TOL, STATE_MAX_ITER)?;
    let inp = CostateInputs::new(dom, spec, &state, u, VrMode::default());
    let sol = sweep_with(dom, spec, &inp)?;
    let checkpoints: Vec<(Checkpoint, f64)> = points
        .par_iter()
        .map(|&p| {
            let node = node_at(dom, p)?;
            let q = quadrature_with(dom, spec, &inp, p)?;
            let sheets = sol.sheets(dom, node);
            let mut err = 0.0_f64;
            for sh in &sheets {
                for k in 0..q.len() {
                    err = err.max((sh.psi[k] - q[k]).abs());
                }
            }
            let sweep = sheets.first().map(|sh| sh.psi.clone()).unwrap_or_default();
            Ok((Checkpoint { s: p[0], t: p[1], sweep, quadrature: q }, err))
        })
        .collect::<Result<_>>()?;
    let max_abs_error = checkpoints.iter().map(|c| c.1).fold(0.0, f64::max);
    let scale = checkpoints.iter().flat_map(|c| c.0.quadrature.iter().map(|v| v.abs())).fold(0.0, f64::max);
    let max_rel_error = if scale > 0.0 { max_abs_error / scale } else { max_abs_error };
    let report = AdjointCheckReport {
        checkpoints: checkpoints.into_iter().map(|c| c.0).collect(),
        max_abs_error,
        scale,
        max_rel_error,
        rel_tol,
        pass: max_rel_error < rel_tol,
    };
    Ok((report, sol.to_csv(dom)))
}
