//! Cost evaluation, the gradient `H_u`, projected-gradient descent over the
//! control box and checks of the extremum principle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::adjoint::{sweep_with, CostateInputs, CostateSolution, VrMode};
use crate::error::{Error, Result};
use crate::forward::{solve_state, StateSolution};
use crate::geometry::{Domain, NodeKind, Point};
use crate::problem::{hamiltonian, Args, BArgs, ControlBox, ProblemSpec};

/// Tolerance and iteration cap of every state solve in this module.
pub const STATE_TOL: f64 = 1e-13;
pub const STATE_MAX_ITER: usize = 400;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub area_term: f64,
    pub arc_term: f64,
    pub vertex_term: f64,
    pub total: f64,
}

/// `J = ∬_G Phi dA + ∫_gamma Phi1 dmu + Σ_P Phi0(P, x(P))`, the vertex sum
/// over every vertex including the two arc endpoints.
pub fn cost(dom: &Domain, spec: &ProblemSpec, state: &StateSolution, u: &[f64]) -> CostBreakdown {
    let (n, m) = (spec.n(), spec.m());
    let g = &dom.grid;
    let c = &spec.cost;
    let mut vals = vec![0.0; g.len()];
    vals.par_iter_mut().enumerate().for_each(|(node, v)| {
        if g.mask[node].in_domain() {
            *v = (c.phi)(&state.args(dom, u, m, node));
        }
    });
    let bs = crate::adjoint::BoundaryState::new(dom, n, m, state, u);
    let nb = dom.bnodes.len();
    let (mut area_b, mut arc_b) = (vec![0.0; nb], vec![0.0; nb]);
    for b in 0..nb {
        let a = bs.args(dom, n, m, b);
        area_b[b] = (c.phi)(&a);
        let eta = bs.eta(dom, n, b);
        arc_b[b] = (c.phi1)(&BArgs { s: a.s, t: a.t, x: a.x, eta: &eta });
    }
    let area_term = dom.integrate_domain(&vals, &area_b);
    let arc_term = dom.integrate_arc(&arc_b, [0.0, 0.0]).unwrap_or(0.0);
    let vertex_term = dom.vertices.iter().zip(&dom.vertex_node).map(|(&p, &node)| (c.phi0)(p, state.at(node))).sum();
    CostBreakdown { area_term, arc_term, vertex_term, total: area_term + arc_term + vertex_term }
}

/// `∬_G g . du dA` for two fields with `m` components per node.
pub fn inner(dom: &Domain, m: usize, g: &[f64], du: &[f64]) -> f64 {
    let len = dom.grid.len();
    let vals: Vec<f64> = (0..len).map(|k| (0..m).map(|c| g[k * m + c] * du[k * m + c]).sum()).collect();
    let bnd = dom.arc_values(&vals, 1);
    dom.integrate_domain(&vals, &bnd)
}

/// State, co-state, cost and gradient at one control.
pub struct Evaluation {
    pub state: StateSolution,
    pub inputs: CostateInputs,
    pub costate: CostateSolution,
    pub cost: CostBreakdown,
    pub grad: Vec<f64>,
}

pub fn evaluate(dom: &Domain, spec: &ProblemSpec, u: &[f64], mode: VrMode) -> Result<Evaluation> {
    let state = solve_state(dom, spec, u, STATE_TOL, STATE_MAX_ITER)?;
    let inputs = CostateInputs::new(dom, spec, &state, u, mode);
    let costate = sweep_with(dom, spec, &inputs)?;
    let grad = gradient(dom, spec, &state, &costate, u)?;
    let cost = cost(dom, spec, &state, u);
    Ok(Evaluation { state, inputs, costate, cost, grad })
}

/// `H_u = Phi_u + psi . f_u` at every node of G, with `psi` averaged over
/// the sheets meeting at a node.
pub fn gradient(dom: &Domain, spec: &ProblemSpec, state: &StateSolution, costate: &CostateSolution, u: &[f64]) -> Result<Vec<f64>> {
    let (n, m) = (spec.n(), spec.m());
    let g = &dom.grid;
    if u.len() != g.len() * m || costate.n != n {
        return Err(Error::DimensionMismatch(format!("gradient needs {} control values and n = {n}", g.len() * m)));
    }
    let (psi, _, _) = costate.averaged(dom);
    let mut out = vec![0.0; g.len() * m];
    out.par_chunks_mut(m).enumerate().for_each(|(node, o)| {
        if !g.mask[node].in_domain() {
            return;
        }
        let a = state.args(dom, u, m, node);
        let mut fu = vec![0.0; n * m];
        spec.dynamics.fu(&a, &mut fu);
        spec.cost.phi_u(&a, o);
        let ps = &psi[node * n..(node + 1) * n];
        for k in 0..n {
            for l in 0..m {
                o[l] += ps[k] * fu[k * m + l];
            }
        }
    });
    Ok(out)
}

pub fn total_cost(dom: &Domain, spec: &ProblemSpec, u: &[f64]) -> Result<f64> {
    let st = solve_state(dom, spec, u, STATE_TOL, STATE_MAX_ITER)?;
    Ok(cost(dom, spec, &st, u).total)
}

/// Central difference `(J(u + eps du) - J(u - eps du)) / (2 eps)`.
pub fn fd_cost_derivative(dom: &Domain, spec: &ProblemSpec, u: &[f64], du: &[f64], eps: f64) -> Result<f64> {
    if du.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let shifted = |sign: f64| -> Vec<f64> { u.iter().zip(du).map(|(a, b)| a + sign * eps * b).collect() };
    let (up, um) = (shifted(1.0), shifted(-1.0));
    let (jp, jm) = rayon::join(|| total_cost(dom, spec, &up), || total_cost(dom, spec, &um));
    Ok((jp? - jm?) / (2.0 * eps))
}

// ---------------------------------------------------------------------------
// Needle variations

/// Length scale of the needle taper: the profile falls from 1 to 0 over the
/// outer fraction `min(1/2, (eps / NEEDLE_TAPER_LENGTH)^2)` of the radius.
/// The taper's share of the disk then vanishes like `eps^2`, below the
/// first-order error of the needle expansion.
pub const NEEDLE_TAPER_LENGTH: f64 = 0.1;

pub fn needle_taper(eps: f64) -> f64 {
    (eps / NEEDLE_TAPER_LENGTH).powi(2).min(0.5)
}

/// Grid refinement band around a needle center that resolves the taper
/// with two cells.
pub fn needle_refinement(center: Point, eps: f64) -> crate::geometry::Refinement {
    let r = 1.05 * eps;
    crate::geometry::Refinement { s: [center[0] - r, center[0] + r], t: [center[1] - r, center[1] + r], h: eps * needle_taper(eps) / 2.0 }
}

/// Radial profile of the needle: 1 inside radius `eps (1 - delta)`, a
/// cosine taper to 0 at radius `eps`.
pub fn needle_profile(r: f64, eps: f64) -> f64 {
    let d = needle_taper(eps);
    let x = r / eps;
    if x <= 1.0 - d {
        1.0
    } else if x < 1.0 {
        0.5 * (1.0 + (std::f64::consts::PI * (x - 1.0 + d) / d).cos())
    } else {
        0.0
    }
}

/// `∬ profile dA / (pi eps^2)`.
pub fn needle_mass_factor(eps: f64) -> f64 {
    let d = needle_taper(eps);
    let a = 1.0 - d;
    a * a + 0.5 * (1.0 - a * a) - 2.0 * d * d / std::f64::consts::PI.powi(2)
}

#[derive(Clone, Debug, Serialize)]
pub struct NeedleResult {
    pub eps: f64,
    /// `J(u* + v_eps) - J(u*)` from full re-solves.
    pub delta_j: f64,
    /// `pi eps^2 Delta_u H(center; u1 - u*(center))`.
    pub predicted: f64,
    /// `Delta_u H(center; u1 - u*(center))`.
    pub delta_h: f64,
    /// `delta_j / (pi eps^2)`.
    pub ratio: f64,
}

fn bilinear(dom: &Domain, field: &[f64], m: usize, p: Point) -> Vec<f64> {
    let g = &dom.grid;
    let i = g.s.partition_point(|&s| s <= p[0]).clamp(1, g.ns() - 1) - 1;
    let j = g.t.partition_point(|&t| t <= p[1]).clamp(1, g.nt() - 1) - 1;
    let a = (p[0] - g.s[i]) / (g.s[i + 1] - g.s[i]);
    let b = (p[1] - g.t[j]) / (g.t[j + 1] - g.t[j]);
    let mut out = vec![0.0; m];
    for (di, dj, w) in [(0, 0, (1.0 - a) * (1.0 - b)), (1, 0, a * (1.0 - b)), (0, 1, (1.0 - a) * b), (1, 1, a * b)] {
        let k = g.idx(i + di, j + dj);
        for c in 0..m {
            out[c] += w * field[k * m + c];
        }
    }
    out
}

/// Needle variation `v_eps = profile(|. - center|) (u1 - u*)` supported in
/// the disk of radius `eps`; the whole disk of radius `2 eps` must lie in the
/// regular part of G.
pub fn needle_increment(dom: &Domain, spec: &ProblemSpec, u: &[f64], center: Point, u1: &[f64], eps: f64) -> Result<NeedleResult> {
    let m = spec.m();
    let g = &dom.grid;
    check_disk(dom, center, 2.0 * eps)?;
    let ev = evaluate(dom, spec, u, VrMode::default())?;
    let u_c = bilinear(dom, u, m, center);
    let (psi, _, _) = ev.costate.averaged(dom);
    let x_c = bilinear(dom, &ev.state.x, spec.n(), center);
    let p_c = bilinear(dom, &ev.state.x_s, spec.n(), center);
    let q_c = bilinear(dom, &ev.state.x_t, spec.n(), center);
    let psi_c = bilinear(dom, &psi, spec.n(), center);
    let a0 = Args { s: center[0], t: center[1], x: &x_c, p: &p_c, q: &q_c, u: &u_c };
    let h0 = hamiltonian(spec, &a0, &psi_c)?;
    let h1 = hamiltonian(spec, &Args { u: u1, ..a0 }, &psi_c)?;
    let delta_h = h1 - h0;

    let mut uv = u.to_vec();
    for node in 0..g.len() {
        let [s, t] = g.point(node);
        let w = needle_profile(((s - center[0]).powi(2) + (t - center[1]).powi(2)).sqrt(), eps);
        if w > 0.0 {
            for c in 0..m {
                uv[node * m + c] += w * (u1[c] - u[node * m + c]);
            }
        }
    }
    let j1 = total_cost(dom, spec, &uv)?;
    let delta_j = j1 - ev.cost.total;
    let area = std::f64::consts::PI * eps * eps;
    Ok(NeedleResult { eps, delta_j, predicted: area * delta_h, delta_h, ratio: delta_j / area })
}

fn check_disk(dom: &Domain, c: Point, r: f64) -> Result<()> {
    let inside = (0..64).all(|k| {
        let th = std::f64::consts::TAU * k as f64 / 64.0;
        let p = [c[0] + r * th.cos(), c[1] + r * th.sin()];
        p[0] > 0.0 && p[1] > 0.0 && dom.contains(p) && !dom.on_boundary(p)
    });
    let clear = dom.vertices[1..dom.vertices.len().saturating_sub(1)]
        .iter()
        .all(|v| !((v[0] - c[0]).abs() < r && c[1] < v[1] + r) && !((v[1] - c[1]).abs() < r && c[0] < v[0] + r));
    if inside && clear {
        Ok(())
    } else {
        Err(Error::DiskOutsideRegularPart(c[0], c[1]))
    }
}

// ---------------------------------------------------------------------------
// Projected gradient

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Armijo backtracking from `alpha0 = 1`.
    Armijo,
    /// Barzilai-Borwein trial step, safeguarded by Armijo backtracking.
    #[default]
    BarzilaiBorwein,
}

#[derive(Clone, Debug, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PgOptions {
    pub step: StepRule,
    pub tol: f64,
    pub max_iter: usize,
    pub armijo_c: f64,
    pub max_backtracks: usize,
    pub vr_mode: VrMode,
    /// End the run with `converged = false` instead of an error when the
    /// line search stalls.
    pub stall_ok: bool,
}

impl Default for PgOptions {
    fn default() -> Self {
        PgOptions { step: StepRule::default(), tol: 1e-6, max_iter: 200, armijo_c: 1e-4, max_backtracks: 40, vr_mode: VrMode::default(), stall_ok: false }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub active_fraction: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizationTrace {
    pub iterates: Vec<IterRecord>,
    #[serde(skip)]
    pub control: Vec<f64>,
    pub converged: bool,
    pub extremum: Option<ExtremumReport>,
}

impl OptimizationTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,J,grad_norm,step,active_fraction\n");
        for r in &self.iterates {
            out.push_str(&format!("{},{:.16e},{:.16e},{:.16e},{:.6}\n", r.iter, r.cost, r.grad_norm, r.step, r.active_fraction));
        }
        out
    }
}

/// A smooth cost over a flat control vector, as seen by the descent loop.
pub trait Objective: Sync {
    /// Control components per node.
    fn m(&self) -> usize;
    /// Whether entry `k` of the control vector is a degree of freedom.
    fn active(&self, k: usize) -> bool;
    /// L2 inner product of two control-shaped fields.
    fn inner(&self, a: &[f64], b: &[f64]) -> f64;
    fn cost(&self, u: &[f64]) -> Result<f64>;
    /// Cost and L2 gradient.
    fn cost_and_gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>)>;
}

/// The problem on one domain.
pub struct DomainObjective<'a> {
    pub dom: &'a Domain,
    pub spec: &'a ProblemSpec,
    pub mode: VrMode,
}

impl Objective for DomainObjective<'_> {
    fn m(&self) -> usize {
        self.spec.m()
    }
    fn active(&self, k: usize) -> bool {
        self.dom.grid.mask[k / self.spec.m()].in_domain()
    }
    fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        inner(self.dom, self.spec.m(), a, b)
    }
    fn cost(&self, u: &[f64]) -> Result<f64> {
        total_cost(self.dom, self.spec, u)
    }
    fn cost_and_gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        let ev = evaluate(self.dom, self.spec, u, self.mode)?;
        Ok((ev.cost.total, ev.grad))
    }
}

/// Sup-norm of `P(u - H_u) - u` over the active entries.
fn projected_gradient_norm(obj: &dyn Objective, bounds: &ControlBox, u: &[f64], grad: &[f64]) -> f64 {
    let m = bounds.lower.len();
    (0..u.len())
        .filter(|&k| obj.active(k))
        .map(|k| ((u[k] - grad[k]).clamp(bounds.lower[k % m], bounds.upper[k % m]) - u[k]).abs())
        .fold(0.0, f64::max)
}

fn active_fraction(obj: &dyn Objective, bounds: &ControlBox, u: &[f64]) -> f64 {
    let m = bounds.lower.len();
    let (mut act, mut tot) = (0usize, 0usize);
    for k in (0..u.len()).filter(|&k| obj.active(k)) {
        tot += 1;
        if u[k] <= bounds.lower[k % m] || u[k] >= bounds.upper[k % m] {
            act += 1;
        }
    }
    act as f64 / tot.max(1) as f64
}

/// Projected-gradient descent `u <- P(u - alpha H_u)` with Armijo
/// backtracking on the cost; stops when the projected-gradient sup-norm
/// drops below `tol`.
pub fn projected_gradient(dom: &Domain, spec: &ProblemSpec, u0: &[f64], bounds: &ControlBox, opts: &PgOptions) -> Result<OptimizationTrace> {
    let obj = DomainObjective { dom, spec, mode: opts.vr_mode };
    minimize(&obj, u0, bounds, opts)
}

/// The descent loop of [`projected_gradient`] for any [`Objective`].
pub fn minimize(obj: &dyn Objective, u0: &[f64], bounds: &ControlBox, opts: &PgOptions) -> Result<OptimizationTrace> {
    bounds.validate(obj.m())?;
    let mut u = u0.to_vec();
    bounds.project(&mut u);
    let (mut j, mut grad) = obj.cost_and_gradient(&u)?;
    let mut trace = OptimizationTrace { iterates: Vec::new(), control: Vec::new(), converged: false, extremum: None };
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    for iter in 0..=opts.max_iter {
        let gnorm = projected_gradient_norm(obj, bounds, &u, &grad);
        let rec_step = trace.iterates.last().map(|r: &IterRecord| r.step).unwrap_or(0.0);
        trace.iterates.push(IterRecord { iter, cost: j, grad_norm: gnorm, step: rec_step, active_fraction: active_fraction(obj, bounds, &u) });
        if gnorm < opts.tol {
            trace.converged = true;
            break;
        }
        if iter == opts.max_iter {
            break;
        }
        let mut alpha = match (opts.step, &prev) {
            (StepRule::BarzilaiBorwein, Some((up, gp))) => {
                let du: Vec<f64> = u.iter().zip(up).map(|(a, b)| a - b).collect();
                let dg: Vec<f64> = grad.iter().zip(gp).map(|(a, b)| a - b).collect();
                let ss = obj.inner(&du, &du);
                let sy = obj.inner(&du, &dg);
                if sy > 0.0 && ss > 0.0 {
                    (ss / sy).clamp(1e-6, 1e6)
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let mut trial: Vec<f64> = u.iter().zip(&grad).map(|(a, g)| a - alpha * g).collect();
            bounds.project(&mut trial);
            let step: Vec<f64> = trial.iter().zip(&u).map(|(a, b)| a - b).collect();
            let decrease = -obj.inner(&grad, &step);
            let jt = obj.cost(&trial)?;
            if jt <= j - opts.armijo_c * decrease && jt <= j {
                accepted = Some(trial);
                break;
            }
            alpha *= 0.5;
        }
        let Some(next) = accepted else {
            if opts.stall_ok {
                break;
            }
            return Err(Error::LineSearchFailed(opts.max_backtracks));
        };
        prev = Some((std::mem::replace(&mut u, next), grad));
        (j, grad) = obj.cost_and_gradient(&u)?;
        if let Some(last) = trace.iterates.last_mut() {
            last.step = alpha;
        }
    }
    trace.control = u;
    Ok(trace)
}

// ---------------------------------------------------------------------------
// Extremum principle

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Violation {
    pub s: f64,
    pub t: f64,
    pub u1: Vec<f64>,
    /// `H(u*) - H(u1)`, positive when violated.
    pub excess: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ExtremumReport {
    pub samples: usize,
    pub lattice: usize,
    pub rel_tol: f64,
    pub max_excess: f64,
    pub violations: Vec<Violation>,
}

impl ExtremumReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Lattice of `per_axis` values per control component over the box, with
/// unbounded sides replaced by `center +- 2 (1 + |center|)`.
fn lattice(bounds: &ControlBox, center: &[f64], per_axis: usize) -> Vec<Vec<f64>> {
    let m = center.len();
    let axes: Vec<Vec<f64>> = (0..m)
        .map(|c| {
            let span = 2.0 * (1.0 + center[c].abs());
            let lo = if bounds.lower[c].is_finite() { bounds.lower[c] } else { center[c] - span };
            let hi = if bounds.upper[c].is_finite() { bounds.upper[c] } else { center[c] + span };
            (0..per_axis).map(|k| lo + (hi - lo) * k as f64 / (per_axis.max(2) - 1) as f64).collect()
        })
        .collect();
    let mut out = vec![Vec::new()];
    for ax in &axes {
        out = out.into_iter().flat_map(|p: Vec<f64>| ax.iter().map(move |v| [p.clone(), vec![*v]].concat())).collect();
    }
    out
}

/// Checks `H(u*) <= H(u1) + tol` at random regular nodes of G over a lattice
/// of `u1` values in the box; `tol = rel_tol (1 + |H(u*)|)`.
#[allow(clippy::too_many_arguments)]
pub fn check_extremum(
    dom: &Domain,
    spec: &ProblemSpec,
    state: &StateSolution,
    costate: &CostateSolution,
    u: &[f64],
    bounds: &ControlBox,
    sample_count: usize,
    per_axis: usize,
    rel_tol: f64,
    seed: u64,
) -> Result<ExtremumReport> {
    let (n, m) = (spec.n(), spec.m());
    let g = &dom.grid;
    let regular: Vec<usize> = (0..g.len())
        .filter(|&k| g.mask[k] == NodeKind::Inside && dom.is_regular_node(k) && !dom.on_vertex_line(g.point(k)))
        .collect();
    if regular.is_empty() {
        return Err(Error::ConfigInvalid("no regular nodes to sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = (0..sample_count).map(|_| regular[rng.gen_range(0..regular.len())]).collect();
    let (psi, _, _) = costate.averaged(dom);
    let per_node: Vec<Result<(f64, Vec<Violation>)>> = picks
        .par_iter()
        .map(|&node| {
            let a = state.args(dom, u, m, node);
            let ps = &psi[node * n..(node + 1) * n];
            let h0 = hamiltonian(spec, &a, ps)?;
            let tol = rel_tol * (1.0 + h0.abs());
            let mut worst = f64::NEG_INFINITY;
            let mut viol = Vec::new();
            for u1 in lattice(bounds, a.u, per_axis) {
                let h1 = hamiltonian(spec, &Args { u: &u1, ..a }, ps)?;
                let excess = h0 - h1;
                worst = worst.max(excess);
                if excess > tol {
                    viol.push(Violation { s: a.s, t: a.t, u1, excess });
                }
            }
            Ok((worst, viol))
        })
        .collect();
    let mut report = ExtremumReport { samples: sample_count, lattice: per_axis, rel_tol, max_excess: f64::NEG_INFINITY, violations: Vec::new() };
    for r in per_node {
        let (w, v) = r?;
        report.max_excess = report.max_excess.max(w);
        report.violations.extend(v);
    }
    Ok(report)
}
