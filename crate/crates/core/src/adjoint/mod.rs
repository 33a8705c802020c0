//! Co-state of the boundary control problem.
//!
//! Two independent paths: the checkpoint quadrature of the defining
//! representation (forward Riemann family based at the target) and the zone
//! sweep, which solves triangles against the oblique arc first and then
//! rectangles as Goursat problems whose edge data are the neighbouring
//! solutions corrected by the line jumps.
//!
//! Only the interior vertices `P_1..P_N` carry vertex terms; the lines
//! through `P_0 = (a, 0)` and `P_{N+1} = (0, b)` are the axes or the
//! boundary and carry no jump.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::{picard_solve, Block, Clip, Direction, Linearization, PicardOptions, StateSolution, VolterraSystem};
use crate::geometry::{ArcKind, CellKind, Domain, NodeKind, Point, RegionKind};
use crate::numeric::{diff_weights3, identity, row_times, solve_row};
use crate::problem::{total_derivative, Args, BArgs, ProblemSpec, Which};
use crate::riemann::{aux_at, forward_at, node_at};

const SAME: f64 = 1e-12;

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= SAME
}

/// How the vertex ingredient `V_r` built from `Phi1_eta` enters `F0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VrMode {
    /// `V_r = Phi1_eta(outgoing arc) - Phi1_eta(incoming arc)` at `P_r`.
    #[default]
    TangentialJump,
    /// Opposite sign: incoming minus outgoing.
    ReversedJump,
    Zero,
}

/// Extrapolated state and control at the boundary nodes.
#[derive(Clone, Debug)]
pub struct BoundaryState {
    pub x: Vec<f64>,
    pub xs: Vec<f64>,
    pub xt: Vec<f64>,
    pub u: Vec<f64>,
}

impl BoundaryState {
    pub fn new(dom: &Domain, n: usize, m: usize, state: &StateSolution, u: &[f64]) -> BoundaryState {
        BoundaryState {
            x: dom.arc_values(&state.x, n),
            xs: dom.arc_values(&state.x_s, n),
            xt: dom.arc_values(&state.x_t, n),
            u: dom.arc_values(u, m),
        }
    }

    pub fn args<'a>(&'a self, dom: &Domain, n: usize, m: usize, b: usize) -> Args<'a> {
        let p = dom.bnodes[b].p;
        Args {
            s: p[0],
            t: p[1],
            x: &self.x[b * n..(b + 1) * n],
            p: &self.xs[b * n..(b + 1) * n],
            q: &self.xt[b * n..(b + 1) * n],
            u: &self.u[b * m..(b + 1) * m],
        }
    }

    /// Tangential derivative `x_mu = -n2 x_s + n1 x_t` at a boundary node.
    pub fn eta(&self, dom: &Domain, n: usize, b: usize) -> Vec<f64> {
        let nv = dom.bnodes[b].normal;
        (0..n).map(|c| -nv[1] * self.xs[b * n + c] + nv[0] * self.xt[b * n + c]).collect()
    }
}

/// Source terms of the co-state: `F` on grid nodes (and extrapolated to
/// boundary nodes), `F1` on boundary nodes, `F0` per vertex.
#[derive(Clone, Debug)]
pub struct FTerms {
    pub n: usize,
    pub f: Vec<f64>,
    pub f_bnd: Vec<f64>,
    pub f1: Vec<f64>,
    pub f0: Vec<f64>,
    pub vr_mode: VrMode,
    /// `V_r` per vertex as used in `f0`.
    pub vr: Vec<f64>,
}

impl FTerms {
    pub fn f_at(&self, node: usize) -> &[f64] {
        &self.f[node * self.n..(node + 1) * self.n]
    }
    pub fn f1_at(&self, b: usize) -> &[f64] {
        &self.f1[b * self.n..(b + 1) * self.n]
    }
    pub fn f0_at(&self, r: usize) -> &[f64] {
        &self.f0[r * self.n..(r + 1) * self.n]
    }
}

fn is_interior_vertex(dom: &Domain, r: usize) -> bool {
    r > 0 && r + 1 < dom.vertices.len()
}

/// `D/Dmu` of a per-boundary-node field along each arc (three-point
/// differences in mu, one-sided at the arc ends).
fn mu_derivative(dom: &Domain, vals: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; vals.len()];
    for range in &dom.arc_bnodes {
        let len = range.len();
        let mu = |k: usize| dom.bnodes[range.start + k].mu;
        for k in 0..len {
            let b = range.start + k;
            if len == 2 {
                let h = mu(1) - mu(0);
                for c in 0..n {
                    out[b * n + c] = (vals[(range.start + 1) * n + c] - vals[range.start * n + c]) / h;
                }
                continue;
            }
            let base = if k == 0 { 0 } else if k == len - 1 { len - 3 } else { k - 1 };
            let w = diff_weights3([mu(base), mu(base + 1), mu(base + 2)], mu(k));
            for c in 0..n {
                out[b * n + c] = (0..3).map(|r| w[r] * vals[(range.start + base + r) * n + c]).sum();
            }
        }
    }
    out
}

/// Builds `F`, `F1` and `F0` along the state.
pub fn compute_f_terms(dom: &Domain, spec: &ProblemSpec, state: &StateSolution, u: &[f64], mode: VrMode) -> Result<FTerms> {
    let lin = Linearization::new(dom, spec, state, u);
    let bs = BoundaryState::new(dom, spec.n(), spec.m(), state, u);
    Ok(f_terms_with(dom, spec, &lin, &bs, mode))
}

pub fn f_terms_with(dom: &Domain, spec: &ProblemSpec, lin: &Linearization, bs: &BoundaryState, mode: VrMode) -> FTerms {
    let (n, m) = (spec.n(), spec.m());
    let g = &dom.grid;
    let cost = &spec.cost;
    let cf = &lin.chain;
    let mut f = vec![0.0; g.len() * n];
    f.par_chunks_mut(n).enumerate().for_each(|(node, out)| {
        if !g.mask[node].in_domain() {
            return;
        }
        let a = cf.args(dom, node);
        cost.phi_x(&a, out);
        let gp = |a: &Args, o: &mut [f64]| cost.phi_p(a, o);
        let gq = |a: &Args, o: &mut [f64]| cost.phi_q(a, o);
        let dsp = total_derivative(&gp, n, cf, dom, node, Which::Ds);
        let dtq = total_derivative(&gq, n, cf, dom, node, Which::Dt);
        for c in 0..n {
            out[c] -= dsp[c] + dtq[c];
        }
    });
    let f_bnd = dom.arc_values(&f, n);

    let nb = dom.bnodes.len();
    let mut e = vec![0.0; nb * n];
    let mut f1 = vec![0.0; nb * n];
    let (mut pp, mut pq, mut px) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for b in 0..nb {
        let a = bs.args(dom, n, m, b);
        let eta = bs.eta(dom, n, b);
        let ba = BArgs { s: a.s, t: a.t, x: a.x, eta: &eta };
        cost.phi1_eta(&ba, &mut e[b * n..(b + 1) * n]);
        cost.phi_p(&a, &mut pp);
        cost.phi_q(&a, &mut pq);
        cost.phi1_x(&ba, &mut px);
        let nv = dom.bnodes[b].normal;
        for c in 0..n {
            f1[b * n + c] = nv[0] * pp[c] + nv[1] * pq[c] + px[c];
        }
    }
    let de = mu_derivative(dom, &e, n);
    for k in 0..nb * n {
        f1[k] -= de[k];
    }

    let nv = dom.vertices.len();
    let mut f0 = vec![0.0; nv * n];
    let mut vr = vec![0.0; nv * n];
    let mut d0 = vec![0.0; n];
    for r in 1..nv.saturating_sub(1) {
        let node = dom.vertex_node[r];
        cost.phi0_x(dom.vertices[r], &lin.chain.x[node * n..(node + 1) * n], &mut d0);
        let b_in = dom.arc_bnodes[r - 1].end - 1;
        let b_out = dom.arc_bnodes[r].start;
        for c in 0..n {
            let jump = e[b_out * n + c] - e[b_in * n + c];
            vr[r * n + c] = match mode {
                VrMode::TangentialJump => jump,
                VrMode::ReversedJump => -jump,
                VrMode::Zero => 0.0,
            };
            f0[r * n + c] = d0[c] - vr[r * n + c];
        }
    }
    FTerms { n, f, f_bnd, f1, f0, vr_mode: mode, vr }
}

/// Everything the co-state paths share: the linearization, the boundary
/// state and the source terms.
pub struct CostateInputs {
    pub lin: Linearization,
    pub bstate: BoundaryState,
    pub terms: FTerms,
}

impl CostateInputs {
    pub fn new(dom: &Domain, spec: &ProblemSpec, state: &StateSolution, u: &[f64], mode: VrMode) -> CostateInputs {
        let lin = Linearization::new(dom, spec, state, u);
        let bstate = BoundaryState::new(dom, spec.n(), spec.m(), state, u);
        let terms = f_terms_with(dom, spec, &lin, &bstate, mode);
        CostateInputs { lin, bstate, terms }
    }
}

// ---------------------------------------------------------------------------
// Quadrature of the representation

/// Co-state at a regular grid node by direct quadrature of the
/// representation with the forward Riemann family based at the target.
pub fn costate_by_quadrature(dom: &Domain, spec: &ProblemSpec, state: &StateSolution, u: &[f64], target: Point) -> Result<Vec<f64>> {
    let inp = CostateInputs::new(dom, spec, state, u, VrMode::default());
    quadrature_with(dom, spec, &inp, target)
}

fn check_regular_target(dom: &Domain, target: Point) -> Result<usize> {
    let node = node_at(dom, target)?;
    if dom.grid.mask[node] != NodeKind::Inside {
        return Err(Error::TargetOnVertexLine(target[0], target[1]));
    }
    for r in 1..dom.vertices.len() - 1 {
        let v = dom.vertices[r];
        if (same(v[0], target[0]) && target[1] <= v[1]) || (same(v[1], target[1]) && target[0] <= v[0]) {
            return Err(Error::TargetOnVertexLine(target[0], target[1]));
        }
    }
    Ok(node)
}

pub fn quadrature_with(dom: &Domain, spec: &ProblemSpec, inp: &CostateInputs, target: Point) -> Result<Vec<f64>> {
    let node = check_regular_target(dom, target)?;
    let n = spec.n();
    let nn = n * n;
    let g = &dom.grid;
    let fam = forward_at(dom, spec, &inp.lin, node)?;
    let (i0, j0) = g.ij(node);
    let terms = &inp.terms;

    // integrand F_i R^i_j at nodes and boundary nodes, one scalar field per j
    let mut node_vals = vec![vec![0.0; g.len()]; n];
    let mut tmp = vec![0.0; n];
    for (k, &nd) in fam.block.nodes.iter().enumerate() {
        row_times(terms.f_at(nd), &fam.values[k * nn..(k + 1) * nn], &mut tmp);
        for c in 0..n {
            node_vals[c][nd] = tmp[c];
        }
    }
    let nb = dom.bnodes.len();
    let mut r_bnd = vec![0.0; nb * nn];
    for b in 0..nb {
        let p = dom.bnodes[b].p;
        if p[0] < target[0] - SAME || p[1] < target[1] - SAME {
            continue;
        }
        for (nd, w) in dom.arc_stencil(b, i0, j0) {
            let (i, j) = g.ij(nd);
            let k = fam.block.local(i, j).expect("stencil node outside the family support");
            for c in 0..nn {
                r_bnd[b * nn + c] += w * fam.values[k * nn + c];
            }
        }
    }
    let mut area_bnd = vec![vec![0.0; nb]; n];
    let mut arc_bnd = vec![vec![0.0; nb]; n];
    for b in 0..nb {
        let r = &r_bnd[b * nn..(b + 1) * nn];
        row_times(&terms.f_bnd[b * n..(b + 1) * n], r, &mut tmp);
        for c in 0..n {
            area_bnd[c][b] = tmp[c];
        }
        row_times(terms.f1_at(b), r, &mut tmp);
        for c in 0..n {
            arc_bnd[c][b] = tmp[c];
        }
    }
    let mut out = vec![0.0; n];
    for c in 0..n {
        out[c] = dom.integrate_e_node(&node_vals[c], &area_bnd[c], i0, j0) + dom.integrate_arc(&arc_bnd[c], target)?;
    }
    for r in 1..dom.vertices.len() - 1 {
        let v = dom.vertices[r];
        if v[0] > target[0] && v[1] > target[1] {
            let (i, j) = g.ij(dom.vertex_node[r]);
            let k = fam.block.local(i, j).expect("vertex outside the family support");
            row_times(terms.f0_at(r), &fam.values[k * nn..(k + 1) * nn], &mut tmp);
            for c in 0..n {
                out[c] += tmp[c];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Line sums: vertex limits and jumps

fn rho_at(list: &[(f64, Vec<f64>)], z: f64) -> &[f64] {
    let k = list.partition_point(|e| e.0 < z - 1e-9);
    let k = k.min(list.len() - 1);
    assert!((list[k].0 - z).abs() <= 1e-9, "no line-costate sample at {z}");
    &list[k].1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Axis {
    /// Horizontal line through the node, to the right.
    S,
    /// Vertical line through the node, upward.
    T,
}

/// `∫ F1 rho dmu` over the flat boundary segments on the line through
/// `node` beyond it, plus `F0 rho` over the vertices there (`P` itself only
/// when `include_self`).
fn line_sum(dom: &Domain, n: usize, lin: &Linearization, terms: &FTerms, node: usize, axis: Axis, include_self: bool) -> Vec<f64> {
    let [s, t] = dom.grid.point(node);
    let aux = aux_at(dom, n, lin, node);
    let (list, kind, fixed, var) = match axis {
        Axis::S => (&aux.rho2, ArcKind::FlatS, 1, 0),
        Axis::T => (&aux.rho1, ArcKind::FlatT, 0, 1),
    };
    let (pfix, pvar) = if fixed == 0 { (s, t) } else { (t, s) };
    let mut out = vec![0.0; n];
    let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
    for (k, arc) in dom.arcs.iter().enumerate() {
        if arc.kind != kind || !same(arc.endpoints[0][fixed], pfix) {
            continue;
        }
        let range = dom.arc_bnodes[k].clone();
        for bn in range.start..range.end - 1 {
            let (x, y) = (&dom.bnodes[bn], &dom.bnodes[bn + 1]);
            if x.p[var] < pvar - SAME || y.p[var] < pvar - SAME {
                continue;
            }
            row_times(terms.f1_at(bn), rho_at(list, x.p[var]), &mut a);
            row_times(terms.f1_at(bn + 1), rho_at(list, y.p[var]), &mut b);
            let h = 0.5 * (y.mu - x.mu);
            for c in 0..n {
                out[c] += h * (a[c] + b[c]);
            }
        }
    }
    for r in 1..dom.vertices.len() - 1 {
        let v = dom.vertices[r];
        if !same(v[fixed], pfix) {
            continue;
        }
        let beyond = if include_self { v[var] >= pvar - SAME } else { v[var] > pvar + SAME };
        if beyond {
            row_times(terms.f0_at(r), rho_at(list, v[var]), &mut a);
            for c in 0..n {
                out[c] += a[c];
            }
        }
    }
    out
}

/// One-sided limits of the co-state at a vertex: from `s < s(P), t < t(P)`
/// (`w3`), from `s < s(P), t > t(P)` (`w2`) and from `s > s(P), t < t(P)`
/// (`w4`).
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct VertexLimits {
    pub vertex: usize,
    pub w3: Vec<f64>,
    pub w2: Vec<f64>,
    pub w4: Vec<f64>,
}

pub fn vertex_limits(dom: &Domain, spec: &ProblemSpec, state: &StateSolution, u: &[f64], vertex: usize) -> Result<VertexLimits> {
    let inp = CostateInputs::new(dom, spec, state, u, VrMode::default());
    vertex_limits_with(dom, spec, &inp, vertex)
}

pub fn vertex_limits_with(dom: &Domain, spec: &ProblemSpec, inp: &CostateInputs, vertex: usize) -> Result<VertexLimits> {
    let n = spec.n();
    if vertex >= dom.vertices.len() {
        return Err(Error::MissingVertexLimit(vertex));
    }
    let node = dom.vertex_node[vertex];
    let w2 = line_sum(dom, n, &inp.lin, &inp.terms, node, Axis::T, false);
    let w4 = line_sum(dom, n, &inp.lin, &inp.terms, node, Axis::S, false);
    let self_term: Vec<f64> = inp.terms.f0_at(vertex).to_vec();
    let w3 = (0..n).map(|c| w2[c] + w4[c] + self_term[c]).collect();
    Ok(VertexLimits { vertex, w3, w2, w4 })
}

/// A vertex line: `S(r)` is the horizontal line through `P_r`, `T(r)` the
/// vertical one.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VertexLine {
    S(usize),
    T(usize),
}

/// Jump `psi^- - psi^+` (below minus above, or left minus right) across a
/// vertex line at a grid node on it.
pub fn jump_conditions(dom: &Domain, spec: &ProblemSpec, state: &StateSolution, u: &[f64], line: VertexLine, point: Point) -> Result<Vec<f64>> {
    let inp = CostateInputs::new(dom, spec, state, u, VrMode::default());
    jump_with(dom, spec, &inp, line, point)
}

pub fn jump_with(dom: &Domain, spec: &ProblemSpec, inp: &CostateInputs, line: VertexLine, point: Point) -> Result<Vec<f64>> {
    let node = node_at(dom, point)?;
    let (r, axis) = match line {
        VertexLine::S(r) => (r, Axis::S),
        VertexLine::T(r) => (r, Axis::T),
    };
    if r >= dom.vertices.len() {
        return Err(Error::MissingVertexLimit(r));
    }
    let v = dom.vertices[r];
    let on_line = match axis {
        Axis::S => same(point[1], v[1]) && point[0] < v[0],
        Axis::T => same(point[0], v[0]) && point[1] < v[1],
    };
    if !on_line || dom.grid.mask[node] != NodeKind::Inside {
        return Err(Error::OnForeignVertexLine(point[0], point[1]));
    }
    for q in 1..dom.vertices.len() - 1 {
        let w = dom.vertices[q];
        let foreign = match axis {
            Axis::S => same(w[0], point[0]) && point[1] <= w[1],
            Axis::T => same(w[1], point[1]) && point[0] <= w[0],
        };
        if foreign {
            return Err(Error::OnForeignVertexLine(point[0], point[1]));
        }
    }
    Ok(line_sum(dom, spec.n(), &inp.lin, &inp.terms, node, axis, true))
}

// ---------------------------------------------------------------------------
// Flat parts

/// Co-state along a flat arc, as the limit from inside G, with the
/// derivative along the arc (`psi_t` on vertical arcs, `psi_s` on
/// horizontal ones).
#[derive(Clone, Debug)]
pub struct FlatSolution {
    pub arc: usize,
    pub nodes: Vec<usize>,
    pub psi: Vec<f64>,
    pub deriv: Vec<f64>,
}

impl FlatSolution {
    fn lookup(&self, n: usize, node: usize) -> Option<(&[f64], &[f64])> {
        self.nodes.iter().position(|&k| k == node).map(|k| (&self.psi[k * n..(k + 1) * n], &self.deriv[k * n..(k + 1) * n]))
    }
}

/// Solves the flat-part ODE along `arc`, given the value carried in from
/// the previous arc of the same straight chain (zero at a chain end).
fn flat_ode(dom: &Domain, n: usize, lin: &Linearization, terms: &FTerms, arc: usize, carried: &[f64]) -> FlatSolution {
    let kind = dom.arcs[arc].kind;
    let range = dom.arc_bnodes[arc].clone();
    // integrate from the far vertex: top end of a vertical arc, right end of
    // a horizontal one
    let order: Vec<usize> = match kind {
        ArcKind::FlatT => range.rev().collect(),
        ArcKind::FlatS => range.collect(),
        ArcKind::Oblique => unreachable!("flat ODE on an oblique arc"),
    };
    let (start_vertex, var) = match kind {
        ArcKind::FlatT => (arc + 1, 1),
        _ => (arc, 0),
    };
    let coeff = |node: usize| match kind {
        ArcKind::FlatT => lin.fp_at(node),
        _ => lin.fq_at(node),
    };
    let mut psi: Vec<f64> = carried.to_vec();
    if is_interior_vertex(dom, start_vertex) {
        for c in 0..n {
            psi[c] += terms.f0_at(start_vertex)[c];
        }
    }
    let nodes: Vec<usize> = order.iter().map(|&b| dom.bnodes[b].node.expect("flat boundary node off the grid")).collect();
    let mut all = psi.clone();
    let mut tmp = vec![0.0; n];
    for k in 1..order.len() {
        let (bp, bc) = (order[k - 1], order[k]);
        let h = (dom.bnodes[bp].p[var] - dom.bnodes[bc].p[var]).abs();
        let mut rhs_m = identity(n);
        let mut lhs_m = identity(n);
        let (cp, cc) = (coeff(nodes[k - 1]), coeff(nodes[k]));
        for e in 0..n * n {
            rhs_m[e] += 0.5 * h * cp[e];
            lhs_m[e] -= 0.5 * h * cc[e];
        }
        row_times(&psi, &rhs_m, &mut tmp);
        for c in 0..n {
            tmp[c] += 0.5 * h * (terms.f1_at(bp)[c] + terms.f1_at(bc)[c]);
        }
        psi = solve_row(&lhs_m, &tmp).expect("singular flat-part step");
        all.extend_from_slice(&psi);
    }
    let mut deriv = vec![0.0; all.len()];
    for (k, &b) in order.iter().enumerate() {
        row_times(&all[k * n..(k + 1) * n], coeff(nodes[k]), &mut tmp);
        for c in 0..n {
            deriv[k * n + c] = -(terms.f1_at(b)[c] + tmp[c]);
        }
    }
    FlatSolution { arc, nodes, psi: all, deriv }
}

/// Flat-part solutions for every flat arc, chains integrated from their far
/// vertex.
fn all_flats(dom: &Domain, n: usize, lin: &Linearization, terms: &FTerms) -> Vec<Option<FlatSolution>> {
    let na = dom.arcs.len();
    let mut out: Vec<Option<FlatSolution>> = vec![None; na];
    // horizontal chains run right to left (increasing arc index)
    for k in 0..na {
        if dom.arcs[k].kind != ArcKind::FlatS {
            continue;
        }
        let carried = match k.checked_sub(1).and_then(|p| out[p].as_ref()) {
            Some(prev) if dom.arcs[k - 1].kind == ArcKind::FlatS => prev.psi[prev.psi.len() - n..].to_vec(),
            _ => vec![0.0; n],
        };
        out[k] = Some(flat_ode(dom, n, lin, terms, k, &carried));
    }
    // vertical chains run top to bottom (decreasing arc index)
    for k in (0..na).rev() {
        if dom.arcs[k].kind != ArcKind::FlatT {
            continue;
        }
        let carried = match out.get(k + 1).and_then(|o| o.as_ref()) {
            Some(prev) if dom.arcs[k + 1].kind == ArcKind::FlatT => prev.psi[prev.psi.len() - n..].to_vec(),
            _ => vec![0.0; n],
        };
        out[k] = Some(flat_ode(dom, n, lin, terms, k, &carried));
    }
    out
}

/// Flat-part ODE along one flat arc (with the whole chain above or to the
/// right of it solved first to supply the terminal value).
pub fn flat_part_ode(dom: &Domain, spec: &ProblemSpec, state: &StateSolution, u: &[f64], arc: usize) -> Result<FlatSolution> {
    let inp = CostateInputs::new(dom, spec, state, u, VrMode::default());
    flat_with(dom, spec, &inp, arc)
}

pub fn flat_with(dom: &Domain, spec: &ProblemSpec, inp: &CostateInputs, arc: usize) -> Result<FlatSolution> {
    if arc >= dom.arcs.len() || !dom.arcs[arc].is_flat() {
        return Err(Error::MissingVertexLimit(arc));
    }
    Ok(all_flats(dom, spec.n(), &inp.lin, &inp.terms)[arc].take().unwrap())
}

// ---------------------------------------------------------------------------
// Zone sweep

/// Co-state on one region, stored on the region's own grid block.
#[derive(Clone, Debug)]
pub struct RegionCostate {
    pub region: usize,
    pub zone: usize,
    pub block: Block,
    pub psi: Vec<f64>,
    pub psi_s: Vec<f64>,
    pub psi_t: Vec<f64>,
    pub iterations: usize,
}

impl RegionCostate {
    fn at(&self, n: usize, i: usize, j: usize) -> Option<usize> {
        self.block.local(i, j).map(|k| k * n)
    }
}

#[derive(Clone, Debug)]
pub struct CostateSolution {
    pub n: usize,
    pub regions: Vec<RegionCostate>,
    pub flats: Vec<FlatSolution>,
    pub vertex_limits: Vec<VertexLimits>,
    /// Regions owning each grid node (several along region edges).
    node_regions: HashMap<usize, Vec<usize>>,
}

/// One sheet of the co-state at a node.
#[derive(Clone, Debug, PartialEq)]
pub struct Sheet {
    pub region: usize,
    pub psi: Vec<f64>,
    pub psi_s: Vec<f64>,
    pub psi_t: Vec<f64>,
}

impl CostateSolution {
    /// All one-sided values at a grid node, one per adjacent region.
    pub fn sheets(&self, dom: &Domain, node: usize) -> Vec<Sheet> {
        let n = self.n;
        let (i, j) = dom.grid.ij(node);
        self.node_regions
            .get(&node)
            .map(|rs| {
                rs.iter()
                    .map(|&r| {
                        let reg = &self.regions[r];
                        let k = reg.at(n, i, j).unwrap();
                        Sheet {
                            region: r,
                            psi: reg.psi[k..k + n].to_vec(),
                            psi_s: reg.psi_s[k..k + n].to_vec(),
                            psi_t: reg.psi_t[k..k + n].to_vec(),
                        }
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    /// Value in the region that owns the cell up and to the right of the node,
    /// falling back to the first sheet on the upper and right edges.
    pub fn value_at(&self, dom: &Domain, node: usize) -> Vec<f64> {
        let (i, j) = dom.grid.ij(node);
        let nt = dom.grid.nt();
        let owner = if i + 1 < dom.grid.ns() && j + 1 < nt { dom.zones.cell_region[i * (nt - 1) + j] } else { None };
        let sheets = self.sheets(dom, node);
        match owner.and_then(|r| sheets.iter().find(|s| s.region == r)) {
            Some(s) => s.psi.clone(),
            None => sheets.first().map(|s| s.psi.clone()).unwrap_or_else(|| vec![0.0; self.n]),
        }
    }

    /// Full-layout fields `(psi, psi_s, psi_t)` averaged over the sheets at
    /// each node.
    pub fn averaged(&self, dom: &Domain) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let n = self.n;
        let len = dom.grid.len();
        let (mut a, mut b, mut c) = (vec![0.0; len * n], vec![0.0; len * n], vec![0.0; len * n]);
        let mut count = vec![0usize; len];
        for reg in &self.regions {
            for (k, &node) in reg.block.nodes.iter().enumerate() {
                count[node] += 1;
                for e in 0..n {
                    a[node * n + e] += reg.psi[k * n + e];
                    b[node * n + e] += reg.psi_s[k * n + e];
                    c[node * n + e] += reg.psi_t[k * n + e];
                }
            }
        }
        for node in 0..len {
            if count[node] > 1 {
                let w = 1.0 / count[node] as f64;
                for e in 0..n {
                    a[node * n + e] *= w;
                    b[node * n + e] *= w;
                    c[node * n + e] *= w;
                }
            }
        }
        (a, b, c)
    }

    /// Single-valued field taking the first sheet at every node (no
    /// separation across vertex lines).
    pub fn merged(&self, dom: &Domain) -> Vec<f64> {
        let n = self.n;
        let mut out = vec![0.0; dom.grid.len() * n];
        let mut seen = vec![false; dom.grid.len()];
        for reg in &self.regions {
            for (k, &node) in reg.block.nodes.iter().enumerate() {
                if !seen[node] {
                    seen[node] = true;
                    out[node * n..(node + 1) * n].copy_from_slice(&reg.psi[k * n..(k + 1) * n]);
                }
            }
        }
        out
    }

    /// CSV `s,t,region,sheet,psi0,...` with one row per node and sheet.
    pub fn to_csv(&self, dom: &Domain) -> String {
        let n = self.n;
        let mut out = String::from("s,t,region,sheet");
        for c in 0..n {
            out.push_str(&format!(",psi{c}"));
        }
        out.push('\n');
        let mut sheet_no: HashMap<usize, usize> = HashMap::new();
        for reg in &self.regions {
            for (k, &node) in reg.block.nodes.iter().enumerate() {
                let sh = sheet_no.entry(node).or_insert(0);
                let [s, t] = dom.grid.point(node);
                out.push_str(&format!("{s:.16e},{t:.16e},{},{}", reg.region, sh));
                for c in 0..n {
                    out.push_str(&format!(",{:.16e}", reg.psi[k * n + c]));
                }
                out.push('\n');
                *sh += 1;
            }
        }
        out
    }
}

/// Runs the zone sweep with the default `V_r` handling.
pub fn sweep_costate(dom: &Domain, spec: &ProblemSpec, state: &StateSolution, u: &[f64]) -> Result<CostateSolution> {
    let inp = CostateInputs::new(dom, spec, state, u, VrMode::default());
    sweep_with(dom, spec, &inp)
}

fn picard_opts(spec: &ProblemSpec) -> PicardOptions {
    PicardOptions { tol: 1e-11, max_iter: 300, rho: None, lipschitz_hint: spec.dynamics.lipschitz_hint }
}

fn kernel_at(n: usize, lin: &Linearization, terms: &FTerms, node: usize, psi: &[f64], p: &[f64], q: &[f64], out: &mut [f64]) {
    let mut t = vec![0.0; n];
    row_times(psi, lin.a_prime_at(node), out);
    row_times(p, lin.fp_at(node), &mut t);
    for c in 0..n {
        out[c] += terms.f_at(node)[c] - t[c];
    }
    row_times(q, lin.fq_at(node), &mut t);
    for c in 0..n {
        out[c] -= t[c];
    }
}

fn solve_triangle(dom: &Domain, spec: &ProblemSpec, inp: &CostateInputs, rid: usize) -> Result<RegionCostate> {
    let n = spec.n();
    let nn = n * n;
    let g = &dom.grid;
    let z = &dom.zones;
    let reg = &z.regions[rid];
    let RegionKind::Tri { j: arc } = reg.kind else { unreachable!() };
    let (i0, i1) = (z.sigma_idx[reg.p], z.sigma_idx[reg.p + 1]);
    let (j0, jt) = (z.tau_idx[reg.q], z.tau_idx[reg.q + 1]);
    let tops: Vec<usize> = (i0..=i1).map(|i| g.col_top[i].min(jt)).collect();
    let block = Block::new(g, i0, i1, j0, tops);
    let terms = &inp.terms;
    let lin = &inp.lin;

    // arc nodes by column and row, cumulative integral of F1
    let range = dom.arc_bnodes[arc].clone();
    let mut by_col = HashMap::new();
    let mut by_row = HashMap::new();
    let mut cum = vec![0.0; range.len() * n];
    for (k, b) in range.clone().enumerate() {
        let bn = &dom.bnodes[b];
        if let Some(i) = bn.col {
            by_col.insert(i, b);
        }
        if let Some(j) = bn.row {
            by_row.insert(j, b);
        }
        if k > 0 {
            let h = 0.5 * (bn.mu - dom.bnodes[b - 1].mu);
            for c in 0..n {
                cum[k * n + c] = cum[(k - 1) * n + c] + h * (terms.f1_at(b - 1)[c] + terms.f1_at(b)[c]);
            }
        }
    }
    let col_b = |i: usize| -> Result<usize> {
        by_col.get(&i).copied().ok_or_else(|| Error::NaNEncountered(format!("no arc node above column {i}")))
    };
    let row_b = |j: usize| -> Result<usize> {
        by_row.get(&j).copied().ok_or_else(|| Error::NaNEncountered(format!("no arc node right of row {j}")))
    };
    let inv = |v: f64| if v.abs() < 1e-6 { 0.0 } else { 1.0 / v };

    let mut psi0 = Vec::with_capacity(block.len() * n);
    let mut p0 = Vec::with_capacity(block.len() * n);
    let mut q0 = Vec::with_capacity(block.len() * n);
    for &node in &block.nodes {
        let (i, j) = g.ij(node);
        let (bc, br) = (col_b(i)?, row_b(j)?);
        let (kc, kr) = (bc - range.start, br - range.start);
        let (n2, n1) = (dom.bnodes[bc].normal[1], dom.bnodes[br].normal[0]);
        for c in 0..n {
            psi0.push(cum[kc * n + c] - cum[kr * n + c]);
            p0.push(-terms.f1_at(bc)[c] * inv(n2));
            q0.push(-terms.f1_at(br)[c] * inv(n1));
        }
    }

    // kernel at the arc: psi = 0, psi_s = -F1/n2, psi_t = -F1/n1
    let nb = dom.bnodes.len();
    let mut arc_g = vec![0.0; nb * n];
    let fp_b = dom.arc_values(&lin.fp, nn);
    let fq_b = dom.arc_values(&lin.fq, nn);
    let (mut tp, mut tq) = (vec![0.0; n], vec![0.0; n]);
    for b in range.clone() {
        let nv = dom.bnodes[b].normal;
        let f1 = terms.f1_at(b);
        let ps: Vec<f64> = f1.iter().map(|v| -v * inv(nv[1])).collect();
        let pt: Vec<f64> = f1.iter().map(|v| -v * inv(nv[0])).collect();
        row_times(&ps, &fp_b[b * nn..(b + 1) * nn], &mut tp);
        row_times(&pt, &fq_b[b * nn..(b + 1) * nn], &mut tq);
        for c in 0..n {
            arc_g[b * n + c] = terms.f_bnd[b * n + c] - tp[c] - tq[c];
        }
    }
    let col_tail = (i0..=i1)
        .map(|i| {
            let b = by_col[&i];
            let bn = &dom.bnodes[b];
            let top = block.tops[i - i0];
            (bn.node.is_none()).then(|| (b, bn.p[1] - g.t[top]))
        })
        .collect();
    let row_tail = (j0..=block.jmax())
        .map(|j| {
            let b = by_row[&j];
            let bn = &dom.bnodes[b];
            let end = block.row_end[j - j0];
            (bn.node.is_none()).then(|| (b, bn.p[0] - g.s[end]))
        })
        .collect();
    let kernel = |node: usize, psi: &[f64], p: &[f64], q: &[f64], out: &mut [f64]| kernel_at(n, lin, terms, node, psi, p, q, out);
    let sys = VolterraSystem {
        grid: g,
        block: &block,
        dim: n,
        direction: Direction::Backward,
        psi0,
        p0,
        q0,
        kernel: &kernel,
        clip: Some(Clip { dom, arc_g: &arc_g, col_tail, row_tail }),
    };
    let sol = picard_solve(&sys, &picard_opts(spec)).map_err(|e| e.in_region(format!("triangle D_{arc}")))?;
    Ok(RegionCostate { region: rid, zone: reg.zone, block, psi: sol.psi, psi_s: sol.p, psi_t: sol.q, iterations: sol.iterations })
}

struct SweepShared<'a> {
    dom: &'a Domain,
    spec: &'a ProblemSpec,
    inp: &'a CostateInputs,
    flats: &'a [Option<FlatSolution>],
}

fn solve_rect(sh: &SweepShared, solved: &[Option<RegionCostate>], rid: usize) -> Result<RegionCostate> {
    let (dom, spec, inp) = (sh.dom, sh.spec, sh.inp);
    let n = spec.n();
    let g = &dom.grid;
    let z = &dom.zones;
    let reg = &z.regions[rid];
    let (il, ir) = (z.sigma_idx[reg.p], z.sigma_idx[reg.p + 1]);
    let (jb, jt) = (z.tau_idx[reg.q], z.tau_idx[reg.q + 1]);
    let lin = &inp.lin;
    let terms = &inp.terms;
    let need = |other: usize| -> Result<&RegionCostate> {
        solved[other].as_ref().ok_or(Error::ZoneOrderViolation { region: rid, needs: other })
    };

    // top edge: psi and psi_s at row jt for columns il..=ir
    let mut top_psi = vec![0.0; (ir - il + 1) * n];
    let mut top_p = vec![0.0; (ir - il + 1) * n];
    let mut tmp = vec![0.0; n];
    if let Some(above) = z.region_at_lattice(reg.p, reg.q + 1) {
        let a = need(above)?;
        for i in il..=ir {
            let k = a.at(n, i, jt).ok_or(Error::ZoneOrderViolation { region: rid, needs: above })?;
            let node = g.idx(i, jt);
            let om = line_sum(dom, n, lin, terms, node, Axis::S, true);
            row_times(&om, lin.fq_at(node), &mut tmp);
            for c in 0..n {
                top_psi[(i - il) * n + c] = a.psi[k + c] + om[c];
                top_p[(i - il) * n + c] = a.psi_s[k + c] - tmp[c];
            }
        }
    } else {
        let arc = dom.col_arc[il];
        let fl = sh.flats[arc]
            .as_ref()
            .filter(|_| dom.arcs[arc].kind == ArcKind::FlatS && same(dom.arcs[arc].endpoints[0][1], g.t[jt]))
            .ok_or(Error::ZoneOrderViolation { region: rid, needs: usize::MAX })?;
        for i in il..=ir {
            let (v, d) = fl.lookup(n, g.idx(i, jt)).ok_or(Error::MissingVertexLimit(arc))?;
            top_psi[(i - il) * n..(i - il + 1) * n].copy_from_slice(v);
            top_p[(i - il) * n..(i - il + 1) * n].copy_from_slice(d);
        }
    }

    // right edge: psi and psi_t at column ir for rows jb..=jt
    let mut right_psi = vec![0.0; (jt - jb + 1) * n];
    let mut right_q = vec![0.0; (jt - jb + 1) * n];
    if let Some(right) = z.region_at_lattice(reg.p + 1, reg.q) {
        let a = need(right)?;
        for j in jb..=jt {
            let k = a.at(n, ir, j).ok_or(Error::ZoneOrderViolation { region: rid, needs: right })?;
            let node = g.idx(ir, j);
            let om = line_sum(dom, n, lin, terms, node, Axis::T, true);
            row_times(&om, lin.fp_at(node), &mut tmp);
            for c in 0..n {
                right_psi[(j - jb) * n + c] = a.psi[k + c] + om[c];
                right_q[(j - jb) * n + c] = a.psi_t[k + c] - tmp[c];
            }
        }
    } else {
        let arc = dom.row_arc[jb];
        let fl = sh.flats[arc]
            .as_ref()
            .filter(|_| dom.arcs[arc].kind == ArcKind::FlatT && same(dom.arcs[arc].endpoints[0][0], g.s[ir]))
            .ok_or(Error::ZoneOrderViolation { region: rid, needs: usize::MAX })?;
        for j in jb..=jt {
            let (v, d) = fl.lookup(n, g.idx(ir, j)).ok_or(Error::MissingVertexLimit(arc))?;
            right_psi[(j - jb) * n..(j - jb + 1) * n].copy_from_slice(v);
            right_q[(j - jb) * n..(j - jb + 1) * n].copy_from_slice(d);
        }
    }

    let block = Block::rect(g, il, ir, jb, jt);
    let corner = &right_psi[(jt - jb) * n..];
    let mut psi0 = Vec::with_capacity(block.len() * n);
    let mut p0 = Vec::with_capacity(block.len() * n);
    let mut q0 = Vec::with_capacity(block.len() * n);
    for &node in &block.nodes {
        let (i, j) = g.ij(node);
        for c in 0..n {
            psi0.push(top_psi[(i - il) * n + c] + right_psi[(j - jb) * n + c] - corner[c]);
            p0.push(top_p[(i - il) * n + c]);
            q0.push(right_q[(j - jb) * n + c]);
        }
    }
    let kernel = |node: usize, psi: &[f64], p: &[f64], q: &[f64], out: &mut [f64]| kernel_at(n, lin, terms, node, psi, p, q, out);
    let sys = VolterraSystem {
        grid: g,
        block: &block,
        dim: n,
        direction: Direction::Backward,
        psi0,
        p0,
        q0,
        kernel: &kernel,
        clip: None,
    };
    let RegionKind::Rect { j, k } = reg.kind else { unreachable!() };
    let sol = picard_solve(&sys, &picard_opts(spec)).map_err(|e| e.in_region(format!("rectangle Q_{j},{k}")))?;
    Ok(RegionCostate { region: rid, zone: reg.zone, block, psi: sol.psi, psi_s: sol.p, psi_t: sol.q, iterations: sol.iterations })
}

pub fn sweep_with(dom: &Domain, spec: &ProblemSpec, inp: &CostateInputs) -> Result<CostateSolution> {
    let n = spec.n();
    let z = &dom.zones;
    let flats = all_flats(dom, n, &inp.lin, &inp.terms);
    let sh = SweepShared { dom, spec, inp, flats: &flats };
    let mut solved: Vec<Option<RegionCostate>> = vec![None; z.regions.len()];
    let max_zone = z.regions.iter().map(|r| r.zone).max().unwrap_or(0);
    for zone in 0..=max_zone {
        let ids: Vec<usize> = z.regions.iter().filter(|r| r.zone == zone).map(|r| r.id).collect();
        let results: Vec<Result<RegionCostate>> = ids
            .par_iter()
            .map(|&rid| if z.regions[rid].is_tri() { solve_triangle(dom, spec, inp, rid) } else { solve_rect(&sh, &solved, rid) })
            .collect();
        for r in results {
            let r = r?;
            let id = r.region;
            solved[id] = Some(r);
        }
    }
    let regions: Vec<RegionCostate> = solved.into_iter().map(|r| r.unwrap()).collect();
    let mut node_regions: HashMap<usize, Vec<usize>> = HashMap::new();
    for reg in &regions {
        for &node in &reg.block.nodes {
            node_regions.entry(node).or_default().push(reg.region);
        }
    }
    let vertex_limits = (0..dom.vertices.len()).map(|r| vertex_limits_with(dom, spec, inp, r)).collect::<Result<Vec<_>>>()?;
    Ok(CostateSolution { n, regions, flats: flats.into_iter().flatten().collect(), vertex_limits, node_regions })
}

// ---------------------------------------------------------------------------
// Residual of the Hamiltonian equation

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct PdeResidual {
    pub sup: f64,
    pub l2: f64,
    pub nodes: usize,
}

fn residual_over<'a>(
    dom: &Domain,
    n: usize,
    inp: &CostateInputs,
    centers: impl Iterator<Item = (usize, usize)>,
    psi: impl Fn(usize, usize) -> Option<&'a [f64]>,
) -> PdeResidual {
    let g = &dom.grid;
    let (mut sup, mut acc, mut count) = (0.0_f64, 0.0, 0usize);
    let mut out = vec![0.0; n];
    for (i, j) in centers {
        if i == 0 || j == 0 || i + 1 >= g.ns() || j + 1 >= g.nt() {
            continue;
        }
        let mut vals = [[None; 3]; 3];
        let mut ok = true;
        for a in 0..3 {
            for b in 0..3 {
                vals[a][b] = psi(i + a - 1, j + b - 1);
                ok &= vals[a][b].is_some();
            }
        }
        if !ok {
            continue;
        }
        let ws = diff_weights3([g.s[i - 1], g.s[i], g.s[i + 1]], g.s[i]);
        let wt = diff_weights3([g.t[j - 1], g.t[j], g.t[j + 1]], g.t[j]);
        let v = |a: usize, b: usize, c: usize| vals[a][b].unwrap()[c];
        let center: Vec<f64> = (0..n).map(|c| v(1, 1, c)).collect();
        let ps: Vec<f64> = (0..n).map(|c| (0..3).map(|a| ws[a] * v(a, 1, c)).sum()).collect();
        let pt: Vec<f64> = (0..n).map(|c| (0..3).map(|b| wt[b] * v(1, b, c)).sum()).collect();
        let pst: Vec<f64> = (0..n).map(|c| (0..3).map(|a| (0..3).map(|b| ws[a] * wt[b] * v(a, b, c)).sum::<f64>()).sum()).collect();
        let node = g.idx(i, j);
        kernel_at(n, &inp.lin, &inp.terms, node, &center, &ps, &pt, &mut out);
        let w = 0.25 * (g.s[i + 1] - g.s[i - 1]) * (g.t[j + 1] - g.t[j - 1]);
        for c in 0..n {
            let r = (pst[c] - out[c]).abs();
            sup = sup.max(r);
            acc += w * r * r;
        }
        count += 1;
    }
    PdeResidual { sup, l2: acc.sqrt(), nodes: count }
}

/// Finite-difference residual of the Hamiltonian equation, evaluated inside
/// each region on its own sheet.
pub fn verify_hamiltonian_pde(dom: &Domain, spec: &ProblemSpec, inp: &CostateInputs, costate: &CostateSolution) -> PdeResidual {
    let n = spec.n();
    let g = &dom.grid;
    let mut total = PdeResidual { sup: 0.0, l2: 0.0, nodes: 0 };
    let mut l2sq = 0.0;
    for reg in &costate.regions {
        let b = &reg.block;
        let centers = b.nodes.iter().map(|&k| g.ij(k)).filter(|&(i, j)| {
            // interior nodes of the region off its vertex lines
            dom.grid.mask[g.idx(i, j)] == NodeKind::Inside && !dom.on_vertex_line(g.point(g.idx(i, j)))
        });
        let r = residual_over(dom, n, inp, centers, |i, j| b.local(i, j).map(|k| &reg.psi[k * n..(k + 1) * n]));
        total.sup = total.sup.max(r.sup);
        l2sq += r.l2 * r.l2;
        total.nodes += r.nodes;
    }
    total.l2 = l2sq.sqrt();
    total
}

/// The same residual on a single-valued field over all interior nodes,
/// including stencils that straddle vertex lines.
pub fn pde_residual_single_valued(dom: &Domain, spec: &ProblemSpec, inp: &CostateInputs, field: &[f64]) -> PdeResidual {
    let n = spec.n();
    let g = &dom.grid;
    let centers = g.inside_nodes().filter(|&(i, j)| g.mask[g.idx(i, j)] == NodeKind::Inside);
    residual_over(dom, n, inp, centers, |i, j| {
        (i < g.ns() && j < g.nt() && g.mask[g.idx(i, j)].in_domain()).then(|| &field[g.idx(i, j) * n..(g.idx(i, j) + 1) * n])
    })
}

/// Cells of a region; exposed for the cost assembly of later modules.
pub fn region_of_cell(dom: &Domain, i: usize, j: usize) -> Option<usize> {
    if dom.cell(i, j) == CellKind::Outside {
        return None;
    }
    dom.zones.cell_region[i * (dom.grid.nt() - 1) + j]
}

#[cfg(test)]
mod tests;
