//! Matrix Riemann function of the linearized dynamics: the forward family
//! `R(., ., base)` and the adjoint family `R(target, ., .)`, the line
//! restrictions `rho1`, `rho2` and the variation representation.
//!
//! Families are anchored at grid nodes and stored block-locally, `n * n`
//! row-major values per node.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};
use crate::forward::{picard_solve, Block, Direction, Linearization, PicardOptions, VolterraSystem};
use crate::geometry::{Domain, Point};
use crate::numeric::{identity, mat_mul, solve_mat};
use crate::problem::ProblemSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Orientation {
    /// `R(s, t, base)` for `(s, t) >= base`.
    Forward,
    /// `R(target, s, t)` for `(s, t) <= target`.
    Adjoint,
}

#[derive(Clone, Debug)]
pub struct RiemannFamily {
    pub n: usize,
    pub base: usize,
    pub orientation: Orientation,
    pub block: Block,
    pub values: Vec<f64>,
    /// Partials in the varying s and t arguments.
    pub d_s: Vec<f64>,
    pub d_t: Vec<f64>,
    pub iterations: usize,
}

impl RiemannFamily {
    /// Matrix at a grid node, `None` outside the support (where the family
    /// is zero by convention).
    pub fn at(&self, node: usize, grid: &crate::geometry::Grid) -> Option<&[f64]> {
        let (i, j) = grid.ij(node);
        let nn = self.n * self.n;
        self.block.local(i, j).map(|k| &self.values[k * nn..(k + 1) * nn])
    }

    /// Value with the zero convention applied.
    pub fn value(&self, node: usize, grid: &crate::geometry::Grid) -> Vec<f64> {
        self.at(node, grid).map(|v| v.to_vec()).unwrap_or_else(|| vec![0.0; self.n * self.n])
    }

    /// CSV of `s,t,R[0][0],...` over the support.
    pub fn probe_csv(&self, grid: &crate::geometry::Grid) -> String {
        let nn = self.n * self.n;
        let mut out = String::from("s,t");
        for i in 0..self.n {
            for j in 0..self.n {
                out.push_str(&format!(",r{i}{j}"));
            }
        }
        out.push('\n');
        for (k, &node) in self.block.nodes.iter().enumerate() {
            let [s, t] = grid.point(node);
            out.push_str(&format!("{s:.16e},{t:.16e}"));
            for v in &self.values[k * nn..(k + 1) * nn] {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Grid node at `p`; `OutsideDomain` outside G, `NotGridNode` off the grid.
pub fn node_at(dom: &Domain, p: Point) -> Result<usize> {
    if !dom.contains(p) {
        return Err(Error::OutsideDomain(p[0], p[1]));
    }
    match (dom.grid.s_index(p[0]), dom.grid.t_index(p[1])) {
        (Some(i), Some(j)) if dom.grid.inside(i, j) => Ok(dom.grid.idx(i, j)),
        _ => Err(Error::NotGridNode(p[0], p[1])),
    }
}

/// `X = C M^{-1}`.
fn solve_right(m: &[f64], c: &[f64], n: usize) -> Vec<f64> {
    let mt = transpose(m, n);
    let ct = transpose(c, n);
    transpose(&solve_mat(&mt, &ct, n).expect("singular trapezoid step"), n)
}

fn transpose(m: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[j * n + i] = m[i * n + j];
        }
    }
    out
}

fn axpy_eye(alpha: f64, a: &[f64], n: usize) -> Vec<f64> {
    let mut out: Vec<f64> = a.iter().map(|v| alpha * v).collect();
    for i in 0..n {
        out[i * n + i] += 1.0;
    }
    out
}

/// Trapezoid solve of `dY/dz = A(z) Y` (left) or `dY/dz = Y A(z)` (right)
/// over nodes `z[0..]` starting from `Y(z[0]) = I`; `z` may decrease.
pub fn propagate(coeffs: &[&[f64]], z: &[f64], n: usize, left: bool) -> Vec<Vec<f64>> {
    let mut out = vec![identity(n)];
    let mut tmp = vec![0.0; n * n];
    for k in 1..z.len() {
        let h = z[k] - z[k - 1];
        let prev = out.last().unwrap();
        let rhs_m = axpy_eye(0.5 * h, coeffs[k - 1], n);
        let lhs_m = axpy_eye(-0.5 * h, coeffs[k], n);
        let next = if left {
            mat_mul(&rhs_m, prev, n, &mut tmp);
            solve_mat(&lhs_m, &tmp, n).expect("singular trapezoid step")
        } else {
            mat_mul(prev, &rhs_m, n, &mut tmp);
            solve_right(&lhs_m, &tmp, n)
        };
        out.push(next);
    }
    out
}

fn picard_opts(spec: &ProblemSpec) -> PicardOptions {
    PicardOptions { tol: 1e-12, max_iter: 200, rho: None, lipschitz_hint: spec.dynamics.lipschitz_hint }
}

/// Forward family `R(., ., base)` on `{(s, t) >= base} ∩ G`.
pub fn riemann_forward(dom: &Domain, spec: &ProblemSpec, lin: &Linearization, base: Point) -> Result<RiemannFamily> {
    let node = node_at(dom, base)?;
    forward_at(dom, spec, lin, node)
}

pub fn forward_at(dom: &Domain, spec: &ProblemSpec, lin: &Linearization, node: usize) -> Result<RiemannFamily> {
    let n = spec.n();
    let nn = n * n;
    let g = &dom.grid;
    let (i0, j0) = g.ij(node);
    let block = Block::quadrant(g, i0, j0);
    // characteristic lines: t = t0 (d/ds R = f_q R), s = s0 (d/dt R = f_p R)
    let row_nodes: Vec<usize> = (i0..=block.i1).map(|i| g.idx(i, j0)).collect();
    let col_nodes: Vec<usize> = (j0..=block.tops[0]).map(|j| g.idx(i0, j)).collect();
    let fq_row: Vec<&[f64]> = row_nodes.iter().map(|&k| lin.fq_at(k)).collect();
    let fp_col: Vec<&[f64]> = col_nodes.iter().map(|&k| lin.fp_at(k)).collect();
    let rb = propagate(&fq_row, &g.s[i0..=block.i1], n, true);
    let rl = propagate(&fp_col, &g.t[j0..=block.tops[0]], n, true);
    let eye = identity(n);
    let mut psi0 = Vec::with_capacity(block.len() * nn);
    let mut p0 = Vec::with_capacity(block.len() * nn);
    let mut q0 = Vec::with_capacity(block.len() * nn);
    let mut tmp = vec![0.0; nn];
    for &k in &block.nodes {
        let (i, j) = g.ij(k);
        let (b, l) = (&rb[i - i0], &rl[j - j0]);
        for c in 0..nn {
            psi0.push(b[c] + l[c] - eye[c]);
        }
        mat_mul(lin.fq_at(g.idx(i, j0)), b, n, &mut tmp);
        p0.extend_from_slice(&tmp);
        mat_mul(lin.fp_at(g.idx(i0, j)), l, n, &mut tmp);
        q0.extend_from_slice(&tmp);
    }
    let kernel = |k: usize, r: &[f64], p: &[f64], q: &[f64], out: &mut [f64]| {
        let mut t = vec![0.0; nn];
        mat_mul(lin.fx_at(k), r, n, out);
        mat_mul(lin.fp_at(k), p, n, &mut t);
        out.iter_mut().zip(&t).for_each(|(o, v)| *o += v);
        mat_mul(lin.fq_at(k), q, n, &mut t);
        out.iter_mut().zip(&t).for_each(|(o, v)| *o += v);
    };
    let sys = VolterraSystem {
        grid: g,
        block: &block,
        dim: nn,
        direction: Direction::Forward,
        psi0,
        p0,
        q0,
        kernel: &kernel,
        clip: None,
    };
    let sol = picard_solve(&sys, &picard_opts(spec))?;
    Ok(RiemannFamily {
        n,
        base: node,
        orientation: Orientation::Forward,
        block,
        values: sol.psi,
        d_s: sol.p,
        d_t: sol.q,
        iterations: sol.iterations,
    })
}

/// Adjoint family `R(target, ., .)` on `W(target)`.
pub fn riemann_adjoint(dom: &Domain, spec: &ProblemSpec, lin: &Linearization, target: Point) -> Result<RiemannFamily> {
    let node = node_at(dom, target)?;
    adjoint_at(dom, spec, lin, node)
}

pub fn adjoint_at(dom: &Domain, spec: &ProblemSpec, lin: &Linearization, node: usize) -> Result<RiemannFamily> {
    let n = spec.n();
    let nn = n * n;
    let g = &dom.grid;
    let (i1, j1) = g.ij(node);
    let block = Block::rect(g, 0, i1, 0, j1);
    // top line t = t1 (d/ds R = -R f_q), right line s = s1 (d/dt R = -R f_p), integrated backward
    let row_nodes: Vec<usize> = (0..=i1).rev().map(|i| g.idx(i, j1)).collect();
    let col_nodes: Vec<usize> = (0..=j1).rev().map(|j| g.idx(i1, j)).collect();
    let neg = |m: &[f64]| m.iter().map(|v| -v).collect::<Vec<f64>>();
    let fq_row: Vec<Vec<f64>> = row_nodes.iter().map(|&k| neg(lin.fq_at(k))).collect();
    let fp_col: Vec<Vec<f64>> = col_nodes.iter().map(|&k| neg(lin.fp_at(k))).collect();
    let zs: Vec<f64> = (0..=i1).rev().map(|i| g.s[i]).collect();
    let zt: Vec<f64> = (0..=j1).rev().map(|j| g.t[j]).collect();
    let rt = propagate(&fq_row.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), &zs, n, false);
    let rr = propagate(&fp_col.iter().map(|v| v.as_slice()).collect::<Vec<_>>(), &zt, n, false);
    let eye = identity(n);
    let mut psi0 = Vec::with_capacity(block.len() * nn);
    let mut p0 = Vec::with_capacity(block.len() * nn);
    let mut q0 = Vec::with_capacity(block.len() * nn);
    let mut tmp = vec![0.0; nn];
    for &k in &block.nodes {
        let (i, j) = g.ij(k);
        let (top, right) = (&rt[i1 - i], &rr[j1 - j]);
        for c in 0..nn {
            psi0.push(top[c] + right[c] - eye[c]);
        }
        mat_mul(top, lin.fq_at(g.idx(i, j1)), n, &mut tmp);
        p0.extend(tmp.iter().map(|v| -v));
        mat_mul(right, lin.fp_at(g.idx(i1, j)), n, &mut tmp);
        q0.extend(tmp.iter().map(|v| -v));
    }
    let kernel = |k: usize, r: &[f64], p: &[f64], q: &[f64], out: &mut [f64]| {
        let mut t = vec![0.0; nn];
        mat_mul(r, lin.a_prime_at(k), n, out);
        mat_mul(p, lin.fp_at(k), n, &mut t);
        out.iter_mut().zip(&t).for_each(|(o, v)| *o -= v);
        mat_mul(q, lin.fq_at(k), n, &mut t);
        out.iter_mut().zip(&t).for_each(|(o, v)| *o -= v);
    };
    let sys = VolterraSystem {
        grid: g,
        block: &block,
        dim: nn,
        direction: Direction::Backward,
        psi0,
        p0,
        q0,
        kernel: &kernel,
        clip: None,
    };
    let sol = picard_solve(&sys, &picard_opts(spec))?;
    Ok(RiemannFamily {
        n,
        base: node,
        orientation: Orientation::Adjoint,
        block,
        values: sol.psi,
        d_s: sol.p,
        d_t: sol.q,
        iterations: sol.iterations,
    })
}

/// `rho1(tau) = R(s, tau, s, t)` for `tau` from `t` up to the boundary and
/// `rho2(sigma) = R(sigma, t, s, t)` from `s` to the boundary, each as
/// `(coordinate, matrix)`; the last entry sits on the boundary when it is
/// not a grid node.
#[derive(Clone, Debug)]
pub struct AuxCostates {
    pub rho1: Vec<(f64, Vec<f64>)>,
    pub rho2: Vec<(f64, Vec<f64>)>,
}

pub fn aux_costates(dom: &Domain, spec: &ProblemSpec, lin: &Linearization, target: Point) -> Result<AuxCostates> {
    let node = node_at(dom, target)?;
    Ok(aux_at(dom, spec.n(), lin, node))
}

pub fn aux_at(dom: &Domain, n: usize, lin: &Linearization, node: usize) -> AuxCostates {
    let g = &dom.grid;
    let (i, j) = g.ij(node);
    let [s, t] = g.point(node);
    let line = |nodes: Vec<usize>, mut z: Vec<f64>, end: f64, which: fn(&Linearization, usize) -> &[f64]| {
        let mut coeffs: Vec<&[f64]> = nodes.iter().map(|&k| which(lin, k)).collect();
        if end > *z.last().unwrap() + 1e-12 {
            z.push(end);
            coeffs.push(coeffs[coeffs.len() - 1]);
        }
        let vals = propagate(&coeffs, &z, n, true);
        z.into_iter().zip(vals).collect::<Vec<_>>()
    };
    let col: Vec<usize> = (j..=g.col_top[i]).map(|jj| g.idx(i, jj)).collect();
    let zt: Vec<f64> = (j..=g.col_top[i]).map(|jj| g.t[jj]).collect();
    let row: Vec<usize> = (i..=g.row_right[j]).map(|ii| g.idx(ii, j)).collect();
    let zs: Vec<f64> = (i..=g.row_right[j]).map(|ii| g.s[ii]).collect();
    AuxCostates {
        rho1: line(col, zt, dom.top(s), |l, k| l.fp_at(k)),
        rho2: line(row, zs, dom.right(t), |l, k| l.fq_at(k)),
    }
}

/// `delta x(target) = ∬_{W(target)} R(target, sigma, tau) f_u du dA`.
pub fn variation_via_riemann(dom: &Domain, spec: &ProblemSpec, lin: &Linearization, du: &[f64], target: Point) -> Result<Vec<f64>> {
    let fam = riemann_adjoint(dom, spec, lin, target)?;
    Ok(variation_from_family(dom, spec, lin, &fam, du))
}

pub fn variation_from_family(dom: &Domain, spec: &ProblemSpec, lin: &Linearization, fam: &RiemannFamily, du: &[f64]) -> Vec<f64> {
    let (n, m) = (spec.n(), spec.m());
    let nn = n * n;
    let g = &dom.grid;
    let b = &fam.block;
    let mut out = vec![0.0; n];
    let mut fdu = vec![0.0; n];
    for (k, &node) in b.nodes.iter().enumerate() {
        let (i, j) = g.ij(node);
        let ws = trap_weight(&g.s, i, b.i0, b.i1);
        let wt = trap_weight(&g.t, j, b.j0, b.tops[0]);
        if ws * wt == 0.0 {
            continue;
        }
        crate::forward::mat_vec(lin.fu_at(node), &du[node * m..(node + 1) * m], &mut fdu);
        let r = &fam.values[k * nn..(k + 1) * nn];
        for a in 0..n {
            out[a] += ws * wt * (0..n).map(|c| r[a * n + c] * fdu[c]).sum::<f64>();
        }
    }
    out
}

fn trap_weight(z: &[f64], k: usize, lo: usize, hi: usize) -> f64 {
    if lo == hi {
        return 0.0;
    }
    let left = if k > lo { z[k] - z[k - 1] } else { 0.0 };
    let right = if k < hi { z[k + 1] - z[k] } else { 0.0 };
    0.5 * (left + right)
}

/// Families keyed by anchor node and orientation, computed on demand.
#[derive(Default)]
pub struct RiemannCache {
    map: Mutex<HashMap<(Orientation, usize), Arc<RiemannFamily>>>,
}

impl RiemannCache {
    pub fn new() -> RiemannCache {
        RiemannCache::default()
    }

    pub fn get(&self, dom: &Domain, spec: &ProblemSpec, lin: &Linearization, orientation: Orientation, node: usize) -> Result<Arc<RiemannFamily>> {
        if let Some(f) = self.map.lock().unwrap().get(&(orientation, node)) {
            return Ok(f.clone());
        }
        let fam = Arc::new(match orientation {
            Orientation::Forward => forward_at(dom, spec, lin, node)?,
            Orientation::Adjoint => adjoint_at(dom, spec, lin, node)?,
        });
        self.map.lock().unwrap().insert((orientation, node), fam.clone());
        Ok(fam)
    }

    pub fn len(&self) -> usize {
        self.map.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests;
