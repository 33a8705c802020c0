//! State solve of `x_st = f(s, t, x, x_s, x_t, u)` with characteristic data
//! on the axes, and the linearized (variational) problem.
//!
//! Grid fields use the full grid layout (`dim` values per node, zero
//! outside G); controls carry `m` values per node.

mod picard;
#[cfg(test)]
mod tests;

pub use picard::{
    choose_rho, contraction_bound, picard_solve, weighted_norm, Block, Clip, Direction, IterRecord, Kernel,
    PicardOptions, PicardSolution, VolterraSystem, WeightedNorm,
};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::problem::{Args, ChainFactors, ProblemSpec};

#[derive(Clone, Debug)]
pub struct StateSolution {
    pub n: usize,
    pub x: Vec<f64>,
    pub x_s: Vec<f64>,
    pub x_t: Vec<f64>,
    pub x_st: Vec<f64>,
    pub iterations: usize,
    pub residual_history: Vec<IterRecord>,
    pub rho: f64,
}

impl StateSolution {
    pub fn at(&self, node: usize) -> &[f64] {
        &self.x[node * self.n..(node + 1) * self.n]
    }

    pub fn args<'a>(&'a self, dom: &Domain, u: &'a [f64], m: usize, node: usize) -> Args<'a> {
        let n = self.n;
        let [s, t] = dom.grid.point(node);
        Args {
            s,
            t,
            x: &self.x[node * n..(node + 1) * n],
            p: &self.x_s[node * n..(node + 1) * n],
            q: &self.x_t[node * n..(node + 1) * n],
            u: &u[node * m..(node + 1) * m],
        }
    }
}

fn check_control(dom: &Domain, spec: &ProblemSpec, u: &[f64]) -> Result<()> {
    if u.len() != dom.grid.len() * spec.m() {
        return Err(Error::DimensionMismatch(format!(
            "control field has {} values, grid needs {}",
            u.len(),
            dom.grid.len() * spec.m()
        )));
    }
    Ok(())
}

/// Scatters a block-local field into the full grid layout.
pub fn scatter(block: &Block, len: usize, dim: usize, local: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; len * dim];
    for (k, &node) in block.nodes.iter().enumerate() {
        out[node * dim..(node + 1) * dim].copy_from_slice(&local[k * dim..(k + 1) * dim]);
    }
    out
}

/// Gathers a full-layout field into block-local order.
pub fn gather(block: &Block, dim: usize, full: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(block.len() * dim);
    for &node in &block.nodes {
        out.extend_from_slice(&full[node * dim..(node + 1) * dim]);
    }
    out
}

/// Solves the state problem on G for the control field `u`.
pub fn solve_state(dom: &Domain, spec: &ProblemSpec, u: &[f64], tol: f64, max_iter: usize) -> Result<StateSolution> {
    check_control(dom, spec, u)?;
    let (n, m) = (spec.n(), spec.m());
    let g = &dom.grid;
    let block = Block::quadrant(g, 0, 0);
    let data = &spec.data;
    let mut psi0 = Vec::with_capacity(block.len() * n);
    let mut p0 = Vec::with_capacity(block.len() * n);
    let mut q0 = Vec::with_capacity(block.len() * n);
    let (mut a, mut b, mut da, mut db) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for &node in &block.nodes {
        let [s, t] = g.point(node);
        (data.x1)(s, &mut a);
        (data.x2)(t, &mut b);
        data.x1_prime(s, &mut da);
        data.x2_prime(t, &mut db);
        for k in 0..n {
            psi0.push(a[k] + b[k] - data.x0[k]);
        }
        p0.extend_from_slice(&da);
        q0.extend_from_slice(&db);
    }
    let f = &spec.dynamics;
    let kernel = |node: usize, x: &[f64], p: &[f64], q: &[f64], out: &mut [f64]| {
        let [s, t] = g.point(node);
        f.eval(&Args { s, t, x, p, q, u: &u[node * m..(node + 1) * m] }, out);
    };
    let sys = VolterraSystem {
        grid: g,
        block: &block,
        dim: n,
        direction: Direction::Forward,
        psi0,
        p0,
        q0,
        kernel: &kernel,
        clip: None,
    };
    let opts = PicardOptions { tol, max_iter, rho: None, lipschitz_hint: f.lipschitz_hint };
    let sol = picard_solve(&sys, &opts)?;
    let len = g.len();
    let x = scatter(&block, len, n, &sol.psi);
    let x_s = scatter(&block, len, n, &sol.p);
    let x_t = scatter(&block, len, n, &sol.q);
    let mut x_st = vec![0.0; len * n];
    x_st.par_chunks_mut(n).enumerate().for_each(|(node, out)| {
        if g.mask[node].in_domain() {
            let r = node * n..(node + 1) * n;
            let [s, t] = g.point(node);
            f.eval(&Args { s, t, x: &x[r.clone()], p: &x_s[r.clone()], q: &x_t[r], u: &u[node * m..(node + 1) * m] }, out);
        }
    });
    Ok(StateSolution { n, x, x_s, x_t, x_st, iterations: sol.iterations, residual_history: sol.history, rho: sol.rho })
}

/// Jacobians of `f` along a state (full grid layout, zero outside G):
/// `fx, fp, fq` are n x n and `fu` is n x m per node, row-major. `a_prime`
/// holds `f_x - D_s f_p - D_t f_q`.
#[derive(Clone, Debug)]
pub struct Linearization {
    pub n: usize,
    pub m: usize,
    pub fx: Vec<f64>,
    pub fp: Vec<f64>,
    pub fq: Vec<f64>,
    pub fu: Vec<f64>,
    pub a_prime: Vec<f64>,
    pub chain: ChainFactors,
}

impl Linearization {
    pub fn new(dom: &Domain, spec: &ProblemSpec, state: &StateSolution, u: &[f64]) -> Linearization {
        let (n, m) = (spec.n(), spec.m());
        let g = &dom.grid;
        let len = g.len();
        let nn = n * n;
        let chain = ChainFactors::new(dom, n, m, &state.x, &state.x_s, &state.x_t, &state.x_st, u);
        let dynm = &spec.dynamics;
        let per_node: Vec<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = (0..len)
            .into_par_iter()
            .map(|node| {
                let mut fx = vec![0.0; nn];
                let mut fp = vec![0.0; nn];
                let mut fq = vec![0.0; nn];
                let mut fu = vec![0.0; n * m];
                let mut ap = vec![0.0; nn];
                if g.mask[node].in_domain() {
                    let a = chain.args(dom, node);
                    dynm.fx(&a, &mut fx);
                    dynm.fp(&a, &mut fp);
                    dynm.fq(&a, &mut fq);
                    dynm.fu(&a, &mut fu);
                    let gp = |a: &Args, o: &mut [f64]| dynm.fp(a, o);
                    let gq = |a: &Args, o: &mut [f64]| dynm.fq(a, o);
                    let dsp = crate::problem::total_derivative(&gp, nn, &chain, dom, node, crate::problem::Which::Ds);
                    let dtq = crate::problem::total_derivative(&gq, nn, &chain, dom, node, crate::problem::Which::Dt);
                    for k in 0..nn {
                        ap[k] = fx[k] - dsp[k] - dtq[k];
                    }
                }
                (fx, fp, fq, fu, ap)
            })
            .collect();
        let mut lin = Linearization {
            n,
            m,
            fx: Vec::with_capacity(len * nn),
            fp: Vec::with_capacity(len * nn),
            fq: Vec::with_capacity(len * nn),
            fu: Vec::with_capacity(len * n * m),
            a_prime: Vec::with_capacity(len * nn),
            chain,
        };
        for (fx, fp, fq, fu, ap) in per_node {
            lin.fx.extend(fx);
            lin.fp.extend(fp);
            lin.fq.extend(fq);
            lin.fu.extend(fu);
            lin.a_prime.extend(ap);
        }
        lin
    }

    pub fn fx_at(&self, node: usize) -> &[f64] {
        &self.fx[node * self.n * self.n..(node + 1) * self.n * self.n]
    }
    pub fn fp_at(&self, node: usize) -> &[f64] {
        &self.fp[node * self.n * self.n..(node + 1) * self.n * self.n]
    }
    pub fn fq_at(&self, node: usize) -> &[f64] {
        &self.fq[node * self.n * self.n..(node + 1) * self.n * self.n]
    }
    pub fn fu_at(&self, node: usize) -> &[f64] {
        &self.fu[node * self.n * self.m..(node + 1) * self.n * self.m]
    }
    pub fn a_prime_at(&self, node: usize) -> &[f64] {
        &self.a_prime[node * self.n * self.n..(node + 1) * self.n * self.n]
    }
}

/// `out = M v` for a row-major n x k matrix.
#[inline]
pub fn mat_vec(mat: &[f64], v: &[f64], out: &mut [f64]) {
    let k = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o = (0..k).map(|c| mat[r * k + c] * v[c]).sum();
    }
}

/// Solves the linearized problem with zero characteristic data for the
/// control increment `du`.
pub fn state_variation(dom: &Domain, spec: &ProblemSpec, base: &StateSolution, u: &[f64], du: &[f64]) -> Result<Vec<f64>> {
    check_control(dom, spec, u)?;
    check_control(dom, spec, du)?;
    let lin = Linearization::new(dom, spec, base, u);
    variation_with(dom, spec, &lin, du, 1e-12, 200)
}

/// Variation solve reusing a precomputed linearization.
pub fn variation_with(dom: &Domain, spec: &ProblemSpec, lin: &Linearization, du: &[f64], tol: f64, max_iter: usize) -> Result<Vec<f64>> {
    let (n, m) = (spec.n(), spec.m());
    let g = &dom.grid;
    let block = Block::quadrant(g, 0, 0);
    let zeros = vec![0.0; block.len() * n];
    let kernel = |node: usize, x: &[f64], p: &[f64], q: &[f64], out: &mut [f64]| {
        let mut tmp = vec![0.0; n];
        mat_vec(lin.fx_at(node), x, out);
        mat_vec(lin.fp_at(node), p, &mut tmp);
        out.iter_mut().zip(&tmp).for_each(|(o, v)| *o += v);
        mat_vec(lin.fq_at(node), q, &mut tmp);
        out.iter_mut().zip(&tmp).for_each(|(o, v)| *o += v);
        mat_vec(lin.fu_at(node), &du[node * m..(node + 1) * m], &mut tmp);
        out.iter_mut().zip(&tmp).for_each(|(o, v)| *o += v);
    };
    let sys = VolterraSystem {
        grid: g,
        block: &block,
        dim: n,
        direction: Direction::Forward,
        psi0: zeros.clone(),
        p0: zeros.clone(),
        q0: zeros,
        kernel: &kernel,
        clip: None,
    };
    let opts = PicardOptions { tol, max_iter, rho: None, lipschitz_hint: spec.dynamics.lipschitz_hint };
    let sol = picard_solve(&sys, &opts)?;
    Ok(scatter(&block, g.len(), n, &sol.psi))
}

/// CSV text `iteration,sup_residual,weighted_residual`.
pub fn residual_csv(history: &[IterRecord]) -> String {
    let mut s = String::from("iteration,sup_residual,weighted_residual\n");
    for r in history {
        s.push_str(&format!("{},{:.16e},{:.16e}\n", r.iter, r.sup, r.weighted));
    }
    s
}
