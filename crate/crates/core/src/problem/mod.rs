//! Dynamics `x_st = f(s, t, x, p, q, u)` with `p = x_s`, `q = x_t`, the cost
//! integrands, Hamiltonians and the chain-rule total derivatives.
//!
//! Matrices are row-major: `f_x[k * n + j] = d f^k / d x^j` and
//! `f_u[k * m + l] = d f^k / d u^l`. Partial derivatives left as `None` are
//! replaced by central finite differences.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Domain, Point};
use crate::numeric::diff_weights3;

/// Interior evaluation point.
#[derive(Clone, Copy, Debug)]
pub struct Args<'a> {
    pub s: f64,
    pub t: f64,
    pub x: &'a [f64],
    pub p: &'a [f64],
    pub q: &'a [f64],
    pub u: &'a [f64],
}

/// Boundary evaluation point; `eta` holds the tangential derivative `x_mu`.
#[derive(Clone, Copy, Debug)]
pub struct BArgs<'a> {
    pub s: f64,
    pub t: f64,
    pub x: &'a [f64],
    pub eta: &'a [f64],
}

pub type VecFn = Arc<dyn Fn(&Args, &mut [f64]) + Send + Sync>;
pub type ScalarFn = Arc<dyn Fn(&Args) -> f64 + Send + Sync>;
pub type BScalarFn = Arc<dyn Fn(&BArgs) -> f64 + Send + Sync>;
pub type BVecFn = Arc<dyn Fn(&BArgs, &mut [f64]) + Send + Sync>;
pub type VertexFn = Arc<dyn Fn(Point, &[f64]) -> f64 + Send + Sync>;
pub type VertexVecFn = Arc<dyn Fn(Point, &[f64], &mut [f64]) + Send + Sync>;
pub type CurveFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;

const FD_STEP: f64 = 1e-6;

/// Argument slot of an interior function.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    X,
    P,
    Q,
    U,
}

fn perturbed(args: &Args, slot: Slot, j: usize, h: f64, buf: &mut [Vec<f64>; 4]) -> f64 {
    buf[0].clear();
    buf[0].extend_from_slice(args.x);
    buf[1].clear();
    buf[1].extend_from_slice(args.p);
    buf[2].clear();
    buf[2].extend_from_slice(args.q);
    buf[3].clear();
    buf[3].extend_from_slice(args.u);
    let k = match slot {
        Slot::X => 0,
        Slot::P => 1,
        Slot::Q => 2,
        Slot::U => 3,
    };
    let step = h * (1.0 + buf[k][j].abs());
    buf[k][j] += step;
    step
}

/// Central-difference Jacobian of a vector function in one slot:
/// `out[k * dim(slot) + j] = d g^k / d slot^j`.
pub fn fd_jacobian(g: &dyn Fn(&Args, &mut [f64]), rows: usize, args: &Args, slot: Slot, out: &mut [f64]) {
    let cols = match slot {
        Slot::X => args.x.len(),
        Slot::P => args.p.len(),
        Slot::Q => args.q.len(),
        Slot::U => args.u.len(),
    };
    let mut buf: [Vec<f64>; 4] = Default::default();
    let mut fp = vec![0.0; rows];
    let mut fm = vec![0.0; rows];
    for j in 0..cols {
        let step = perturbed(args, slot, j, FD_STEP, &mut buf);
        {
            let a = Args { s: args.s, t: args.t, x: &buf[0], p: &buf[1], q: &buf[2], u: &buf[3] };
            g(&a, &mut fp);
        }
        let k = match slot {
            Slot::X => 0,
            Slot::P => 1,
            Slot::Q => 2,
            Slot::U => 3,
        };
        buf[k][j] -= 2.0 * step;
        {
            let a = Args { s: args.s, t: args.t, x: &buf[0], p: &buf[1], q: &buf[2], u: &buf[3] };
            g(&a, &mut fm);
        }
        for r in 0..rows {
            out[r * cols + j] = (fp[r] - fm[r]) / (2.0 * step);
        }
    }
}

fn fd_gradient_scalar(g: &dyn Fn(&Args) -> f64, args: &Args, slot: Slot, out: &mut [f64]) {
    let wrapped = |a: &Args, o: &mut [f64]| o[0] = g(a);
    fd_jacobian(&wrapped, 1, args, slot, out);
}

#[derive(Clone)]
pub struct Dynamics {
    pub n: usize,
    pub m: usize,
    pub f: VecFn,
    pub f_x: Option<VecFn>,
    pub f_p: Option<VecFn>,
    pub f_q: Option<VecFn>,
    pub f_u: Option<VecFn>,
    pub lipschitz_hint: Option<f64>,
}

impl Dynamics {
    pub fn eval(&self, a: &Args, out: &mut [f64]) {
        (self.f)(a, out)
    }

    fn partial(&self, user: &Option<VecFn>, slot: Slot, a: &Args, out: &mut [f64]) {
        match user {
            Some(g) => g(a, out),
            None => fd_jacobian(&*self.f, self.n, a, slot, out),
        }
    }

    pub fn fx(&self, a: &Args, out: &mut [f64]) {
        self.partial(&self.f_x, Slot::X, a, out)
    }
    pub fn fp(&self, a: &Args, out: &mut [f64]) {
        self.partial(&self.f_p, Slot::P, a, out)
    }
    pub fn fq(&self, a: &Args, out: &mut [f64]) {
        self.partial(&self.f_q, Slot::Q, a, out)
    }
    pub fn fu(&self, a: &Args, out: &mut [f64]) {
        self.partial(&self.f_u, Slot::U, a, out)
    }
}

#[derive(Clone)]
pub struct CostIntegrands {
    pub phi: ScalarFn,
    pub phi_x: Option<VecFn>,
    pub phi_p: Option<VecFn>,
    pub phi_q: Option<VecFn>,
    pub phi_u: Option<VecFn>,
    pub phi1: BScalarFn,
    pub phi1_x: Option<BVecFn>,
    pub phi1_eta: Option<BVecFn>,
    pub phi0: VertexFn,
    pub phi0_x: Option<VertexVecFn>,
}

impl CostIntegrands {
    fn partial(&self, user: &Option<VecFn>, slot: Slot, a: &Args, out: &mut [f64]) {
        match user {
            Some(g) => g(a, out),
            None => fd_gradient_scalar(&*self.phi, a, slot, out),
        }
    }
    pub fn phi_x(&self, a: &Args, out: &mut [f64]) {
        self.partial(&self.phi_x, Slot::X, a, out)
    }
    pub fn phi_p(&self, a: &Args, out: &mut [f64]) {
        self.partial(&self.phi_p, Slot::P, a, out)
    }
    pub fn phi_q(&self, a: &Args, out: &mut [f64]) {
        self.partial(&self.phi_q, Slot::Q, a, out)
    }
    pub fn phi_u(&self, a: &Args, out: &mut [f64]) {
        self.partial(&self.phi_u, Slot::U, a, out)
    }

    fn b_partial(&self, user: &Option<BVecFn>, eta_slot: bool, a: &BArgs, out: &mut [f64]) {
        if let Some(g) = user {
            return g(a, out);
        }
        let mut x = a.x.to_vec();
        let mut eta = a.eta.to_vec();
        for j in 0..out.len() {
            let v = if eta_slot { &mut eta[j] } else { &mut x[j] };
            let base = *v;
            let h = FD_STEP * (1.0 + base.abs());
            *v = base + h;
            let fp = (self.phi1)(&BArgs { s: a.s, t: a.t, x: &x, eta: &eta });
            let v = if eta_slot { &mut eta[j] } else { &mut x[j] };
            *v = base - h;
            let fm = (self.phi1)(&BArgs { s: a.s, t: a.t, x: &x, eta: &eta });
            let v = if eta_slot { &mut eta[j] } else { &mut x[j] };
            *v = base;
            out[j] = (fp - fm) / (2.0 * h);
        }
    }
    pub fn phi1_x(&self, a: &BArgs, out: &mut [f64]) {
        self.b_partial(&self.phi1_x, false, a, out)
    }
    pub fn phi1_eta(&self, a: &BArgs, out: &mut [f64]) {
        self.b_partial(&self.phi1_eta, true, a, out)
    }

    pub fn phi0_x(&self, p: Point, x: &[f64], out: &mut [f64]) {
        if let Some(g) = &self.phi0_x {
            return g(p, x, out);
        }
        let mut xx = x.to_vec();
        for j in 0..x.len() {
            let h = FD_STEP * (1.0 + x[j].abs());
            xx[j] = x[j] + h;
            let fp = (self.phi0)(p, &xx);
            xx[j] = x[j] - h;
            let fm = (self.phi0)(p, &xx);
            xx[j] = x[j];
            out[j] = (fp - fm) / (2.0 * h);
        }
    }
}

/// Box constraints on the control values.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ControlBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ControlBox {
    pub fn unbounded(m: usize) -> ControlBox {
        ControlBox { lower: vec![f64::NEG_INFINITY; m], upper: vec![f64::INFINITY; m] }
    }

    pub fn validate(&self, m: usize) -> Result<()> {
        if self.lower.len() != m || self.upper.len() != m {
            return Err(Error::DimensionMismatch(format!("control box has dimension {} but m = {}", self.lower.len(), m)));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| l > u) {
            return Err(Error::ConfigInvalid("control box has lower > upper".into()));
        }
        Ok(())
    }

    /// Projects a control field with `m` components per node onto the box.
    pub fn project(&self, u: &mut [f64]) {
        let m = self.lower.len();
        for (k, v) in u.iter_mut().enumerate() {
            *v = v.clamp(self.lower[k % m], self.upper[k % m]);
        }
    }
}

/// Characteristic data `x(s, 0) = x1(s)`, `x(0, t) = x2(t)`, `x(0, 0) = x0`.
#[derive(Clone)]
pub struct BoundaryData {
    pub x1: CurveFn,
    pub x1_d: Option<CurveFn>,
    pub x2: CurveFn,
    pub x2_d: Option<CurveFn>,
    pub x0: Vec<f64>,
}

impl BoundaryData {
    pub fn zero(n: usize) -> BoundaryData {
        let z: CurveFn = Arc::new(|_, o: &mut [f64]| o.iter_mut().for_each(|v| *v = 0.0));
        BoundaryData { x1: z.clone(), x1_d: Some(z.clone()), x2: z.clone(), x2_d: Some(z), x0: vec![0.0; n] }
    }

    fn deriv(g: &CurveFn, user: &Option<CurveFn>, v: f64, out: &mut [f64]) {
        if let Some(d) = user {
            return d(v, out);
        }
        let n = out.len();
        let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
        let h = 1e-6;
        g(v + h, &mut a);
        g(v - h, &mut b);
        for k in 0..n {
            out[k] = (a[k] - b[k]) / (2.0 * h);
        }
    }
    pub fn x1_prime(&self, s: f64, out: &mut [f64]) {
        Self::deriv(&self.x1, &self.x1_d, s, out)
    }
    pub fn x2_prime(&self, t: f64, out: &mut [f64]) {
        Self::deriv(&self.x2, &self.x2_d, t, out)
    }
}

/// Complete optimal control problem.
#[derive(Clone)]
pub struct ProblemSpec {
    pub name: String,
    pub dynamics: Dynamics,
    pub cost: CostIntegrands,
    pub bounds: ControlBox,
    pub data: BoundaryData,
}

fn check_dims(spec: &ProblemSpec, a: &Args) -> Result<()> {
    let (n, m) = (spec.dynamics.n, spec.dynamics.m);
    if a.x.len() != n || a.p.len() != n || a.q.len() != n || a.u.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "expected n = {n}, m = {m}; got |x| = {}, |p| = {}, |q| = {}, |u| = {}",
            a.x.len(),
            a.p.len(),
            a.q.len(),
            a.u.len()
        )));
    }
    Ok(())
}

impl ProblemSpec {
    pub fn n(&self) -> usize {
        self.dynamics.n
    }
    pub fn m(&self) -> usize {
        self.dynamics.m
    }

    pub fn validate(&self) -> Result<()> {
        self.bounds.validate(self.m())?;
        if self.data.x0.len() != self.n() {
            return Err(Error::DimensionMismatch("x0 length differs from n".into()));
        }
        let n = self.n();
        let (mut a, mut b) = (vec![0.0; n], vec![0.0; n]);
        (self.data.x1)(0.0, &mut a);
        (self.data.x2)(0.0, &mut b);
        for k in 0..n {
            if (a[k] - self.data.x0[k]).abs() > 1e-10 || (b[k] - self.data.x0[k]).abs() > 1e-10 {
                return Err(Error::ConfigInvalid("boundary data violate x1(0) = x2(0) = x0".into()));
            }
        }
        Ok(())
    }

    /// Largest relative mismatch between declared partials and central
    /// differences over random probes in `[-1, 1]`.
    pub fn partials_consistency(&self, probes: usize, seed: u64) -> f64 {
        let (n, m) = (self.n(), self.m());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst: f64 = 0.0;
        let mut rel = |a: &[f64], b: &[f64]| {
            for (x, y) in a.iter().zip(b) {
                let e = (x - y).abs() / (1.0 + x.abs().max(y.abs()));
                worst = worst.max(e);
            }
        };
        for _ in 0..probes {
            let mut draw = |k: usize| (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let (x, p, q, u) = (draw(n), draw(n), draw(n), draw(m));
            let st = draw(2);
            let eta = draw(n);
            let a = Args { s: st[0].abs(), t: st[1].abs(), x: &x, p: &p, q: &q, u: &u };
            let d = &self.dynamics;
            let f = &*d.f;
            for (user, slot, cols) in [(&d.f_x, Slot::X, n), (&d.f_p, Slot::P, n), (&d.f_q, Slot::Q, n), (&d.f_u, Slot::U, m)]
            {
                if let Some(g) = user {
                    let mut want = vec![0.0; n * cols];
                    let mut got = vec![0.0; n * cols];
                    g(&a, &mut got);
                    fd_jacobian(f, n, &a, slot, &mut want);
                    rel(&got, &want);
                }
            }
            let c = &self.cost;
            for (user, slot, cols) in [(&c.phi_x, Slot::X, n), (&c.phi_p, Slot::P, n), (&c.phi_q, Slot::Q, n), (&c.phi_u, Slot::U, m)]
            {
                if let Some(g) = user {
                    let mut want = vec![0.0; cols];
                    let mut got = vec![0.0; cols];
                    g(&a, &mut got);
                    fd_gradient_scalar(&*c.phi, &a, slot, &mut want);
                    rel(&got, &want);
                }
            }
            let ba = BArgs { s: a.s, t: a.t, x: &x, eta: &eta };
            for (user, eta_slot) in [(&c.phi1_x, false), (&c.phi1_eta, true)] {
                if let Some(g) = user {
                    let mut got = vec![0.0; n];
                    g(&ba, &mut got);
                    let stripped = CostIntegrands { phi1_x: None, phi1_eta: None, ..c.clone() };
                    let mut want = vec![0.0; n];
                    stripped.b_partial(&None, eta_slot, &ba, &mut want);
                    rel(&got, &want);
                }
            }
            if let Some(g) = &c.phi0_x {
                let mut got = vec![0.0; n];
                g([a.s, a.t], &x, &mut got);
                let stripped = CostIntegrands { phi0_x: None, ..c.clone() };
                let mut want = vec![0.0; n];
                stripped.phi0_x([a.s, a.t], &x, &mut want);
                rel(&got, &want);
            }
        }
        worst
    }
}

/// `H = Phi + psi . f`.
pub fn hamiltonian(spec: &ProblemSpec, a: &Args, psi: &[f64]) -> Result<f64> {
    check_dims(spec, a)?;
    if psi.len() != spec.n() {
        return Err(Error::DimensionMismatch("co-state length differs from n".into()));
    }
    let mut f = vec![0.0; spec.n()];
    spec.dynamics.eval(a, &mut f);
    Ok((spec.cost.phi)(a) + psi.iter().zip(&f).map(|(p, v)| p * v).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HamiltonianPartials {
    pub h_x: Vec<f64>,
    pub h_p: Vec<f64>,
    pub h_q: Vec<f64>,
    pub h_u: Vec<f64>,
}

/// Slot gradients of `H`: the Phi-partials plus `psi` contracted with the
/// corresponding Jacobian of f.
pub fn hamiltonian_partials(spec: &ProblemSpec, a: &Args, psi: &[f64]) -> Result<HamiltonianPartials> {
    check_dims(spec, a)?;
    let (n, m) = (spec.n(), spec.m());
    if psi.len() != n {
        return Err(Error::DimensionMismatch("co-state length differs from n".into()));
    }
    let d = &spec.dynamics;
    let c = &spec.cost;
    let mut out = HamiltonianPartials { h_x: vec![0.0; n], h_p: vec![0.0; n], h_q: vec![0.0; n], h_u: vec![0.0; m] };
    let mut jac = vec![0.0; n * n.max(m)];
    let contract = |jac: &[f64], cols: usize, acc: &mut [f64]| {
        for k in 0..n {
            for j in 0..cols {
                acc[j] += psi[k] * jac[k * cols + j];
            }
        }
    };
    c.phi_x(a, &mut out.h_x);
    d.fx(a, &mut jac[..n * n]);
    contract(&jac, n, &mut out.h_x);
    c.phi_p(a, &mut out.h_p);
    d.fp(a, &mut jac[..n * n]);
    contract(&jac, n, &mut out.h_p);
    c.phi_q(a, &mut out.h_q);
    d.fq(a, &mut jac[..n * n]);
    contract(&jac, n, &mut out.h_q);
    c.phi_u(a, &mut out.h_u);
    d.fu(a, &mut jac[..n * m]);
    contract(&jac, m, &mut out.h_u);
    Ok(out)
}

/// Contractions `h_alpha^i = f^k rho_alpha[k][i]` of f with the auxiliary
/// co-states (row-major n-by-n).
pub fn aux_hamiltonians(spec: &ProblemSpec, a: &Args, rho1: &[f64], rho2: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_dims(spec, a)?;
    let n = spec.n();
    if rho1.len() != n * n || rho2.len() != n * n {
        return Err(Error::DimensionMismatch("auxiliary co-states must be n-by-n".into()));
    }
    let mut f = vec![0.0; n];
    spec.dynamics.eval(a, &mut f);
    let mut h1 = vec![0.0; n];
    let mut h2 = vec![0.0; n];
    crate::numeric::row_times(&f, rho1, &mut h1);
    crate::numeric::row_times(&f, rho2, &mut h2);
    Ok((h1, h2))
}

/// Direction in `(s, t, x, p, q, u)` along which a composite is differentiated.
#[derive(Clone, Debug)]
pub struct Direction {
    pub ds: f64,
    pub dt: f64,
    pub dx: Vec<f64>,
    pub dp: Vec<f64>,
    pub dq: Vec<f64>,
    pub du: Vec<f64>,
}

/// Central difference of `g` along `dir`, with step `delta`.
pub fn directional_fd(g: &dyn Fn(&Args, &mut [f64]), dim: usize, a: &Args, dir: &Direction, delta: f64) -> Vec<f64> {
    let shift = |sgn: f64| {
        let x: Vec<f64> = a.x.iter().zip(&dir.dx).map(|(v, d)| v + sgn * delta * d).collect();
        let p: Vec<f64> = a.p.iter().zip(&dir.dp).map(|(v, d)| v + sgn * delta * d).collect();
        let q: Vec<f64> = a.q.iter().zip(&dir.dq).map(|(v, d)| v + sgn * delta * d).collect();
        let u: Vec<f64> = a.u.iter().zip(&dir.du).map(|(v, d)| v + sgn * delta * d).collect();
        (x, p, q, u)
    };
    let (xp, pp, qp, up) = shift(1.0);
    let (xm, pm, qm, um) = shift(-1.0);
    let mut fp = vec![0.0; dim];
    let mut fm = vec![0.0; dim];
    g(&Args { s: a.s + delta * dir.ds, t: a.t + delta * dir.dt, x: &xp, p: &pp, q: &qp, u: &up }, &mut fp);
    g(&Args { s: a.s - delta * dir.ds, t: a.t - delta * dir.dt, x: &xm, p: &pm, q: &qm, u: &um }, &mut fm);
    fp.iter().zip(&fm).map(|(x, y)| (x - y) / (2.0 * delta)).collect()
}

pub const TOTAL_FD_STEP: f64 = 1e-5;

/// Which total derivative to take.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Which {
    Ds,
    Dt,
}

/// Grid fields supplying the chain-rule factors of the total derivatives:
/// `x, x_s, x_t, x_ss, x_st, x_tt` (n per node) and `u, u_s, u_t` (m per node).
#[derive(Clone, Debug)]
pub struct ChainFactors {
    pub n: usize,
    pub m: usize,
    pub x: Vec<f64>,
    pub xs: Vec<f64>,
    pub xt: Vec<f64>,
    pub xss: Vec<f64>,
    pub xst: Vec<f64>,
    pub xtt: Vec<f64>,
    pub u: Vec<f64>,
    pub us: Vec<f64>,
    pub ut: Vec<f64>,
    /// Nodes where a stencil had to fall back to fewer than three points.
    pub short_stencils: usize,
}

/// Derivative along s (`axis = 0`) or t (`axis = 1`) of a node field with
/// `dim` components, by three-point stencils inside G; returns the number
/// of nodes where fewer than three points were available.
pub fn grid_derivative(dom: &Domain, field: &[f64], dim: usize, axis: usize, out: &mut [f64]) -> usize {
    let g = &dom.grid;
    let mut short = 0;
    let lines = if axis == 0 { g.nt() } else { g.ns() };
    for line in 0..lines {
        let len = if axis == 0 { g.row_right[line] + 1 } else { g.col_top[line] + 1 };
        let coord = |k: usize| if axis == 0 { g.s[k] } else { g.t[k] };
        let node = |k: usize| if axis == 0 { g.idx(k, line) } else { g.idx(line, k) };
        if len == 1 {
            short += 1;
            for c in 0..dim {
                out[node(0) * dim + c] = 0.0;
            }
            continue;
        }
        for k in 0..len {
            let n0 = node(k);
            if len == 2 {
                short += 1;
                let h = coord(1) - coord(0);
                for c in 0..dim {
                    out[n0 * dim + c] = (field[node(1) * dim + c] - field[node(0) * dim + c]) / h;
                }
                continue;
            }
            let base = if k == 0 { 0 } else if k == len - 1 { len - 3 } else { k - 1 };
            let w = diff_weights3([coord(base), coord(base + 1), coord(base + 2)], coord(k));
            for c in 0..dim {
                out[n0 * dim + c] = (0..3).map(|r| w[r] * field[node(base + r) * dim + c]).sum();
            }
        }
    }
    short
}

impl ChainFactors {
    /// Builds the factors from the state fields and the control.
    #[allow(clippy::too_many_arguments)]
    pub fn new(dom: &Domain, n: usize, m: usize, x: &[f64], xs: &[f64], xt: &[f64], xst: &[f64], u: &[f64]) -> ChainFactors {
        let len = dom.grid.len();
        let mut xss = vec![0.0; len * n];
        let mut xtt = vec![0.0; len * n];
        let mut us = vec![0.0; len * m];
        let mut ut = vec![0.0; len * m];
        let mut short = grid_derivative(dom, xs, n, 0, &mut xss);
        short += grid_derivative(dom, xt, n, 1, &mut xtt);
        grid_derivative(dom, u, m, 0, &mut us);
        grid_derivative(dom, u, m, 1, &mut ut);
        ChainFactors {
            n,
            m,
            x: x.to_vec(),
            xs: xs.to_vec(),
            xt: xt.to_vec(),
            xss,
            xst: xst.to_vec(),
            xtt,
            u: u.to_vec(),
            us,
            ut,
            short_stencils: short,
        }
    }

    pub fn args(&self, dom: &Domain, node: usize) -> Args<'_> {
        let (n, m) = (self.n, self.m);
        let [s, t] = dom.grid.point(node);
        Args {
            s,
            t,
            x: &self.x[node * n..(node + 1) * n],
            p: &self.xs[node * n..(node + 1) * n],
            q: &self.xt[node * n..(node + 1) * n],
            u: &self.u[node * m..(node + 1) * m],
        }
    }

    pub fn direction(&self, node: usize, which: Which) -> Direction {
        let (n, m) = (self.n, self.m);
        let r = node * n..(node + 1) * n;
        let ru = node * m..(node + 1) * m;
        match which {
            Which::Ds => Direction {
                ds: 1.0,
                dt: 0.0,
                dx: self.xs[r.clone()].to_vec(),
                dp: self.xss[r.clone()].to_vec(),
                dq: self.xst[r].to_vec(),
                du: self.us[ru].to_vec(),
            },
            Which::Dt => Direction {
                ds: 0.0,
                dt: 1.0,
                dx: self.xt[r.clone()].to_vec(),
                dp: self.xst[r.clone()].to_vec(),
                dq: self.xtt[r].to_vec(),
                du: self.ut[ru].to_vec(),
            },
        }
    }
}

/// Chain-rule total derivative `D/Ds` or `D/Dt` of a composite `g(s, t, x,
/// x_s, x_t, u)` at a grid node.
pub fn total_derivative(g: &dyn Fn(&Args, &mut [f64]), dim: usize, cf: &ChainFactors, dom: &Domain, node: usize, which: Which) -> Vec<f64> {
    let a = cf.args(dom, node);
    directional_fd(g, dim, &a, &cf.direction(node, which), TOTAL_FD_STEP)
}

/// Parameters of the built-in problem family
/// `f = A x + B p + C q + D u + sigma sin(x) + beta x*u`,
/// `Phi = w/2 |x - r(s,t)|^2 + wp/2 |p|^2 + wq/2 |q|^2 + wxq x.q + lambda/2 |u|^2 + c.u`,
/// `Phi1 = kxx/2 |x|^2 + kxe x.eta + kee/2 |eta|^2 + kx sum(x)`,
/// `Phi0 = c0/2 |x|^2 + c1 sum(x)`, with `r = r0 + r1 s t`.
/// Matrices are row-major; `beta x*u` is componentwise and needs `m = n`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct QuadraticFamily {
    pub n: usize,
    pub m: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    pub sigma: f64,
    pub beta: f64,
    pub w: f64,
    pub wp: f64,
    pub wq: f64,
    pub wxq: f64,
    pub lambda: f64,
    pub cu: f64,
    pub r0: f64,
    pub r1: f64,
    pub kxx: f64,
    pub kxe: f64,
    pub kee: f64,
    pub kx: f64,
    pub c0: f64,
    pub c1: f64,
    /// `x1(s) = x0 + g1 s`, `x2(t) = x0 + g2 t` componentwise.
    pub x0: f64,
    pub g1: f64,
    pub g2: f64,
    pub lower: f64,
    pub upper: f64,
    pub lipschitz_hint: Option<f64>,
}

impl Default for QuadraticFamily {
    fn default() -> Self {
        QuadraticFamily {
            n: 1,
            m: 1,
            a: vec![0.0],
            b: vec![0.0],
            c: vec![0.0],
            d: vec![1.0],
            sigma: 0.0,
            beta: 0.0,
            w: 2.0,
            wp: 0.0,
            wq: 0.0,
            wxq: 0.0,
            lambda: 0.2,
            cu: 0.0,
            r0: 1.0,
            r1: 0.0,
            kxx: 0.0,
            kxe: 0.0,
            kee: 0.0,
            kx: 0.0,
            c0: 0.0,
            c1: 0.0,
            x0: 0.0,
            g1: 0.0,
            g2: 0.0,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            lipschitz_hint: None,
        }
    }
}

impl QuadraticFamily {
    /// Named presets: `lq`, `bilinear`, `nonlinear`, `coupled2`, `boundary`.
    pub fn preset(id: &str) -> Option<QuadraticFamily> {
        let base = QuadraticFamily::default();
        Some(match id {
            "lq" => QuadraticFamily { a: vec![1.0], ..base },
            "bilinear" => QuadraticFamily { a: vec![0.5], beta: 1.0, lower: -1.0, upper: 1.0, ..base },
            "nonlinear" => QuadraticFamily { a: vec![0.3], b: vec![0.4], c: vec![-0.3], sigma: 0.5, wp: 0.5, wxq: 0.3, r1: 1.0, ..base },
            "boundary" => QuadraticFamily {
                a: vec![0.5],
                b: vec![0.3],
                c: vec![0.2],
                wp: 0.4,
                wq: 0.2,
                kxx: 1.0,
                kxe: 0.5,
                kee: 0.3,
                kx: 0.2,
                c0: 1.0,
                c1: 0.3,
                r1: 1.0,
                ..base
            },
            "coupled2" => QuadraticFamily {
                n: 2,
                m: 2,
                a: vec![0.2, 0.5, -0.3, 0.1],
                b: vec![0.1, 0.0, 0.2, -0.1],
                c: vec![0.0, 0.3, 0.1, 0.2],
                d: vec![1.0, 0.0, 0.5, 1.0],
                kxx: 0.5,
                kxe: 0.3,
                kee: 0.2,
                c0: 0.5,
                ..base
            },
            _ => return None,
        })
    }

    pub fn build(&self, name: &str) -> Result<ProblemSpec> {
        let (n, m) = (self.n, self.m);
        let chk = |v: &Vec<f64>, len: usize, what: &str| {
            if v.len() != len {
                Err(Error::DimensionMismatch(format!("{what} has {} entries, expected {len}", v.len())))
            } else {
                Ok(())
            }
        };
        chk(&self.a, n * n, "a")?;
        chk(&self.b, n * n, "b")?;
        chk(&self.c, n * n, "c")?;
        chk(&self.d, n * m, "d")?;
        if self.beta != 0.0 && m != n {
            return Err(Error::DimensionMismatch("beta x*u needs m = n".into()));
        }
        let p = Arc::new(self.clone());

        let q = p.clone();
        let f: VecFn = Arc::new(move |a: &Args, out: &mut [f64]| {
            let (n, m) = (q.n, q.m);
            for k in 0..n {
                let mut v = 0.0;
                for j in 0..n {
                    v += q.a[k * n + j] * a.x[j] + q.b[k * n + j] * a.p[j] + q.c[k * n + j] * a.q[j];
                }
                for l in 0..m {
                    v += q.d[k * m + l] * a.u[l];
                }
                v += q.sigma * a.x[k].sin();
                if q.beta != 0.0 {
                    v += q.beta * a.x[k] * a.u[k];
                }
                out[k] = v;
            }
        });
        let q = p.clone();
        let f_x: VecFn = Arc::new(move |a: &Args, out: &mut [f64]| {
            let n = q.n;
            for k in 0..n {
                for j in 0..n {
                    out[k * n + j] = q.a[k * n + j];
                }
                out[k * n + k] += q.sigma * a.x[k].cos() + if q.beta != 0.0 { q.beta * a.u[k] } else { 0.0 };
            }
        });
        let q = p.clone();
        let f_p: VecFn = Arc::new(move |_: &Args, out: &mut [f64]| out.copy_from_slice(&q.b));
        let q = p.clone();
        let f_q: VecFn = Arc::new(move |_: &Args, out: &mut [f64]| out.copy_from_slice(&q.c));
        let q = p.clone();
        let f_u: VecFn = Arc::new(move |a: &Args, out: &mut [f64]| {
            out.copy_from_slice(&q.d);
            if q.beta != 0.0 {
                for k in 0..q.n {
                    out[k * q.m + k] += q.beta * a.x[k];
                }
            }
        });

        let q = p.clone();
        let phi: ScalarFn = Arc::new(move |a: &Args| {
            let r = q.r0 + q.r1 * a.s * a.t;
            let mut v = 0.0;
            for k in 0..q.n {
                v += 0.5 * q.w * (a.x[k] - r).powi(2)
                    + 0.5 * q.wp * a.p[k] * a.p[k]
                    + 0.5 * q.wq * a.q[k] * a.q[k]
                    + q.wxq * a.x[k] * a.q[k];
            }
            for l in 0..q.m {
                v += 0.5 * q.lambda * a.u[l] * a.u[l] + q.cu * a.u[l];
            }
            v
        });
        let q = p.clone();
        let phi_x: VecFn = Arc::new(move |a: &Args, out: &mut [f64]| {
            let r = q.r0 + q.r1 * a.s * a.t;
            for k in 0..q.n {
                out[k] = q.w * (a.x[k] - r) + q.wxq * a.q[k];
            }
        });
        let q = p.clone();
        let phi_p: VecFn = Arc::new(move |a: &Args, out: &mut [f64]| {
            for k in 0..q.n {
                out[k] = q.wp * a.p[k];
            }
        });
        let q = p.clone();
        let phi_q: VecFn = Arc::new(move |a: &Args, out: &mut [f64]| {
            for k in 0..q.n {
                out[k] = q.wq * a.q[k] + q.wxq * a.x[k];
            }
        });
        let q = p.clone();
        let phi_u: VecFn = Arc::new(move |a: &Args, out: &mut [f64]| {
            for l in 0..q.m {
                out[l] = q.lambda * a.u[l] + q.cu;
            }
        });
        let q = p.clone();
        let phi1: BScalarFn = Arc::new(move |a: &BArgs| {
            (0..q.n)
                .map(|k| {
                    0.5 * q.kxx * a.x[k] * a.x[k] + q.kxe * a.x[k] * a.eta[k] + 0.5 * q.kee * a.eta[k] * a.eta[k] + q.kx * a.x[k]
                })
                .sum()
        });
        let q = p.clone();
        let phi1_x: BVecFn = Arc::new(move |a: &BArgs, out: &mut [f64]| {
            for k in 0..q.n {
                out[k] = q.kxx * a.x[k] + q.kxe * a.eta[k] + q.kx;
            }
        });
        let q = p.clone();
        let phi1_eta: BVecFn = Arc::new(move |a: &BArgs, out: &mut [f64]| {
            for k in 0..q.n {
                out[k] = q.kxe * a.x[k] + q.kee * a.eta[k];
            }
        });
        let q = p.clone();
        let phi0: VertexFn = Arc::new(move |_, x: &[f64]| x.iter().map(|v| 0.5 * q.c0 * v * v + q.c1 * v).sum());
        let q = p.clone();
        let phi0_x: VertexVecFn = Arc::new(move |_, x: &[f64], out: &mut [f64]| {
            for k in 0..x.len() {
                out[k] = q.c0 * x[k] + q.c1;
            }
        });

        let (x0, g1, g2) = (self.x0, self.g1, self.g2);
        let x1: CurveFn = Arc::new(move |s, o: &mut [f64]| o.iter_mut().for_each(|v| *v = x0 + g1 * s));
        let x1_d: CurveFn = Arc::new(move |_, o: &mut [f64]| o.iter_mut().for_each(|v| *v = g1));
        let x2: CurveFn = Arc::new(move |t, o: &mut [f64]| o.iter_mut().for_each(|v| *v = x0 + g2 * t));
        let x2_d: CurveFn = Arc::new(move |_, o: &mut [f64]| o.iter_mut().for_each(|v| *v = g2));

        let lipschitz_hint = self.lipschitz_hint.or_else(|| {
            let norm = |v: &[f64]| v.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())) * n as f64;
            Some(norm(&self.a) + self.sigma.abs() + norm(&self.b) + norm(&self.c))
        });
        let spec = ProblemSpec {
            name: name.to_string(),
            dynamics: Dynamics { n, m, f, f_x: Some(f_x), f_p: Some(f_p), f_q: Some(f_q), f_u: Some(f_u), lipschitz_hint },
            cost: CostIntegrands {
                phi,
                phi_x: Some(phi_x),
                phi_p: Some(phi_p),
                phi_q: Some(phi_q),
                phi_u: Some(phi_u),
                phi1,
                phi1_x: Some(phi1_x),
                phi1_eta: Some(phi1_eta),
                phi0,
                phi0_x: Some(phi0_x),
            },
            bounds: ControlBox { lower: vec![self.lower; m], upper: vec![self.upper; m] },
            data: BoundaryData { x1, x1_d: Some(x1_d), x2, x2_d: Some(x2_d), x0: vec![x0; n] },
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Built-in problem by id (see [`QuadraticFamily::preset`]).
pub fn builtin(id: &str) -> Result<ProblemSpec> {
    QuadraticFamily::preset(id)
        .ok_or_else(|| Error::ConfigInvalid(format!("unknown problem id '{id}'")))?
        .build(id)
}
