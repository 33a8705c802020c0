//! Rotating-basin shallow-water model in characteristic coordinates, the
//! four-quadrant split of the observation diamond and the regularized
//! inverse problem for the bottom forcing `u = γ_rt`.
//!
//! Quadrant `i` of the `(s, t')` plane is reflected onto the first quadrant
//! by `(s, t') = (σ_s s~, σ_t t~)`; every reflected piece is the triangle
//! `s~ + t~ <= A` with Goursat data on the two axes.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::VrMode;
use crate::error::{Error, Result};
use crate::forward::{solve_state, StateSolution};
use crate::geometry::{build_domain, shapes, Domain, GridOptions, Point, TOL_GEOM};
use crate::optimize::{self, minimize, Objective, OptimizationTrace, PgOptions, STATE_MAX_ITER, STATE_TOL};
use crate::problem::{Args, BoundaryData, ControlBox, CostIntegrands, Dynamics, ProblemSpec, VecFn};

// ---------------------------------------------------------------------------
// Basin

/// Depth `h(r)` with its first two derivatives.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DepthProfile {
    Constant { h0: f64 },
    Linear { h0: f64, slope: f64 },
    /// `h0 + curvature r^2`
    Parabolic { h0: f64, curvature: f64 },
}

impl DepthProfile {
    pub fn h(&self, r: f64) -> f64 {
        match *self {
            DepthProfile::Constant { h0 } => h0,
            DepthProfile::Linear { h0, slope } => h0 + slope * r,
            DepthProfile::Parabolic { h0, curvature } => h0 + curvature * r * r,
        }
    }
    pub fn dh(&self, r: f64) -> f64 {
        match *self {
            DepthProfile::Constant { .. } => 0.0,
            DepthProfile::Linear { slope, .. } => slope,
            DepthProfile::Parabolic { curvature, .. } => 2.0 * curvature * r,
        }
    }
    pub fn d2h(&self, _r: f64) -> f64 {
        match *self {
            DepthProfile::Parabolic { curvature, .. } => 2.0 * curvature,
            _ => 0.0,
        }
    }
    /// Smallest depth over `[lo, hi]` and where it is attained.
    fn min_on(&self, lo: f64, hi: f64) -> (f64, f64) {
        let mut cands = vec![lo, hi];
        if lo < 0.0 && hi > 0.0 {
            cands.push(0.0);
        }
        cands.into_iter().map(|r| (self.h(r), r)).fold((f64::INFINITY, lo), |a, b| if b.0 < a.0 { b } else { a })
    }
}

/// Which Goursat form of the basin equation the dynamics use.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// `v_st' = (3/8) k h'/√h (v_s - v_t') + (k² h''/4 - ω²) v + (g/4) u`,
    /// the characteristic form of `v_tt + 4ω²v - gc (h v)_rr = g u`.
    #[default]
    Derived,
    /// `v_st' = ½ (v_t' - v_s) k h'/√h + (k² h''/4 + ω²) v + (k²/4) u`.
    AsPrinted,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BasinModel {
    pub omega: f64,
    pub g: f64,
    pub c: f64,
    pub depth: DepthProfile,
    pub r_range: [f64; 2],
    pub t_range: [f64; 2],
    #[serde(default)]
    pub reduction: Reduction,
}

impl BasinModel {
    /// Wave-speed factor `√(gc)`.
    pub fn k(&self) -> f64 {
        (self.g * self.c).sqrt()
    }

    /// Depth must be positive from the origin of `r` through the range.
    pub fn check_depth(&self) -> Result<()> {
        let lo = self.r_range[0].min(0.0);
        let (hmin, at) = self.depth.min_on(lo, self.r_range[1]);
        if !(hmin > 0.0) {
            return Err(Error::DepthNonPositive(at));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fin = [self.omega, self.g, self.c, self.r_range[0], self.r_range[1], self.t_range[0], self.t_range[1]];
        if fin.iter().any(|v| !v.is_finite()) {
            return Err(Error::ConfigInvalid("basin constants must be finite".into()));
        }
        if !(self.g > 0.0 && self.c > 0.0) {
            return Err(Error::ConfigInvalid("g and c must be positive".into()));
        }
        if !(self.r_range[1] > self.r_range[0] && self.t_range[1] > self.t_range[0]) {
            return Err(Error::ConfigInvalid("r_range and t_range must be increasing".into()));
        }
        self.check_depth()
    }

    /// The `t2` that makes the observation rectangle compatible.
    pub fn compatible_t2(&self) -> Result<f64> {
        self.validate_without_t()?;
        let table = BetaTable::new(&self.depth, self.r_range[0].min(0.0), self.r_range[1].max(0.0));
        Ok(self.t_range[0] + (table.beta(self.r_range[1]) - table.beta(self.r_range[0])) / self.k())
    }

    fn validate_without_t(&self) -> Result<()> {
        let mut m = self.clone();
        m.t_range = [0.0, 1.0];
        m.validate()
    }
}

// ---------------------------------------------------------------------------
// β and its inverse

/// Adaptive Simpson quadrature of `f` over `[a, b]` to absolute tolerance `tol`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
    }
    if a == b {
        return 0.0;
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(f, a, b, fa, fm, fb, whole, tol, 40)
}

const BETA_PANELS: usize = 512;

/// `β` at panel nodes by adaptive Simpson, cubic Hermite in between with
/// the exact slope `h^{-1/2}`.
#[derive(Clone, Debug)]
struct BetaTable {
    depth: DepthProfile,
    r: Vec<f64>,
    beta: Vec<f64>,
}

impl BetaTable {
    fn new(depth: &DepthProfile, lo: f64, hi: f64) -> BetaTable {
        let slope = |r: f64| depth.h(r).powf(-0.5);
        let dr = (hi - lo) / BETA_PANELS as f64;
        let r: Vec<f64> = (0..=BETA_PANELS).map(|k| lo + k as f64 * dr).collect();
        // β(0) = 0 anchors the table.
        let b_lo = -adaptive_simpson(&slope, lo, 0.0_f64.max(lo), 1e-15);
        let mut beta = vec![b_lo; BETA_PANELS + 1];
        for k in 1..=BETA_PANELS {
            beta[k] = beta[k - 1] + adaptive_simpson(&slope, r[k - 1], r[k], 1e-15);
        }
        BetaTable { depth: depth.clone(), r, beta }
    }

    fn slope(&self, r: f64) -> f64 {
        self.depth.h(r).powf(-0.5)
    }

    fn panel(&self, r: f64) -> usize {
        let lo = self.r[0];
        let dr = self.r[1] - lo;
        (((r - lo) / dr).floor().max(0.0) as usize).min(BETA_PANELS - 1)
    }

    fn beta(&self, r: f64) -> f64 {
        let k = self.panel(r);
        let (r0, r1) = (self.r[k], self.r[k + 1]);
        let d = r1 - r0;
        let x = (r - r0) / d;
        let (h00, h10, h01, h11) = (
            (1.0 + 2.0 * x) * (1.0 - x) * (1.0 - x),
            x * (1.0 - x) * (1.0 - x),
            x * x * (3.0 - 2.0 * x),
            x * x * (x - 1.0),
        );
        h00 * self.beta[k] + h10 * d * self.slope(r0) + h01 * self.beta[k + 1] + h11 * d * self.slope(r1)
    }

    /// Bisection on the node table, then Newton with `β' = h^{-1/2}`.
    fn beta_inv(&self, b: f64) -> f64 {
        let k = match self.beta.partition_point(|&v| v <= b) {
            0 => 0,
            p => (p - 1).min(BETA_PANELS - 1),
        };
        let (mut lo, mut hi) = (self.r[k], self.r[k + 1]);
        let mut r = lo + (hi - lo) * ((b - self.beta[k]) / (self.beta[k + 1] - self.beta[k])).clamp(0.0, 1.0);
        for _ in 0..50 {
            let f = self.beta(r) - b;
            if f.abs() < 1e-15 {
                break;
            }
            if f > 0.0 {
                hi = r;
            } else {
                lo = r;
            }
            let next = r - f / self.slope(r);
            r = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
            if hi - lo < 1e-15 {
                break;
            }
        }
        r
    }
}

// ---------------------------------------------------------------------------
// Characteristic map

#[derive(Clone, Debug)]
pub struct CharacteristicMap {
    pub s0: f64,
    pub t0p: f64,
    pub a: f64,
    /// `√(gc)`
    pub k: f64,
    /// Residual of the fourth equation for `(A, s0, t0')`.
    pub fourth_residual: f64,
    pub model: BasinModel,
    table: BetaTable,
}

impl CharacteristicMap {
    pub fn beta(&self, r: f64) -> f64 {
        self.table.beta(r)
    }
    pub fn beta_inv(&self, b: f64) -> f64 {
        self.table.beta_inv(b)
    }
    pub fn to_char(&self, r: f64, t: f64) -> Point {
        let b = self.beta(r) / self.k;
        [self.s0 + t + b, self.t0p + t - b]
    }
    pub fn from_char(&self, s: f64, tp: f64) -> Point {
        [self.r_of(s, tp), 0.5 * (s + tp - self.s0 - self.t0p)]
    }
    /// `r(s, t')` from `β(r) = (k/2)(s - t' - s0 + t0')`.
    pub fn r_of(&self, s: f64, tp: f64) -> f64 {
        self.beta_inv(0.5 * self.k * (s - tp - self.s0 + self.t0p))
    }
}

pub fn build_characteristic_map(model: &BasinModel) -> Result<CharacteristicMap> {
    model.validate()?;
    let [r1, r2] = model.r_range;
    let [t1, t2] = model.t_range;
    let k = model.k();
    let table = BetaTable::new(&model.depth, r1.min(0.0), r2.max(0.0));
    let (b1, b2) = (table.beta(r1), table.beta(r2));
    let mismatch = (b2 - b1) - k * (t2 - t1);
    let scale = 1.0 + (b2 - b1).abs();
    if mismatch.abs() > TOL_GEOM * 1e2 * scale {
        return Err(Error::CompatibilityViolated(mismatch));
    }
    // First and third equations give s0 + t0' and A; the second gives s0 - t0'.
    let sum = -(t1 + t2);
    let a = sum + 2.0 * t2;
    let diff = a - 2.0 * b2 / k;
    let (s0, t0p) = (0.5 * (sum + diff), 0.5 * (sum - diff));
    let fourth_residual = (-(s0 - t0p) - 2.0 * b1 / k) - a;
    Ok(CharacteristicMap { s0, t0p, a, k, fourth_residual, model: model.clone(), table })
}

// ---------------------------------------------------------------------------
// Goursat dynamics

/// `f = first (v_s - v_t') + zeroth v + forcing u` at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Coefficients {
    pub first: f64,
    pub zeroth: f64,
    pub forcing: f64,
}

pub fn coefficients(map: &CharacteristicMap, s: f64, tp: f64) -> Coefficients {
    coefficients_at(map, map.r_of(s, tp))
}

/// [`coefficients`] at radius `r`.
pub fn coefficients_at(map: &CharacteristicMap, r: f64) -> Coefficients {
    let m = &map.model;
    let (h, dh, d2h) = (m.depth.h(r), m.depth.dh(r), m.depth.d2h(r));
    let k = map.k;
    let w2 = m.omega * m.omega;
    let grad = k * dh / h.sqrt();
    match m.reduction {
        Reduction::Derived => Coefficients { first: 0.375 * grad, zeroth: 0.25 * k * k * d2h - w2, forcing: 0.25 * m.g },
        Reduction::AsPrinted => Coefficients { first: -0.5 * grad, zeroth: 0.25 * k * k * d2h + w2, forcing: 0.25 * k * k },
    }
}

fn lipschitz_bound(map: &CharacteristicMap) -> f64 {
    let [r1, r2] = map.model.r_range;
    (0..=64)
        .map(|i| {
            let c = coefficients_at(map, r1 + (r2 - r1) * i as f64 / 64.0);
            2.0 * c.first.abs() + c.zeroth.abs()
        })
        .fold(0.0, f64::max)
}

/// Dynamics on the quadrant with signs `sigma`, written in reflected
/// coordinates `(s~, t~) = (σ_s s, σ_t t')`.
fn reflected_dynamics(map: &Arc<CharacteristicMap>, sigma: [f64; 2]) -> Dynamics {
    let [ss, st] = sigma;
    let sp = ss * st;
    let coef = {
        let map = map.clone();
        move |a: &Args| coefficients(&map, ss * a.s, st * a.t)
    };
    let c1 = coef.clone();
    let f: VecFn = Arc::new(move |a: &Args, o: &mut [f64]| {
        let c = c1(a);
        o[0] = c.first * (st * a.p[0] - ss * a.q[0]) + sp * (c.zeroth * a.x[0] + c.forcing * a.u[0]);
    });
    let c2 = coef.clone();
    let f_x: VecFn = Arc::new(move |a: &Args, o: &mut [f64]| o[0] = sp * c2(a).zeroth);
    let c3 = coef.clone();
    let f_p: VecFn = Arc::new(move |a: &Args, o: &mut [f64]| o[0] = st * c3(a).first);
    let c4 = coef.clone();
    let f_q: VecFn = Arc::new(move |a: &Args, o: &mut [f64]| o[0] = -ss * c4(a).first);
    let c5 = coef;
    let f_u: VecFn = Arc::new(move |a: &Args, o: &mut [f64]| o[0] = sp * c5(a).forcing);
    Dynamics { n: 1, m: 1, f, f_x: Some(f_x), f_p: Some(f_p), f_q: Some(f_q), f_u: Some(f_u), lipschitz_hint: Some(lipschitz_bound(map)) }
}

/// Scalar Goursat dynamics `v_st' = f(s, t', v, v_s, v_t', u)` in the
/// characteristic coordinates of the basin.
pub fn goursat_dynamics(map: &Arc<CharacteristicMap>) -> Dynamics {
    reflected_dynamics(map, [1.0, 1.0])
}

// ---------------------------------------------------------------------------
// Quadrants and lattice fields

#[derive(Clone, Debug)]
pub struct Quadrant {
    /// `(σ_s, σ_t)`: quadrant point `(s, t')` is `(σ_s s~, σ_t t~)`.
    pub sigma: [f64; 2],
    pub dom: Domain,
}

/// The diamond `|s| + |t'| <= A` as four reflected triangles on a common
/// lattice of spacing `A / half`.
#[derive(Clone, Debug)]
pub struct Quadrants {
    pub a: f64,
    pub half: usize,
    pub parts: Vec<Quadrant>,
}

pub const QUADRANT_SIGNS: [[f64; 2]; 4] = [[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0]];

pub fn quadrant_decompose(map: &CharacteristicMap, h_max: f64) -> Result<Quadrants> {
    if !(h_max > 0.0) {
        return Err(Error::ConfigInvalid("h_max must be positive".into()));
    }
    let a = map.a;
    let half = (a / h_max - 1e-9).ceil().max(1.0) as usize;
    let dom = build_domain(&shapes::triangle(a), &[], &GridOptions::uniform(a / half as f64))?;
    if dom.grid.ns() != half + 1 || dom.grid.nt() != half + 1 {
        return Err(Error::ConfigInvalid(format!("quadrant grid is {}x{}, expected {}", dom.grid.ns(), dom.grid.nt(), half + 1)));
    }
    let parts = QUADRANT_SIGNS.iter().map(|&sigma| Quadrant { sigma, dom: dom.clone() }).collect();
    Ok(Quadrants { a, half, parts })
}

impl Quadrants {
    /// Nodes per quadrant grid (including the unused ones outside G).
    pub fn nodes(&self) -> usize {
        self.parts[0].dom.grid.len()
    }
    pub fn h(&self) -> f64 {
        self.a / self.half as f64
    }
    /// Slice of a concatenated four-quadrant field belonging to quadrant `q`.
    pub fn part<'a>(&self, field: &'a [f64], q: usize) -> &'a [f64] {
        let len = self.nodes();
        &field[q * len..(q + 1) * len]
    }
    /// `(s, t')` of node `node` in quadrant `q`.
    pub fn char_point(&self, q: usize, node: usize) -> Point {
        let [a, b] = self.parts[q].dom.grid.point(node);
        let [ss, st] = self.parts[q].sigma;
        [ss * a, st * b]
    }
    /// Samples `f(s, t')` at every node of every quadrant.
    pub fn sample(&self, f: impl Fn(f64, f64) -> f64 + Sync) -> Vec<f64> {
        let len = self.nodes();
        (0..4 * len)
            .into_par_iter()
            .map(|k| {
                let (q, node) = (k / len, k % len);
                if self.parts[q].dom.grid.mask[node].in_domain() {
                    let [s, t] = self.char_point(q, node);
                    f(s, t)
                } else {
                    0.0
                }
            })
            .collect()
    }
    /// Lattice index of node `node` of quadrant `q`.
    fn lattice_index(&self, q: usize, node: usize) -> (i64, i64) {
        let (i, j) = self.parts[q].dom.grid.ij(node);
        let [ss, st] = self.parts[q].sigma;
        (ss as i64 * i as i64, st as i64 * j as i64)
    }
    /// Averages the quadrant copies of a concatenated field onto the lattice.
    pub fn to_lattice(&self, field: &[f64]) -> Lattice {
        let mut lat = Lattice::zeros(self.a, self.half);
        let mut count = vec![0u32; lat.values.len()];
        let len = self.nodes();
        for q in 0..4 {
            for node in 0..len {
                if !self.parts[q].dom.grid.mask[node].in_domain() {
                    continue;
                }
                let (i, j) = self.lattice_index(q, node);
                let k = lat.index(i, j);
                lat.values[k] += field[q * len + node];
                count[k] += 1;
            }
        }
        for (v, c) in lat.values.iter_mut().zip(&count) {
            if *c > 0 {
                *v /= *c as f64;
            }
        }
        lat.fill_outside();
        lat
    }
    /// `Σ_i ∬_{G~_i} a b`.
    pub fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        (0..4).map(|q| optimize::inner(&self.parts[q].dom, 1, self.part(a, q), self.part(b, q))).sum()
    }
    /// `||a - b|| / ||b||` in L2 over the diamond.
    pub fn relative_l2_error(&self, a: &[f64], b: &[f64]) -> f64 {
        let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
        (self.inner(&d, &d) / self.inner(b, b)).sqrt()
    }
}

/// Square lattice over `[-A, A]^2` with `2 half + 1` points per side;
/// entries outside the diamond repeat the nearest diamond value.
#[derive(Clone, Debug, PartialEq)]
pub struct Lattice {
    pub a: f64,
    pub half: usize,
    pub values: Vec<f64>,
}

impl Lattice {
    pub fn zeros(a: f64, half: usize) -> Lattice {
        Lattice { a, half, values: vec![0.0; (2 * half + 1) * (2 * half + 1)] }
    }
    fn side(&self) -> usize {
        2 * self.half + 1
    }
    pub fn index(&self, i: i64, j: i64) -> usize {
        let h = self.half as i64;
        ((i + h) as usize) * self.side() + (j + h) as usize
    }
    pub fn at(&self, i: i64, j: i64) -> f64 {
        self.values[self.index(i, j)]
    }
    pub fn spacing(&self) -> f64 {
        self.a / self.half as f64
    }
    pub fn in_diamond(&self, i: i64, j: i64) -> bool {
        i.abs() + j.abs() <= self.half as i64
    }
    /// Lattice coordinates `(i, j)` in the diamond, row by row.
    pub fn diamond_nodes(&self) -> impl Iterator<Item = (i64, i64)> + '_ {
        let h = self.half as i64;
        (-h..=h).flat_map(move |i| (-h..=h).map(move |j| (i, j))).filter(move |&(i, j)| self.in_diamond(i, j))
    }
    fn fill_outside(&mut self) {
        let h = self.half as i64;
        for i in -h..=h {
            for j in -h..=h {
                if self.in_diamond(i, j) {
                    continue;
                }
                let (mut a, mut b) = (i, j);
                while a.abs() + b.abs() > h {
                    if a.abs() >= b.abs() {
                        a -= a.signum();
                    } else {
                        b -= b.signum();
                    }
                }
                let v = self.at(a, b);
                let k = self.index(i, j);
                self.values[k] = v;
            }
        }
    }
    /// Bilinear interpolation at `(s, t')`, clamped to the square.
    pub fn bilinear(&self, s: f64, tp: f64) -> f64 {
        let h = self.spacing();
        let n = 2 * self.half;
        let x = ((s + self.a) / h).clamp(0.0, n as f64);
        let y = ((tp + self.a) / h).clamp(0.0, n as f64);
        let (i0, j0) = ((x.floor() as usize).min(n - 1), (y.floor() as usize).min(n - 1));
        let (fx, fy) = (x - i0 as f64, y - j0 as f64);
        let side = self.side();
        let v = |i: usize, j: usize| self.values[i * side + j];
        let lo = v(i0, j0) * (1.0 - fy) + v(i0, j0 + 1) * fy;
        let hi = v(i0 + 1, j0) * (1.0 - fy) + v(i0 + 1, j0 + 1) * fy;
        lo * (1.0 - fx) + hi * fx
    }
    /// Rows `s,t',r,t,value` over the diamond.
    pub fn to_csv(&self, map: &CharacteristicMap, column: &str) -> String {
        let mut out = format!("s,tp,r,t,{column}\n");
        let h = self.spacing();
        for (i, j) in self.diamond_nodes() {
            let (s, tp) = (i as f64 * h, j as f64 * h);
            let [r, t] = map.from_char(s, tp);
            out.push_str(&format!("{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n", s, tp, r, t, self.at(i, j)));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Observations

#[derive(Clone, Debug)]
pub struct ObservationSet {
    pub v_obs: Lattice,
    pub noise_level: f64,
    /// Standard deviation actually used: `noise_level` times the RMS of the
    /// clean field over the diamond lattice.
    pub noise_sigma: f64,
    pub seed: u64,
}

/// Coordinates of ingested observation rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObsCoords {
    /// `(r, t, v)`
    Physical,
    /// `(s, t', v)`
    Characteristic,
}

/// Samples on a tensor grid, interpolated bilinearly.
struct TensorGrid {
    x: Vec<f64>,
    y: Vec<f64>,
    v: Vec<f64>,
}

impl TensorGrid {
    fn from_points(points: &[[f64; 3]]) -> Result<TensorGrid> {
        let uniq = |k: usize| {
            let mut v: Vec<f64> = points.iter().map(|p| p[k]).collect();
            v.sort_by(|a, b| a.total_cmp(b));
            v.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
            v
        };
        let (x, y) = (uniq(0), uniq(1));
        if x.len() < 2 || y.len() < 2 || x.len() * y.len() != points.len() {
            return Err(Error::ConfigInvalid(format!("observations must fill a tensor grid: {} rows for {}x{} coordinates", points.len(), x.len(), y.len())));
        }
        let find = |xs: &[f64], v: f64| xs.iter().position(|a| (a - v).abs() <= 1e-12 * (1.0 + v.abs()));
        let mut v = vec![f64::NAN; x.len() * y.len()];
        for p in points {
            let (i, j) = (find(&x, p[0]).unwrap(), find(&y, p[1]).unwrap());
            v[i * y.len() + j] = p[2];
        }
        if v.iter().any(|a| a.is_nan()) {
            return Err(Error::ConfigInvalid("observation grid has duplicate or missing points".into()));
        }
        Ok(TensorGrid { x, y, v })
    }

    fn bilinear(&self, a: f64, b: f64) -> Option<f64> {
        let slack = 1e-9;
        let locate = |xs: &[f64], v: f64| -> Option<(usize, f64)> {
            let (lo, hi) = (xs[0], xs[xs.len() - 1]);
            if v < lo - slack * (1.0 + lo.abs()) || v > hi + slack * (1.0 + hi.abs()) {
                return None;
            }
            let v = v.clamp(lo, hi);
            let k = xs.partition_point(|&x| x <= v).clamp(1, xs.len() - 1) - 1;
            Some((k, (v - xs[k]) / (xs[k + 1] - xs[k])))
        };
        let (i, fx) = locate(&self.x, a)?;
        let (j, fy) = locate(&self.y, b)?;
        let ny = self.y.len();
        let v = |i: usize, j: usize| self.v[i * ny + j];
        let lo = v(i, j) * (1.0 - fy) + v(i, j + 1) * fy;
        let hi = v(i + 1, j) * (1.0 - fy) + v(i + 1, j + 1) * fy;
        Some(lo * (1.0 - fx) + hi * fx)
    }
}

impl ObservationSet {
    /// Resamples observation rows onto the characteristic lattice. Rows
    /// must form a tensor grid, or (characteristic rows only) cover the
    /// nodes of a diamond lattice `|i| + |j| <= N` of spacing `A / N`.
    pub fn from_points(map: &CharacteristicMap, quads: &Quadrants, points: &[[f64; 3]], coords: ObsCoords) -> Result<ObservationSet> {
        let sampler: Box<dyn Fn(f64, f64) -> Option<f64>> = match TensorGrid::from_points(points) {
            Ok(grid) => Box::new(move |a, b| grid.bilinear(a, b)),
            Err(e) => match coords {
                ObsCoords::Characteristic => {
                    let lat = diamond_lattice(quads.a, points).ok_or(e)?;
                    if lat.half == quads.half {
                        return Ok(ObservationSet { v_obs: lat, noise_level: 0.0, noise_sigma: 0.0, seed: 0 });
                    }
                    Box::new(move |a, b| Some(lat.bilinear(a, b)))
                }
                ObsCoords::Physical => return Err(e),
            },
        };
        let mut lat = Lattice::zeros(quads.a, quads.half);
        let h = lat.spacing();
        let nodes: Vec<(i64, i64)> = lat.diamond_nodes().collect();
        for (i, j) in nodes {
            let (s, tp) = (i as f64 * h, j as f64 * h);
            let (a, b) = match coords {
                ObsCoords::Characteristic => (s, tp),
                ObsCoords::Physical => {
                    let [r, t] = map.from_char(s, tp);
                    (r, t)
                }
            };
            let v = sampler(a, b).ok_or_else(|| Error::ConfigInvalid(format!("observations do not cover ({a}, {b})")))?;
            let k = lat.index(i, j);
            lat.values[k] = v;
        }
        lat.fill_outside();
        Ok(ObservationSet { v_obs: lat, noise_level: 0.0, noise_sigma: 0.0, seed: 0 })
    }
}

/// Rows `(s, t', v)` covering every node of a diamond lattice over `|s| + |t'| <= a`.
fn diamond_lattice(a: f64, points: &[[f64; 3]]) -> Option<Lattice> {
    // 2N^2 + 2N + 1 nodes
    let n = ((((2 * points.len()) as f64 - 1.0).sqrt() - 1.0) / 2.0).round() as usize;
    if n == 0 || 2 * n * n + 2 * n + 1 != points.len() {
        return None;
    }
    let mut lat = Lattice::zeros(a, n);
    let h = lat.spacing();
    let mut seen = vec![false; lat.values.len()];
    for p in points {
        let (fi, fj) = (p[0] / h, p[1] / h);
        let (i, j) = (fi.round(), fj.round());
        if (fi - i).abs() > 1e-6 || (fj - j).abs() > 1e-6 || !lat.in_diamond(i as i64, j as i64) {
            return None;
        }
        let k = lat.index(i as i64, j as i64);
        if seen[k] {
            return None;
        }
        seen[k] = true;
        lat.values[k] = p[2];
    }
    lat.fill_outside();
    Some(lat)
}

// ---------------------------------------------------------------------------
// Quadrant problems

/// Problem on quadrant `q`: reflected dynamics, zero Goursat data and
/// `Phi = (v - v_obs)^2 + λ u^2`.
pub fn quadrant_problem(map: &Arc<CharacteristicMap>, quads: &Quadrants, q: usize, obs: Option<Arc<Lattice>>, lambda: f64) -> ProblemSpec {
    let sigma = quads.parts[q].sigma;
    let [ss, st] = sigma;
    let target = move |a: &Args| obs.as_ref().map(|l| l.bilinear(ss * a.s, st * a.t)).unwrap_or(0.0);
    let t1 = target.clone();
    let phi = Arc::new(move |a: &Args| {
        let d = a.x[0] - t1(a);
        d * d + lambda * a.u[0] * a.u[0]
    });
    let phi_x: VecFn = Arc::new(move |a: &Args, o: &mut [f64]| o[0] = 2.0 * (a.x[0] - target(a)));
    let zero: VecFn = Arc::new(|_: &Args, o: &mut [f64]| o[0] = 0.0);
    let phi_u: VecFn = Arc::new(move |a: &Args, o: &mut [f64]| o[0] = 2.0 * lambda * a.u[0]);
    ProblemSpec {
        name: format!("tsunami-q{}", q + 1),
        dynamics: reflected_dynamics(map, sigma),
        cost: CostIntegrands {
            phi,
            phi_x: Some(phi_x),
            phi_p: Some(zero.clone()),
            phi_q: Some(zero),
            phi_u: Some(phi_u),
            phi1: Arc::new(|_| 0.0),
            phi1_x: Some(Arc::new(|_, o: &mut [f64]| o[0] = 0.0)),
            phi1_eta: Some(Arc::new(|_, o: &mut [f64]| o[0] = 0.0)),
            phi0: Arc::new(|_, _| 0.0),
            phi0_x: Some(Arc::new(|_, _, o: &mut [f64]| o[0] = 0.0)),
        },
        bounds: ControlBox::unbounded(1),
        data: BoundaryData::zero(1),
    }
}

/// State on every quadrant for the concatenated control `u`.
pub fn forward_quadrants(map: &Arc<CharacteristicMap>, quads: &Quadrants, u: &[f64]) -> Result<Vec<StateSolution>> {
    check_len(quads, u)?;
    (0..4)
        .into_par_iter()
        .map(|q| {
            let spec = quadrant_problem(map, quads, q, None, 0.0);
            solve_state(&quads.parts[q].dom, &spec, quads.part(u, q), STATE_TOL, STATE_MAX_ITER)
                .map_err(|e| e.in_region(format!("quadrant {}", q + 1)))
        })
        .collect()
}

fn check_len(quads: &Quadrants, u: &[f64]) -> Result<()> {
    if u.len() != 4 * quads.nodes() {
        return Err(Error::DimensionMismatch(format!("control has {} values, four quadrants need {}", u.len(), 4 * quads.nodes())));
    }
    Ok(())
}

/// Forward solve with `u_true`, then additive Gaussian noise of standard
/// deviation `noise` times the RMS of the clean field.
pub fn synth_observations(map: &Arc<CharacteristicMap>, quads: &Quadrants, u_true: &[f64], noise: f64, seed: u64) -> Result<ObservationSet> {
    if !(noise >= 0.0) {
        return Err(Error::ConfigInvalid("noise level must be non-negative".into()));
    }
    let states = forward_quadrants(map, quads, u_true)?;
    let v: Vec<f64> = states.iter().flat_map(|s| s.x.iter().copied()).collect();
    let mut lat = quads.to_lattice(&v);
    let nodes: Vec<(i64, i64)> = lat.diamond_nodes().collect();
    let rms = (nodes.iter().map(|&(i, j)| lat.at(i, j).powi(2)).sum::<f64>() / nodes.len() as f64).sqrt();
    let sigma = noise * rms;
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        for (i, j) in nodes {
            let k = lat.index(i, j);
            lat.values[k] += normal.sample(&mut rng);
        }
        lat.fill_outside();
    }
    Ok(ObservationSet { v_obs: lat, noise_level: noise, noise_sigma: sigma, seed })
}

/// `J = Σ_i J_i` over the four quadrants as an [`Objective`] on the
/// concatenated control.
pub struct TsunamiObjective<'a> {
    pub quads: &'a Quadrants,
    pub specs: Vec<ProblemSpec>,
    pub mode: VrMode,
}

impl<'a> TsunamiObjective<'a> {
    pub fn new(map: &Arc<CharacteristicMap>, quads: &'a Quadrants, obs: &ObservationSet, lambda: f64) -> TsunamiObjective<'a> {
        let lat = Arc::new(obs.v_obs.clone());
        let specs = (0..4).map(|q| quadrant_problem(map, quads, q, Some(lat.clone()), lambda)).collect();
        TsunamiObjective { quads, specs, mode: VrMode::default() }
    }

    /// Per-quadrant costs `J_i`.
    pub fn quadrant_costs(&self, u: &[f64]) -> Result<Vec<optimize::CostBreakdown>> {
        check_len(self.quads, u)?;
        (0..4)
            .into_par_iter()
            .map(|q| {
                let dom = &self.quads.parts[q].dom;
                let st = solve_state(dom, &self.specs[q], self.quads.part(u, q), STATE_TOL, STATE_MAX_ITER)?;
                Ok(optimize::cost(dom, &self.specs[q], &st, self.quads.part(u, q)))
            })
            .collect()
    }
}

impl Objective for TsunamiObjective<'_> {
    fn m(&self) -> usize {
        1
    }
    fn active(&self, k: usize) -> bool {
        self.quads.parts[0].dom.grid.mask[k % self.quads.nodes()].in_domain()
    }
    fn inner(&self, a: &[f64], b: &[f64]) -> f64 {
        self.quads.inner(a, b)
    }
    fn cost(&self, u: &[f64]) -> Result<f64> {
        Ok(self.quadrant_costs(u)?.iter().map(|c| c.total).sum())
    }
    fn cost_and_gradient(&self, u: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_len(self.quads, u)?;
        let parts: Vec<(f64, Vec<f64>)> = (0..4)
            .into_par_iter()
            .map(|q| {
                let ev = optimize::evaluate(&self.quads.parts[q].dom, &self.specs[q], self.quads.part(u, q), self.mode)
                    .map_err(|e| e.in_region(format!("quadrant {}", q + 1)))?;
                Ok((ev.cost.total, ev.grad))
            })
            .collect::<Result<_>>()?;
        let total = parts.iter().map(|p| p.0).sum();
        Ok((total, parts.into_iter().flat_map(|p| p.1).collect()))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct InverseResult {
    pub lambda: f64,
    /// Estimate of `u = γ_rt` as a concatenated four-quadrant field.
    #[serde(skip)]
    pub u: Vec<f64>,
    pub trace: OptimizationTrace,
    /// `∬ (v - v_obs)^2`
    pub misfit: f64,
    /// `λ ∬ u^2`
    pub regularization: f64,
    pub total: f64,
}

/// Minimizes `∬ (v - v_obs)^2 + λ u^2` over the diamond from `u = 0`.
pub fn inverse_solve(map: &Arc<CharacteristicMap>, quads: &Quadrants, obs: &ObservationSet, lambda: f64, opts: &PgOptions) -> Result<InverseResult> {
    if !(lambda > 0.0) {
        return Err(Error::ConfigInvalid("lambda must be positive".into()));
    }
    let mut obj = TsunamiObjective::new(map, quads, obs, lambda);
    obj.mode = opts.vr_mode;
    let u0 = vec![0.0; 4 * quads.nodes()];
    let trace = minimize(&obj, &u0, &ControlBox::unbounded(1), opts)?;
    let u = trace.control.clone();
    let total = obj.cost(&u)?;
    let regularization = lambda * quads.inner(&u, &u);
    Ok(InverseResult { lambda, u, trace, misfit: total - regularization, regularization, total })
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub rel_error: f64,
    pub misfit: f64,
    pub regularization: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// [`inverse_solve`] for each `λ` in parallel, scored against `u_true`.
pub fn lambda_sweep(
    map: &Arc<CharacteristicMap>,
    quads: &Quadrants,
    obs: &ObservationSet,
    u_true: &[f64],
    lambdas: &[f64],
    opts: &PgOptions,
) -> Result<(Vec<SweepRow>, Vec<InverseResult>)> {
    let results: Vec<InverseResult> = lambdas.par_iter().map(|&l| inverse_solve(map, quads, obs, l, opts)).collect::<Result<_>>()?;
    let rows = results
        .iter()
        .map(|r| SweepRow {
            lambda: r.lambda,
            rel_error: quads.relative_l2_error(&r.u, u_true),
            misfit: r.misfit,
            regularization: r.regularization,
            iterations: r.trace.iterates.len() - 1,
            converged: r.trace.converged,
        })
        .collect();
    Ok((rows, results))
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,rel_error,misfit,regularization,iterations,converged\n");
    for r in rows {
        out.push_str(&format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{},{}\n",
            r.lambda, r.rel_error, r.misfit, r.regularization, r.iterations, r.converged
        ));
    }
    out
}
