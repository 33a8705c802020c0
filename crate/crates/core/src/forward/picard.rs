//! Weighted-norm Picard iteration for two-dimensional Volterra systems
//! `psi_st = g(psi, psi_s, psi_t)` carried as the triple `(psi, P, Q)`.
//!
//! Forward systems integrate from the lower-left corner of the block,
//! backward systems from the upper/right edges (optionally clipped by an
//! oblique boundary arc).

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{CellKind, Domain, Grid, PointRef};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

/// `exp(-rho (s - s0 + t - t0))` forward or `exp(-rho (s1 - s + t1 - t))`
/// backward; `rho = 0` is the max norm.
#[derive(Clone, Copy, Debug)]
pub struct WeightedNorm {
    pub rho: f64,
    pub corner: [f64; 2],
    pub direction: Direction,
}

impl WeightedNorm {
    #[inline]
    pub fn weight(&self, s: f64, t: f64) -> f64 {
        match self.direction {
            Direction::Forward => (-self.rho * ((s - self.corner[0]) + (t - self.corner[1]))).exp(),
            Direction::Backward => (-self.rho * ((self.corner[0] - s) + (self.corner[1] - t))).exp(),
        }
    }
}

/// Max over the listed nodes of the weighted absolute value of a field with
/// `dim` components per entry.
pub fn weighted_norm(grid: &Grid, nodes: &[usize], field: &[f64], dim: usize, wn: &WeightedNorm) -> f64 {
    let mut best: f64 = 0.0;
    for (k, &node) in nodes.iter().enumerate() {
        let [s, t] = grid.point(node);
        let w = wn.weight(s, t);
        for c in 0..dim {
            best = best.max(w * field[k * dim + c].abs());
        }
    }
    best
}

/// Smallest rho in {1, 2, 4, ...} with `L (1 - e^{-rho a})(1 - e^{-rho b}) / rho^2 <= 1/2`;
/// 8 without a Lipschitz hint.
pub fn choose_rho(lipschitz: Option<f64>, a: f64, b: f64) -> f64 {
    let Some(l) = lipschitz else { return 8.0 };
    let mut rho: f64 = 1.0;
    while rho < 1e6 {
        if contraction_bound(l, rho, a, b) <= 0.5 {
            return rho;
        }
        rho *= 2.0;
    }
    rho
}

/// `L (1 - e^{-rho a})(1 - e^{-rho b}) / rho^2`, or `L a b` at `rho = 0`.
pub fn contraction_bound(l: f64, rho: f64, a: f64, b: f64) -> f64 {
    if rho == 0.0 {
        return l * a * b;
    }
    l * (1.0 - (-rho * a).exp()) * (1.0 - (-rho * b).exp()) / (rho * rho)
}

/// Grid block of a region: columns `i0..=i1`, rows `j0..=tops[i - i0]`.
#[derive(Clone, Debug)]
pub struct Block {
    pub i0: usize,
    pub i1: usize,
    pub j0: usize,
    pub tops: Vec<usize>,
    pub offsets: Vec<usize>,
    pub nodes: Vec<usize>,
    /// Last column of each row `j0..=jmax`.
    pub row_end: Vec<usize>,
}

impl Block {
    pub fn new(grid: &Grid, i0: usize, i1: usize, j0: usize, tops: Vec<usize>) -> Block {
        assert_eq!(tops.len(), i1 - i0 + 1);
        let mut offsets = vec![0];
        let mut nodes = Vec::new();
        for (c, &top) in tops.iter().enumerate() {
            for j in j0..=top {
                nodes.push(grid.idx(i0 + c, j));
            }
            offsets.push(nodes.len());
        }
        let jmax = *tops.iter().max().unwrap();
        let row_end = (j0..=jmax)
            .map(|j| (0..tops.len()).rev().find(|&c| tops[c] >= j).map(|c| i0 + c).unwrap_or(i0))
            .collect();
        Block { i0, i1, j0, tops, offsets, nodes, row_end }
    }

    pub fn rect(grid: &Grid, i0: usize, i1: usize, j0: usize, j1: usize) -> Block {
        Block::new(grid, i0, i1, j0, vec![j1; i1 - i0 + 1])
    }

    /// All nodes of G with `i >= i0`, `j >= j0` (forward staircase).
    pub fn quadrant(grid: &Grid, i0: usize, j0: usize) -> Block {
        let mut i1 = i0;
        while i1 + 1 < grid.ns() && grid.col_top[i1 + 1] >= j0 {
            i1 += 1;
        }
        let tops = (i0..=i1).map(|i| grid.col_top[i]).collect();
        Block::new(grid, i0, i1, j0, tops)
    }

    pub fn jmax(&self) -> usize {
        self.j0 + self.row_end.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[inline]
    pub fn local(&self, i: usize, j: usize) -> Option<usize> {
        if i < self.i0 || i > self.i1 || j < self.j0 {
            return None;
        }
        let c = i - self.i0;
        (j <= self.tops[c]).then(|| self.offsets[c] + j - self.j0)
    }

    #[inline]
    fn loc(&self, i: usize, j: usize) -> usize {
        self.offsets[i - self.i0] + j - self.j0
    }
}

/// Oblique-arc clipping data of a backward triangle solve.
pub struct Clip<'a> {
    pub dom: &'a Domain,
    /// Kernel values at boundary nodes (`dim` per boundary node).
    pub arc_g: &'a [f64],
    /// Per column: boundary node above the top node and the gap length.
    pub col_tail: Vec<Option<(usize, f64)>>,
    /// Per row `j0..=jmax`: boundary node right of the last node and the gap.
    pub row_tail: Vec<Option<(usize, f64)>>,
}

pub type Kernel<'a> = dyn Fn(usize, &[f64], &[f64], &[f64], &mut [f64]) + Sync + 'a;

pub struct VolterraSystem<'a> {
    pub grid: &'a Grid,
    pub block: &'a Block,
    pub dim: usize,
    pub direction: Direction,
    /// Seeds in block-local layout, `dim` per node.
    pub psi0: Vec<f64>,
    pub p0: Vec<f64>,
    pub q0: Vec<f64>,
    /// `g(global node, psi, P, Q, out)`.
    pub kernel: &'a Kernel<'a>,
    pub clip: Option<Clip<'a>>,
}

#[derive(Clone, Copy, Debug)]
pub struct PicardOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Weighted-norm exponent; `None` picks it from the Lipschitz hint.
    pub rho: Option<f64>,
    pub lipschitz_hint: Option<f64>,
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { tol: 1e-10, max_iter: 200, rho: None, lipschitz_hint: None }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    /// Sup-norm distance between successive iterates over (psi, P, Q).
    pub sup: f64,
    /// Weighted triple norm of the same distance.
    pub weighted: f64,
    /// Weighted norm of the psi part only.
    pub weighted_psi: f64,
}

#[derive(Clone, Debug)]
pub struct PicardSolution {
    pub psi: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub iterations: usize,
    pub history: Vec<IterRecord>,
    pub rho: f64,
}

impl PicardSolution {
    /// Successive weighted-norm ratios of the psi component.
    pub fn psi_ratios(&self) -> Vec<f64> {
        self.history.windows(2).filter(|w| w[0].weighted_psi > 0.0).map(|w| w[1].weighted_psi / w[0].weighted_psi).collect()
    }
}

/// Iterates the Volterra operator to its fixed point.
pub fn picard_solve(sys: &VolterraSystem, opts: &PicardOptions) -> Result<PicardSolution> {
    let g = sys.grid;
    let b = sys.block;
    let d = sys.dim;
    let len = b.len();
    assert_eq!(sys.psi0.len(), len * d);
    let s_ext = g.s[b.i1] - g.s[b.i0];
    let t_ext = g.t[b.jmax()] - g.t[b.j0];
    let rho = opts.rho.unwrap_or_else(|| choose_rho(opts.lipschitz_hint, s_ext, t_ext));
    let corner = match sys.direction {
        Direction::Forward => [g.s[b.i0], g.t[b.j0]],
        Direction::Backward => [g.s[b.i1], g.t[b.jmax()]],
    };
    let wn = WeightedNorm { rho, corner, direction: sys.direction };
    let weights: Vec<f64> = b.nodes.iter().map(|&n| {
        let [s, t] = g.point(n);
        wn.weight(s, t)
    }).collect();

    let mut psi = sys.psi0.clone();
    let mut p = sys.p0.clone();
    let mut q = sys.q0.clone();
    let mut gv = vec![0.0; len * d];
    let mut col = vec![0.0; len * d];
    let mut row = vec![0.0; len * d];
    let ncols = b.i1 - b.i0 + 1;
    let nrows = b.jmax() - b.j0 + 1;
    let mut area = vec![0.0; (ncols + 1) * (nrows + 1) * d];
    let mut history = Vec::new();

    for iter in 1..=opts.max_iter {
        gv.par_chunks_mut(d).enumerate().for_each(|(k, out)| {
            (sys.kernel)(b.nodes[k], &psi[k * d..(k + 1) * d], &p[k * d..(k + 1) * d], &q[k * d..(k + 1) * d], out);
        });
        match sys.direction {
            Direction::Forward => forward_integrals(g, b, d, &gv, &mut col, &mut row, &mut area),
            Direction::Backward => backward_integrals(g, b, d, &gv, sys.clip.as_ref(), &mut col, &mut row, &mut area),
        }
        let (mut sup, mut wpsi, mut wp, mut wq) = (0.0_f64, 0.0_f64, 0.0_f64, 0.0_f64);
        let sign = if sys.direction == Direction::Forward { 1.0 } else { -1.0 };
        for k in 0..len {
            let (i, j) = g.ij(b.nodes[k]);
            let e = ((i - b.i0) * (nrows + 1) + (j - b.j0)) * d;
            for c in 0..d {
                let idx = k * d + c;
                let np = sys.psi0[idx] + area[e + c];
                let npp = sys.p0[idx] + sign * col[idx];
                let nq = sys.q0[idx] + sign * row[idx];
                if !(np.is_finite() && npp.is_finite() && nq.is_finite()) {
                    return Err(Error::NaNEncountered(format!("Picard iterate {iter} at node ({i}, {j})")));
                }
                let (d1, d2, d3) = ((np - psi[idx]).abs(), (npp - p[idx]).abs(), (nq - q[idx]).abs());
                sup = sup.max(d1).max(d2).max(d3);
                wpsi = wpsi.max(weights[k] * d1);
                wp = wp.max(weights[k] * d2);
                wq = wq.max(weights[k] * d3);
                psi[idx] = np;
                p[idx] = npp;
                q[idx] = nq;
            }
        }
        history.push(IterRecord { iter, sup, weighted: wpsi + wp + wq, weighted_psi: wpsi });
        if sup < opts.tol {
            return Ok(PicardSolution { psi, p, q, iterations: iter, history, rho });
        }
    }
    let last = history.last().map(|r| r.sup).unwrap_or(f64::NAN);
    let n = history.len();
    if n >= 2 && history[n - 2].weighted > 0.0 {
        let ratio = history[n - 1].weighted / history[n - 2].weighted;
        if ratio > 1.0 {
            return Err(Error::ContractionViolated { ratio, rho });
        }
    }
    Err(Error::NoConvergence { max_iter: opts.max_iter, last_residual: last })
}

fn forward_integrals(g: &Grid, b: &Block, d: usize, gv: &[f64], col: &mut [f64], row: &mut [f64], area: &mut [f64]) {
    let nrows = b.jmax() - b.j0 + 1;
    for i in b.i0..=b.i1 {
        let top = b.tops[i - b.i0];
        let k0 = b.loc(i, b.j0);
        for c in 0..d {
            col[k0 * d + c] = 0.0;
        }
        for j in b.j0 + 1..=top {
            let (k, km) = (b.loc(i, j), b.loc(i, j - 1));
            let h = 0.5 * (g.t[j] - g.t[j - 1]);
            for c in 0..d {
                col[k * d + c] = col[km * d + c] + h * (gv[km * d + c] + gv[k * d + c]);
            }
        }
    }
    for j in b.j0..=b.jmax() {
        let end = b.row_end[j - b.j0];
        let k0 = b.loc(b.i0, j);
        for c in 0..d {
            row[k0 * d + c] = 0.0;
            area[(j - b.j0) * d + c] = 0.0;
        }
        for i in b.i0 + 1..=end {
            let (k, km) = (b.loc(i, j), b.loc(i - 1, j));
            let h = 0.5 * (g.s[i] - g.s[i - 1]);
            let e = ((i - b.i0) * (nrows + 1) + (j - b.j0)) * d;
            let em = ((i - 1 - b.i0) * (nrows + 1) + (j - b.j0)) * d;
            for c in 0..d {
                row[k * d + c] = row[km * d + c] + h * (gv[km * d + c] + gv[k * d + c]);
                area[e + c] = area[em + c] + h * (col[km * d + c] + col[k * d + c]);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn backward_integrals(
    g: &Grid,
    b: &Block,
    d: usize,
    gv: &[f64],
    clip: Option<&Clip>,
    col: &mut [f64],
    row: &mut [f64],
    area: &mut [f64],
) {
    let nrows = b.jmax() - b.j0 + 1;
    // column suffix integrals up to the arc
    for i in b.i0..=b.i1 {
        let top = b.tops[i - b.i0];
        let kt = b.loc(i, top);
        for c in 0..d {
            col[kt * d + c] = 0.0;
        }
        if let Some(cl) = clip {
            if let Some((bn, gap)) = cl.col_tail[i - b.i0] {
                for c in 0..d {
                    col[kt * d + c] = 0.5 * gap * (gv[kt * d + c] + cl.arc_g[bn * d + c]);
                }
            }
        }
        for j in (b.j0..top).rev() {
            let (k, kp) = (b.loc(i, j), b.loc(i, j + 1));
            let h = 0.5 * (g.t[j + 1] - g.t[j]);
            for c in 0..d {
                col[k * d + c] = col[kp * d + c] + h * (gv[k * d + c] + gv[kp * d + c]);
            }
        }
    }
    // row suffix integrals up to the arc
    for j in b.j0..=b.jmax() {
        let end = b.row_end[j - b.j0];
        let ke = b.loc(end, j);
        for c in 0..d {
            row[ke * d + c] = 0.0;
        }
        if let Some(cl) = clip {
            if let Some((bn, gap)) = cl.row_tail[j - b.j0] {
                for c in 0..d {
                    row[ke * d + c] = 0.5 * gap * (gv[ke * d + c] + cl.arc_g[bn * d + c]);
                }
            }
        }
        for i in (b.i0..end).rev() {
            let (k, kp) = (b.loc(i, j), b.loc(i + 1, j));
            let h = 0.5 * (g.s[i + 1] - g.s[i]);
            for c in 0..d {
                row[k * d + c] = row[kp * d + c] + h * (gv[k * d + c] + gv[kp * d + c]);
            }
        }
    }
    // area suffix sums over cells
    let at = |i: usize, j: usize| ((i - b.i0) * (nrows + 1) + (j - b.j0)) * d;
    let mut cell = vec![0.0; d];
    for i in (b.i0..=b.i1).rev() {
        for j in (b.j0..=b.jmax() + 1).rev() {
            let e = at(i, j);
            if j > b.jmax() || i == b.i1 {
                for c in 0..d {
                    area[e + c] = 0.0;
                }
                continue;
            }
            cell.iter_mut().for_each(|v| *v = 0.0);
            if j < b.jmax() {
                cell_integral(g, b, d, gv, clip, i, j, &mut cell);
            }
            let (er, eu, ed) = (at(i + 1, j), at(i, j + 1), at(i + 1, j + 1));
            for c in 0..d {
                area[e + c] = cell[c] + area[er + c] + area[eu + c] - area[ed + c];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn cell_integral(g: &Grid, b: &Block, d: usize, gv: &[f64], clip: Option<&Clip>, i: usize, j: usize, out: &mut [f64]) {
    let kind = match clip {
        Some(cl) => cl.dom.cell(i, j),
        None => {
            if b.local(i, j + 1).is_some() && b.local(i + 1, j + 1).is_some() {
                CellKind::Full
            } else {
                CellKind::Outside
            }
        }
    };
    match kind {
        CellKind::Outside => {}
        CellKind::Full => {
            let w = 0.25 * (g.s[i + 1] - g.s[i]) * (g.t[j + 1] - g.t[j]);
            let ks = [b.loc(i, j), b.loc(i + 1, j), b.loc(i, j + 1), b.loc(i + 1, j + 1)];
            for k in ks {
                for c in 0..d {
                    out[c] += w * gv[k * d + c];
                }
            }
        }
        CellKind::Cut(cc) => {
            let cl = clip.unwrap();
            for &(r, w) in &cl.dom.cuts[cc].weights {
                match r {
                    PointRef::Node(n) => {
                        let (ni, nj) = g.ij(n);
                        let k = b.loc(ni, nj);
                        for c in 0..d {
                            out[c] += w * gv[k * d + c];
                        }
                    }
                    PointRef::Bnd(bn) => {
                        for c in 0..d {
                            out[c] += w * cl.arc_g[bn * d + c];
                        }
                    }
                }
            }
        }
    }
}
