//! Domain geometry: the region G under a non-increasing boundary curve from
//! `(a, 0)` to `(0, b)`, its vertices, a vertex-aligned tensor grid, cut-cell
//! quadrature, boundary nodes, zones and the vertex-set primitives.
//!
//! Grid nodes are indexed column-major: `idx = i * nt + j` for the node
//! `(s[i], t[j])`, so each column is contiguous in memory.

mod curve;
mod quadrature;
mod zones;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use curve::{ArcKind, BoundaryArc, CurveSpec};
pub use quadrature::ArcStencil;
pub use zones::{RectZone, Region, RegionKind, TriangleZone, VertexSets, Zones};

pub const TOL_GEOM: f64 = 1e-10;

pub type Point = [f64; 2];

/// Membership of a grid node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Inside,
    OnArc,
    OnFlat,
    Outside,
}

impl NodeKind {
    pub fn in_domain(self) -> bool {
        self != NodeKind::Outside
    }
}

/// Local refinement band: intervals inside `s` (resp. `t`) get spacing `h`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Refinement {
    pub s: [f64; 2],
    pub t: [f64; 2],
    pub h: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GridOptions {
    pub h_max: f64,
    #[serde(default)]
    pub refine: Vec<Refinement>,
}

impl GridOptions {
    pub fn uniform(h_max: f64) -> GridOptions {
        GridOptions { h_max, refine: Vec::new() }
    }
}

#[derive(Clone, Debug)]
pub struct Grid {
    pub s: Vec<f64>,
    pub t: Vec<f64>,
    pub mask: Vec<NodeKind>,
    /// Highest row index inside G for each column.
    pub col_top: Vec<usize>,
    /// Rightmost column index inside G for each row.
    pub row_right: Vec<usize>,
}

impl Grid {
    #[inline]
    pub fn ns(&self) -> usize {
        self.s.len()
    }
    #[inline]
    pub fn nt(&self) -> usize {
        self.t.len()
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.s.len() * self.t.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        i * self.t.len() + j
    }
    #[inline]
    pub fn ij(&self, idx: usize) -> (usize, usize) {
        (idx / self.t.len(), idx % self.t.len())
    }
    #[inline]
    pub fn point(&self, idx: usize) -> Point {
        let (i, j) = self.ij(idx);
        [self.s[i], self.t[j]]
    }
    #[inline]
    pub fn inside(&self, i: usize, j: usize) -> bool {
        j <= self.col_top[i]
    }
    /// Node index of the grid line at coordinate `v`, if there is one.
    pub fn s_index(&self, v: f64) -> Option<usize> {
        find_line(&self.s, v)
    }
    pub fn t_index(&self, v: f64) -> Option<usize> {
        find_line(&self.t, v)
    }
    pub fn h_actual(&self) -> f64 {
        let hs = self.s.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        let ht = self.t.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        hs.max(ht)
    }
}

fn find_line(xs: &[f64], v: f64) -> Option<usize> {
    let k = xs.partition_point(|&x| x < v - 1e-12);
    (k < xs.len() && (xs[k] - v).abs() <= 1e-12).then_some(k)
}

/// A quadrature node on the boundary curve.
#[derive(Clone, Debug)]
pub struct BNode {
    pub arc: usize,
    pub lam: f64,
    pub p: Point,
    pub mu: f64,
    pub normal: Point,
    /// Grid column whose line passes through the point.
    pub col: Option<usize>,
    /// Grid row whose line passes through the point.
    pub row: Option<usize>,
    /// Grid node coinciding with the point.
    pub node: Option<usize>,
    /// Vertex index when the point is a vertex (one-sided copy per arc).
    pub vertex: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointRef {
    Node(usize),
    Bnd(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Full,
    Cut(usize),
    Outside,
}

/// Cell clipped by an oblique arc; the arc is replaced by its chord.
#[derive(Clone, Debug)]
pub struct CutCell {
    pub arc: usize,
    pub polygon: Vec<(PointRef, Point)>,
    pub weights: Vec<(PointRef, f64)>,
    pub area: f64,
}

#[derive(Clone, Debug)]
pub struct Domain {
    pub a: f64,
    pub b: f64,
    pub arcs: Vec<BoundaryArc>,
    pub vertices: Vec<Point>,
    pub vertex_node: Vec<usize>,
    pub total_length: f64,
    pub grid: Grid,
    pub bnodes: Vec<BNode>,
    /// Range of `bnodes` belonging to each arc.
    pub arc_bnodes: Vec<std::ops::Range<usize>>,
    /// Row-major over cells: `c = i * (nt - 1) + j`.
    pub cells: Vec<CellKind>,
    pub cuts: Vec<CutCell>,
    /// Extrapolation stencil for each boundary node from inside nodes.
    pub stencils: Vec<ArcStencil>,
    pub zones: Zones,
    /// Covering non-vertical arc of each column interval.
    pub col_arc: Vec<usize>,
    /// Covering non-horizontal arc of each row interval.
    pub row_arc: Vec<usize>,
}

impl Domain {
    #[inline]
    pub fn cell(&self, i: usize, j: usize) -> CellKind {
        self.cells[i * (self.grid.nt() - 1) + j]
    }

    /// Largest t with `(s, t)` on the boundary (closed convention).
    pub fn top(&self, s: f64) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for arc in &self.arcs {
            let [lo, hi] = arc.s_range();
            if s < lo - TOL_GEOM || s > hi + TOL_GEOM {
                continue;
            }
            let v = match arc.kind {
                ArcKind::FlatT => arc.endpoints[1][1],
                _ => arc.theta2(s).unwrap(),
            };
            best = best.max(v);
        }
        best
    }

    /// Largest s with `(s, t)` on the boundary (closed convention).
    pub fn right(&self, t: f64) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for arc in &self.arcs {
            let [lo, hi] = arc.t_range();
            if t < lo - TOL_GEOM || t > hi + TOL_GEOM {
                continue;
            }
            let v = match arc.kind {
                ArcKind::FlatS => arc.endpoints[0][0],
                _ => arc.theta1(t).unwrap(),
            };
            best = best.max(v);
        }
        best
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= -TOL_GEOM
            && p[1] >= -TOL_GEOM
            && p[0] <= self.a + TOL_GEOM
            && p[1] <= self.b + TOL_GEOM
            && p[1] <= self.top(p[0].clamp(0.0, self.a)) + 1e-9
    }

    pub fn on_boundary(&self, p: Point) -> bool {
        self.contains(p) && self.locate_on_boundary(p).is_ok()
    }

    /// True when `p` lies on a line s = s(P_r) or t = t(P_r).
    pub fn on_vertex_line(&self, p: Point) -> bool {
        self.vertices
            .iter()
            .any(|v| (v[0] - p[0]).abs() <= 1e-12 || (v[1] - p[1]).abs() <= 1e-12)
    }

    /// Interior node off every vertex line (the regular part G_R).
    pub fn is_regular_node(&self, idx: usize) -> bool {
        self.grid.mask[idx] == NodeKind::Inside && !self.on_vertex_line(self.grid.point(idx))
    }

    /// Index of the boundary node list entries of arc `k`.
    pub fn arc_nodes(&self, k: usize) -> &[BNode] {
        &self.bnodes[self.arc_bnodes[k].clone()]
    }

    pub fn zone_decomposition(&self) -> &Zones {
        &self.zones
    }

    /// Outward unit normal at global arc length `mu`.
    pub fn outward_normal(&self, mu: f64) -> Result<Point> {
        for (k, arc) in self.arcs.iter().enumerate() {
            let [m0, m1] = arc.mu_range;
            let at_vertex = |m: f64| (mu - m).abs() <= 1e-9;
            if at_vertex(m0) || at_vertex(m1) {
                return Err(Error::AtVertex(mu));
            }
            if mu > m0 && mu < m1 {
                return Ok(self.arcs[k].normal(arc.lambda_at_mu(mu)));
            }
        }
        Err(Error::AtVertex(mu))
    }

    /// Boundary points `A_t = (theta1(t), t)` and `B_s = (s, theta2(s))`.
    pub fn corner_points(&self, p: Point) -> Result<(Point, Point)> {
        if !self.contains(p) {
            return Err(Error::OutsideDomain(p[0], p[1]));
        }
        Ok(([self.right(p[1]), p[1]], [p[0], self.top(p[0])]))
    }

    /// Locates a boundary point: returns (arc, lambda).
    pub fn locate_on_boundary(&self, p: Point) -> Result<(usize, f64)> {
        let mut best: Option<(f64, usize, f64)> = None;
        for (k, arc) in self.arcs.iter().enumerate() {
            let [s0, s1] = arc.s_range();
            let [t0, t1] = arc.t_range();
            if p[0] < s0 - 1e-9 || p[0] > s1 + 1e-9 || p[1] < t0 - 1e-9 || p[1] > t1 + 1e-9 {
                continue;
            }
            let lam = match arc.kind {
                ArcKind::FlatT => arc.lambda_at_t(p[1]),
                _ => arc.lambda_at_s(p[0]),
            };
            let q = arc.point(lam);
            let d = (q[0] - p[0]).hypot(q[1] - p[1]);
            if best.map_or(true, |b| d < b.0) {
                best = Some((d, k, lam));
            }
        }
        match best {
            Some((d, k, lam)) if d <= 1e-8 => Ok((k, lam)),
            _ => Err(Error::NotOnBoundary(p[0], p[1])),
        }
    }

    /// Global arc length of a boundary point.
    pub fn mu_of(&self, p: Point) -> Result<f64> {
        let (k, lam) = self.locate_on_boundary(p)?;
        Ok(self.arcs[k].mu_at(lam))
    }

    /// Plotting export: vertices, sampled arcs and grid lines.
    pub fn to_json(&self) -> serde_json::Value {
        let arcs: Vec<serde_json::Value> = self
            .arcs
            .iter()
            .map(|a| {
                serde_json::json!({
                    "kind": a.kind,
                    "mu_range": a.mu_range,
                    "endpoints": a.endpoints,
                    "samples": a.samples(if a.is_flat() { 1 } else { 64 }),
                })
            })
            .collect();
        serde_json::json!({
            "a": self.a,
            "b": self.b,
            "total_length": self.total_length,
            "vertices": self.vertices,
            "arcs": arcs,
            "s_nodes": self.grid.s,
            "t_nodes": self.grid.t,
        })
    }
}

/// `(phi_mu, phi_n, phi_nstar)` from the Cartesian derivatives and a unit normal.
pub fn directional_derivatives(phi_s: f64, phi_t: f64, n: Point) -> (f64, f64, f64) {
    (
        -n[1] * phi_s + n[0] * phi_t,
        n[0] * phi_s + n[1] * phi_t,
        n[1] * phi_s + n[0] * phi_t,
    )
}

/// Builds a domain from counterclockwise arcs, optional extra vertices on the
/// curve and grid options.
pub fn build_domain(specs: &[CurveSpec], extra_vertices: &[Point], opts: &GridOptions) -> Result<Domain> {
    if specs.is_empty() {
        return Err(Error::DisconnectedCurve("no arcs given".into()));
    }
    if !(opts.h_max > 0.0) {
        return Err(Error::ConfigInvalid("h_max must be positive".into()));
    }
    let curves: Vec<curve::Curve> = specs
        .iter()
        .map(curve::Curve::from_spec)
        .collect::<std::result::Result<_, _>>()
        .map_err(Error::ConfigInvalid)?;

    // Connectivity and global endpoints.
    let mut ends: Vec<(Point, Point)> = curves.iter().map(|c| (c.point(0.0), c.point(1.0))).collect();
    for k in 0..ends.len() {
        if k + 1 < ends.len() {
            let (p, q) = (ends[k].1, ends[k + 1].0);
            if (p[0] - q[0]).abs() > TOL_GEOM || (p[1] - q[1]).abs() > TOL_GEOM {
                return Err(Error::DisconnectedCurve(format!(
                    "arc {} ends at ({}, {}) but arc {} starts at ({}, {})",
                    k,
                    p[0],
                    p[1],
                    k + 1,
                    q[0],
                    q[1]
                )));
            }
        }
    }
    let first = ends[0].0;
    let last = ends[ends.len() - 1].1;
    if first[1].abs() > TOL_GEOM || last[0].abs() > TOL_GEOM {
        return Err(Error::DisconnectedCurve(format!(
            "curve must run from (a, 0) to (0, b); got ({}, {}) to ({}, {})",
            first[0], first[1], last[0], last[1]
        )));
    }
    let a = first[0];
    let b = last[1];
    if !(a > 0.0 && b > 0.0) {
        return Err(Error::DisconnectedCurve("a and b must be positive".into()));
    }
    ends[0].0 = [a, 0.0];
    let n_end = ends.len() - 1;
    ends[n_end].1 = [0.0, b];

    // Monotonicity on dense samples.
    for (k, c) in curves.iter().enumerate() {
        let m = 512;
        let mut prev = c.point(0.0);
        for q in 1..=m {
            let p = c.point(q as f64 / m as f64);
            if p[0] > prev[0] + 1e-12 || p[1] < prev[1] - 1e-12 {
                return Err(Error::NonMonotoneBoundary(format!(
                    "arc {} is not non-increasing near ({:.6}, {:.6})",
                    k, p[0], p[1]
                )));
            }
            prev = p;
        }
        let d = c.deriv(0.5);
        if d[0] > 1e-14 || d[1] < -1e-14 {
            return Err(Error::NonMonotoneBoundary(format!("arc {} runs clockwise", k)));
        }
    }

    // Split arcs at the extra vertices.
    let mut pieces: Vec<(usize, [f64; 2], [Point; 2])> = Vec::new();
    for (k, c) in curves.iter().enumerate() {
        let probe = BoundaryArc::new(c.clone(), [0.0, 1.0], [ends[k].0, ends[k].1]);
        let mut cuts: Vec<(f64, Point)> = Vec::new();
        for v in extra_vertices {
            let [s0, s1] = probe.s_range();
            let [t0, t1] = probe.t_range();
            if v[0] < s0 - 1e-9 || v[0] > s1 + 1e-9 || v[1] < t0 - 1e-9 || v[1] > t1 + 1e-9 {
                continue;
            }
            let lam = match probe.kind {
                ArcKind::FlatT => probe.lambda_at_t(v[1]),
                _ => probe.lambda_at_s(v[0]),
            };
            let q = probe.point(lam);
            if (q[0] - v[0]).hypot(q[1] - v[1]) > 1e-8 {
                continue;
            }
            if lam <= 1e-12 || lam >= 1.0 - 1e-12 {
                continue;
            }
            if !cuts.iter().any(|(l, _)| (l - lam).abs() < 1e-12) {
                cuts.push((lam, *v));
            }
        }
        cuts.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut lam0 = 0.0;
        let mut p0 = ends[k].0;
        for (lam, v) in cuts {
            pieces.push((k, [lam0, lam], [p0, v]));
            lam0 = lam;
            p0 = v;
        }
        pieces.push((k, [lam0, 1.0], [p0, ends[k].1]));
    }
    for v in extra_vertices {
        let on = pieces.iter().any(|(_, _, e)| {
            (e[0][0] - v[0]).hypot(e[0][1] - v[1]) <= 1e-8 || (e[1][0] - v[0]).hypot(e[1][1] - v[1]) <= 1e-8
        });
        if !on {
            return Err(Error::NotOnBoundary(v[0], v[1]));
        }
    }

    // Snap vertex coordinates so that equal coordinates are bitwise equal.
    let mut vertices: Vec<Point> = Vec::new();
    for (_, _, e) in &pieces {
        vertices.push(e[0]);
    }
    vertices.push(pieces.last().unwrap().2[1]);
    let mut s_lines: Vec<f64> = Vec::new();
    let mut t_lines: Vec<f64> = Vec::new();
    for v in &vertices {
        if !s_lines.iter().any(|x| (x - v[0]).abs() <= 1e-9) {
            s_lines.push(v[0]);
        }
        if !t_lines.iter().any(|x| (x - v[1]).abs() <= 1e-9) {
            t_lines.push(v[1]);
        }
    }
    let snap = |lines: &[f64], x: f64| *lines.iter().find(|l| (*l - x).abs() <= 1e-9).unwrap();
    for v in vertices.iter_mut() {
        v[0] = snap(&s_lines, v[0]);
        v[1] = snap(&t_lines, v[1]);
    }

    let mut arcs: Vec<BoundaryArc> = Vec::new();
    let mut keep_vertices = vec![vertices[0]];
    let mut mu = 0.0;
    for (q, (k, lam, _)) in pieces.iter().enumerate() {
        let e = [vertices[q], vertices[q + 1]];
        if (e[0][0] - e[1][0]).hypot(e[0][1] - e[1][1]) <= TOL_GEOM {
            continue;
        }
        let mut arc = BoundaryArc::new(curves[*k].clone(), *lam, e);
        let len = arc.mu_range[1];
        arc.mu_range = [mu, mu + len];
        mu += len;
        arcs.push(arc);
        keep_vertices.push(e[1]);
    }
    let vertices = keep_vertices;
    s_lines.sort_by(f64::total_cmp);
    t_lines.sort_by(f64::total_cmp);

    let s_nodes = axis_nodes(&s_lines, 0, opts);
    let t_nodes = axis_nodes(&t_lines, 1, opts);
    let ns = s_nodes.len();
    let nt = t_nodes.len();

    let mut dom = Domain {
        a,
        b,
        arcs,
        vertices,
        vertex_node: Vec::new(),
        total_length: mu,
        grid: Grid { s: s_nodes, t: t_nodes, mask: Vec::new(), col_top: Vec::new(), row_right: Vec::new() },
        bnodes: Vec::new(),
        arc_bnodes: Vec::new(),
        cells: Vec::new(),
        cuts: Vec::new(),
        stencils: Vec::new(),
        zones: Zones::default(),
        col_arc: Vec::new(),
        row_arc: Vec::new(),
    };

    // Node membership.
    let tops: Vec<f64> = dom.grid.s.iter().map(|&s| dom.top(s)).collect();
    let rights: Vec<f64> = dom.grid.t.iter().map(|&t| dom.right(t)).collect();
    let mut mask = vec![NodeKind::Outside; ns * nt];
    let mut col_top = vec![0usize; ns];
    let mut row_right = vec![0usize; nt];
    for i in 0..ns {
        for j in 0..nt {
            let (s, t) = (dom.grid.s[i], dom.grid.t[j]);
            if t > tops[i] + 1e-12 {
                continue;
            }
            let on = t >= tops[i] - 1e-12 || s >= rights[j] - 1e-12;
            mask[i * nt + j] = if dom.on_flat_part([s, t]) {
                NodeKind::OnFlat
            } else if on {
                NodeKind::OnArc
            } else {
                NodeKind::Inside
            };
            col_top[i] = j;
            row_right[j] = row_right[j].max(i);
        }
    }
    dom.grid.mask = mask;
    dom.grid.col_top = col_top;
    dom.grid.row_right = row_right;
    dom.vertex_node = dom
        .vertices
        .iter()
        .map(|v| dom.grid.idx(dom.grid.s_index(v[0]).unwrap(), dom.grid.t_index(v[1]).unwrap()))
        .collect();

    dom.col_arc = (0..ns - 1)
        .map(|i| {
            let mid = 0.5 * (dom.grid.s[i] + dom.grid.s[i + 1]);
            dom.arcs
                .iter()
                .position(|a| a.kind != ArcKind::FlatT && a.s_range()[0] < mid && mid < a.s_range()[1])
                .expect("column interval without covering arc")
        })
        .collect();
    dom.row_arc = (0..nt - 1)
        .map(|j| {
            let mid = 0.5 * (dom.grid.t[j] + dom.grid.t[j + 1]);
            dom.arcs
                .iter()
                .position(|a| a.kind != ArcKind::FlatS && a.t_range()[0] < mid && mid < a.t_range()[1])
                .expect("row interval without covering arc")
        })
        .collect();

    quadrature::build_boundary_nodes(&mut dom);
    quadrature::build_cells(&mut dom);
    dom.stencils = (0..dom.bnodes.len()).map(|b| dom.arc_stencil(b, 0, 0)).collect();
    dom.zones = zones::build_zones(&dom);
    Ok(dom)
}

impl Domain {
    fn on_flat_part(&self, p: Point) -> bool {
        self.arcs.iter().any(|arc| match arc.kind {
            ArcKind::FlatT => {
                (p[0] - arc.endpoints[0][0]).abs() <= 1e-12
                    && p[1] >= arc.endpoints[0][1] - 1e-12
                    && p[1] <= arc.endpoints[1][1] + 1e-12
            }
            ArcKind::FlatS => {
                (p[1] - arc.endpoints[0][1]).abs() <= 1e-12
                    && p[0] <= arc.endpoints[0][0] + 1e-12
                    && p[0] >= arc.endpoints[1][0] - 1e-12
            }
            ArcKind::Oblique => false,
        })
    }
}

fn axis_nodes(lines: &[f64], axis: usize, opts: &GridOptions) -> Vec<f64> {
    let lo = lines[0];
    let hi = *lines.last().unwrap();
    let mut breaks: Vec<f64> = lines.to_vec();
    for r in &opts.refine {
        let band = if axis == 0 { r.s } else { r.t };
        for x in band {
            if x > lo && x < hi && !breaks.iter().any(|b| (b - x).abs() <= 1e-9) {
                breaks.push(x);
            }
        }
    }
    breaks.sort_by(f64::total_cmp);
    let mut nodes = vec![breaks[0]];
    for w in breaks.windows(2) {
        let (x0, x1) = (w[0], w[1]);
        let mut h = opts.h_max;
        for r in &opts.refine {
            let band = if axis == 0 { r.s } else { r.t };
            if r.h > 0.0 && x0 >= band[0] - 1e-9 && x1 <= band[1] + 1e-9 {
                h = h.min(r.h);
            }
        }
        let n = (((x1 - x0) / h) - 1e-9).ceil().max(1.0) as usize;
        for k in 1..n {
            nodes.push(x0 + (x1 - x0) * k as f64 / n as f64);
        }
        nodes.push(x1);
    }
    nodes
}

/// Ready-made boundary descriptions.
pub mod shapes {
    use super::{CurveSpec, Point};
    use std::f64::consts::FRAC_PI_2;

    pub fn rectangle(a: f64, b: f64) -> Vec<CurveSpec> {
        vec![
            CurveSpec::Segment { from: [a, 0.0], to: [a, b] },
            CurveSpec::Segment { from: [a, b], to: [0.0, b] },
        ]
    }

    pub fn quarter_disk(r: f64) -> Vec<CurveSpec> {
        vec![CurveSpec::Ellipse { center: [0.0, 0.0], radii: [r, r], theta: [0.0, FRAC_PI_2] }]
    }

    /// Boundary polyline through the given corner points.
    pub fn polyline(points: &[Point]) -> Vec<CurveSpec> {
        points.windows(2).map(|w| CurveSpec::Segment { from: w[0], to: w[1] }).collect()
    }

    /// Staircase `(2,0) -> (2,1) -> (1,1) -> (1,2) -> (0,2)`.
    pub fn staircase() -> Vec<CurveSpec> {
        polyline(&[[2.0, 0.0], [2.0, 1.0], [1.0, 1.0], [1.0, 2.0], [0.0, 2.0]])
    }

    /// Triangle `s + t <= a`.
    pub fn triangle(a: f64) -> Vec<CurveSpec> {
        vec![CurveSpec::Segment { from: [a, 0.0], to: [0.0, a] }]
    }
}
