//! Zones of G and the vertex sets attached to boundary points.
//!
//! The distinct vertex coordinates cut G into a lattice of cells. A lattice
//! cell whose columns are covered by arc `k` and whose rows are covered by
//! arc `j` is the rectangle `Q_{j,k}` when `k > j`, the curvilinear triangle
//! `D_j` when `k = j`, and lies outside G otherwise. Its zone is `k - j`.

use serde::Serialize;

use crate::error::{Error, Result};

use super::{Domain, Point};

#[derive(Clone, Debug, Serialize)]
pub struct TriangleZone {
    pub j: usize,
    pub arc: usize,
    /// Corner `V_{j,j+1} = (s(P_{j+1}), t(P_j))`.
    pub corner: Point,
    pub degenerate: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct RectZone {
    pub j: usize,
    pub k: usize,
    /// `V_{j,k}, V_{j+1,k}, V_{j,k+1}, V_{j+1,k+1}`.
    pub corners: [Point; 4],
    pub degenerate: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum RegionKind {
    Rect { j: usize, k: usize },
    Tri { j: usize },
}

/// A non-degenerate zone region with its grid block.
#[derive(Clone, Debug, Serialize)]
pub struct Region {
    pub id: usize,
    pub kind: RegionKind,
    pub zone: usize,
    /// Lattice cell `(p, q)`.
    pub p: usize,
    pub q: usize,
    /// Inclusive grid index ranges of the bounding block.
    pub i_range: (usize, usize),
    pub j_range: (usize, usize),
}

impl Region {
    pub fn is_tri(&self) -> bool {
        matches!(self.kind, RegionKind::Tri { .. })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Zones {
    pub triangles: Vec<TriangleZone>,
    pub rectangles: Vec<RectZone>,
    /// Non-degenerate regions sorted by zone index.
    pub regions: Vec<Region>,
    pub zone_of: Vec<usize>,
    pub sigma: Vec<f64>,
    pub tau: Vec<f64>,
    pub sigma_idx: Vec<usize>,
    pub tau_idx: Vec<usize>,
    lattice: Vec<Option<usize>>,
    /// Region of every grid cell, row-major like `Domain::cells`.
    pub cell_region: Vec<Option<usize>>,
}

impl Zones {
    pub fn region_at_lattice(&self, p: usize, q: usize) -> Option<usize> {
        if p + 1 >= self.sigma.len() || q + 1 >= self.tau.len() {
            return None;
        }
        self.lattice[p * (self.tau.len() - 1) + q]
    }

    /// Lattice interval containing grid interval `[x_i, x_{i+1}]`.
    pub fn sigma_interval(&self, i: usize) -> usize {
        self.sigma_idx.partition_point(|&k| k <= i) - 1
    }

    pub fn tau_interval(&self, j: usize) -> usize {
        self.tau_idx.partition_point(|&k| k <= j) - 1
    }
}

pub(super) fn build_zones(dom: &Domain) -> Zones {
    let g = &dom.grid;
    let n_arcs = dom.arcs.len();
    let v = &dom.vertices;
    let triangles = (0..n_arcs)
        .map(|j| TriangleZone { j, arc: j, corner: [v[j + 1][0], v[j][1]], degenerate: dom.arcs[j].is_flat() })
        .collect();
    let mut rectangles = Vec::new();
    for j in 0..n_arcs {
        for k in j + 1..n_arcs {
            let corners = [[v[k][0], v[j][1]], [v[k][0], v[j + 1][1]], [v[k + 1][0], v[j][1]], [v[k + 1][0], v[j + 1][1]]];
            let degenerate = v[k][0] == v[k + 1][0] || v[j][1] == v[j + 1][1];
            rectangles.push(RectZone { j, k, corners, degenerate });
        }
    }

    let mut sigma: Vec<f64> = v.iter().map(|p| p[0]).collect();
    sigma.sort_by(f64::total_cmp);
    sigma.dedup();
    let mut tau: Vec<f64> = v.iter().map(|p| p[1]).collect();
    tau.sort_by(f64::total_cmp);
    tau.dedup();
    let sigma_idx: Vec<usize> = sigma.iter().map(|&x| g.s_index(x).unwrap()).collect();
    let tau_idx: Vec<usize> = tau.iter().map(|&x| g.t_index(x).unwrap()).collect();

    let (np, nq) = (sigma.len() - 1, tau.len() - 1);
    let mut cand = Vec::new();
    for p in 0..np {
        let k = dom.col_arc[sigma_idx[p]];
        for q in 0..nq {
            let j = dom.row_arc[tau_idx[q]];
            if k < j {
                continue;
            }
            let kind = if k == j { RegionKind::Tri { j } } else { RegionKind::Rect { j, k } };
            cand.push((k - j, p, q, kind));
        }
    }
    // Stable order: zone, then right-to-left, then bottom-to-top.
    cand.sort_by(|x, y| x.0.cmp(&y.0).then(y.1.cmp(&x.1)).then(x.2.cmp(&y.2)));
    let mut lattice = vec![None; np * nq];
    let mut regions = Vec::new();
    let mut zone_of = Vec::new();
    for (id, (zone, p, q, kind)) in cand.into_iter().enumerate() {
        lattice[p * nq + q] = Some(id);
        zone_of.push(zone);
        regions.push(Region {
            id,
            kind,
            zone,
            p,
            q,
            i_range: (sigma_idx[p], sigma_idx[p + 1]),
            j_range: (tau_idx[q], tau_idx[q + 1]),
        });
    }
    let mut zones = Zones {
        triangles,
        rectangles,
        regions,
        zone_of,
        sigma,
        tau,
        sigma_idx,
        tau_idx,
        lattice,
        cell_region: Vec::new(),
    };
    let (ns, nt) = (g.ns(), g.nt());
    let mut cell_region = vec![None; (ns - 1) * (nt - 1)];
    for i in 0..ns - 1 {
        let p = zones.sigma_interval(i);
        for j in 0..nt - 1 {
            if dom.cells[i * (nt - 1) + j] == super::CellKind::Outside {
                continue;
            }
            cell_region[i * (nt - 1) + j] = zones.region_at_lattice(p, zones.tau_interval(j));
        }
    }
    zones.cell_region = cell_region;
    zones
}

/// Vertex sets of a boundary point `P`.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct VertexSets {
    pub p: Point,
    /// Vertices (by index) above P on the vertical flat segment through P.
    pub t_set: Vec<usize>,
    /// Vertices (by index) right of P on the horizontal flat segment through P.
    pub s_set: Vec<usize>,
    /// Vertical flat segment from P upward (P excluded), if any.
    pub l_t: Option<[Point; 2]>,
    /// Horizontal flat segment from P rightward (P excluded), if any.
    pub l_s: Option<[Point; 2]>,
    /// Vertex index of P when P is a vertex.
    pub p_vertex: Option<usize>,
}

impl VertexSets {
    /// `V(P) = T(P) u S(P) u {P}` as points.
    pub fn v_set(&self, dom: &Domain) -> Vec<Point> {
        let mut out = vec![self.p];
        out.extend(self.t_set.iter().chain(&self.s_set).map(|&r| dom.vertices[r]));
        out
    }
}

impl Domain {
    /// Vertex sets of a boundary point. Counterclockwise traversal moves up
    /// along vertical segments and left along horizontal ones, so the points
    /// subsequent to P on a vertical segment lie above it and the points
    /// preceding P on a horizontal segment lie to its right.
    pub fn vertex_sets(&self, p: Point) -> Result<VertexSets> {
        if !self.on_boundary(p) {
            return Err(Error::NotOnBoundary(p[0], p[1]));
        }
        let top = self.top(p[0]);
        let right = self.right(p[1]);
        let l_t = (top > p[1] + 1e-12).then_some([p, [p[0], top]]);
        let l_s = (right > p[0] + 1e-12).then_some([p, [right, p[1]]]);
        let same = |x: f64, y: f64| (x - y).abs() <= 1e-12;
        let t_set = match l_t {
            Some(_) => (0..self.vertices.len())
                .filter(|&r| same(self.vertices[r][0], p[0]) && self.vertices[r][1] > p[1] + 1e-12)
                .collect(),
            None => Vec::new(),
        };
        let s_set = match l_s {
            Some(_) => (0..self.vertices.len())
                .filter(|&r| same(self.vertices[r][1], p[1]) && self.vertices[r][0] > p[0] + 1e-12)
                .collect(),
            None => Vec::new(),
        };
        let p_vertex = self.vertices.iter().position(|v| same(v[0], p[0]) && same(v[1], p[1]));
        Ok(VertexSets { p, t_set, s_set, l_t, l_s, p_vertex })
    }
}
