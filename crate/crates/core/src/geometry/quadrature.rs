//! Boundary nodes, cut cells and the quadrature rules built on them.
//!
//! Full cells use the product trapezoid rule. A cell crossed by an oblique
//! arc is clipped to the polygon below the chord joining the two crossing
//! points and integrated by a fan of triangles with vertex weights area/3.
//! Values at crossing points come from quadratic extrapolation along the
//! grid line through the point.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numeric::lagrange_weights;

use super::{ArcKind, BNode, CellKind, CutCell, Domain, Point, PointRef};

/// Weights of inside grid nodes reproducing the value at a boundary node.
pub type ArcStencil = Vec<(usize, f64)>;

pub(super) fn build_boundary_nodes(dom: &mut Domain) {
    let g = &dom.grid;
    let mut all: Vec<BNode> = Vec::new();
    let mut ranges = Vec::new();
    for (k, arc) in dom.arcs.iter().enumerate() {
        // (lambda, col, row)
        let mut items: Vec<(f64, Option<usize>, Option<usize>)> = Vec::new();
        let e0 = arc.endpoints[0];
        let e1 = arc.endpoints[1];
        items.push((arc.lam[0], g.s_index(e0[0]), g.t_index(e0[1])));
        items.push((arc.lam[1], g.s_index(e1[0]), g.t_index(e1[1])));
        let [slo, shi] = arc.s_range();
        let [tlo, thi] = arc.t_range();
        if arc.kind != ArcKind::FlatT {
            for (i, &s) in g.s.iter().enumerate() {
                if s > slo + 1e-12 && s < shi - 1e-12 {
                    let lam = arc.lambda_at_s(s);
                    let t = arc.point(lam)[1];
                    items.push((lam, Some(i), g.t_index(t)));
                }
            }
        }
        if arc.kind != ArcKind::FlatS {
            for (j, &t) in g.t.iter().enumerate() {
                if t > tlo + 1e-12 && t < thi - 1e-12 {
                    let lam = arc.lambda_at_t(t);
                    let s = arc.point(lam)[0];
                    items.push((lam, g.s_index(s), Some(j)));
                }
            }
        }
        items.sort_by(|x, y| x.0.total_cmp(&y.0));
        let mut merged: Vec<(f64, Option<usize>, Option<usize>)> = Vec::new();
        for it in items {
            if let Some(last) = merged.last_mut() {
                let same_line = arc.kind == ArcKind::Oblique
                    && ((it.1.is_some() && it.1 == last.1) || (it.2.is_some() && it.2 == last.2));
                if (it.0 - last.0).abs() <= 1e-13 || same_line {
                    last.1 = last.1.or(it.1);
                    last.2 = last.2.or(it.2);
                    continue;
                }
            }
            merged.push(it);
        }
        let start = all.len();
        let mut mu = arc.mu_range[0];
        let mut prev_lam = arc.lam[0];
        let nm = merged.len();
        for (q, (lam, col, row)) in merged.into_iter().enumerate() {
            let mut p = arc.point(lam);
            if let Some(i) = col {
                p[0] = g.s[i];
            }
            if let Some(j) = row {
                p[1] = g.t[j];
            }
            if q > 0 {
                mu += arc.length_to(lam) - arc.length_to(prev_lam);
            }
            if q == nm - 1 {
                mu = arc.mu_range[1];
            }
            prev_lam = lam;
            let node = match (col, row) {
                (Some(i), Some(j)) => Some(g.idx(i, j)),
                _ => None,
            };
            let vertex = if q == 0 {
                Some(k)
            } else if q == nm - 1 {
                Some(k + 1)
            } else {
                None
            };
            all.push(BNode { arc: k, lam, p, mu, normal: arc.normal(lam), col, row, node, vertex });
        }
        ranges.push(start..all.len());
    }
    dom.bnodes = all;
    dom.arc_bnodes = ranges;
}

pub(super) fn build_cells(dom: &mut Domain) {
    let ns = dom.grid.ns();
    let nt = dom.grid.nt();
    let mut col_map: Vec<HashMap<usize, usize>> = vec![HashMap::new(); dom.arcs.len()];
    let mut row_map: Vec<HashMap<usize, usize>> = vec![HashMap::new(); dom.arcs.len()];
    for (b, bn) in dom.bnodes.iter().enumerate() {
        if let Some(i) = bn.col {
            col_map[bn.arc].insert(i, b);
        }
        if let Some(j) = bn.row {
            row_map[bn.arc].insert(j, b);
        }
    }
    let mut cells = vec![CellKind::Outside; (ns - 1) * (nt - 1)];
    let mut cuts = Vec::new();
    for i in 0..ns - 1 {
        let k = dom.col_arc[i];
        let arc = &dom.arcs[k];
        for j in 0..nt - 1 {
            let (s0, s1, t0, t1) = (dom.grid.s[i], dom.grid.s[i + 1], dom.grid.t[j], dom.grid.t[j + 1]);
            let c = i * (nt - 1) + j;
            match arc.kind {
                ArcKind::FlatS => {
                    if t1 <= arc.endpoints[0][1] + 1e-12 {
                        cells[c] = CellKind::Full;
                    }
                }
                ArcKind::FlatT => unreachable!(),
                ArcKind::Oblique => {
                    let hi = arc.theta2(s0).unwrap();
                    let lo = arc.theta2(s1).unwrap();
                    if t1 <= lo + 1e-12 {
                        cells[c] = CellKind::Full;
                    } else if t0 >= hi - 1e-12 {
                        cells[c] = CellKind::Outside;
                    } else {
                        let corners = [
                            (i, j, [s0, t0]),
                            (i + 1, j, [s1, t0]),
                            (i + 1, j + 1, [s1, t1]),
                            (i, j + 1, [s0, t1]),
                        ];
                        let inside: Vec<bool> =
                            corners.iter().map(|(_, _, p)| p[1] <= arc.theta2(p[0]).unwrap() + 1e-12).collect();
                        let mut poly: Vec<(PointRef, Point)> = Vec::new();
                        for e in 0..4 {
                            let (ci, cj, p) = corners[e];
                            if inside[e] {
                                poly.push((PointRef::Node(dom.grid.idx(ci, cj)), p));
                            }
                            let f = (e + 1) % 4;
                            if inside[e] != inside[f] {
                                // bottom/top edges are rows, right/left edges are columns
                                let b = match e {
                                    0 => row_map[k].get(&j),
                                    1 => col_map[k].get(&(i + 1)),
                                    2 => row_map[k].get(&(j + 1)),
                                    _ => col_map[k].get(&i),
                                };
                                if let Some(&b) = b {
                                    poly.push((PointRef::Bnd(b), dom.bnodes[b].p));
                                }
                            }
                        }
                        let mut clean: Vec<(PointRef, Point)> = Vec::new();
                        for item in poly {
                            let dup = clean
                                .iter()
                                .any(|(_, q)| (q[0] - item.1[0]).abs() < 1e-13 && (q[1] - item.1[1]).abs() < 1e-13);
                            if !dup {
                                clean.push(item);
                            }
                        }
                        let (weights, area) = fan_weights(&clean);
                        if area > 0.0 {
                            cells[c] = CellKind::Cut(cuts.len());
                            cuts.push(CutCell { arc: k, polygon: clean, weights, area });
                        }
                    }
                }
            }
        }
    }
    dom.cells = cells;
    dom.cuts = cuts;
}

fn fan_weights(poly: &[(PointRef, Point)]) -> (Vec<(PointRef, f64)>, f64) {
    let mut w: Vec<(PointRef, f64)> = Vec::new();
    let mut add = |r: PointRef, v: f64| {
        if let Some(e) = w.iter_mut().find(|e| e.0 == r) {
            e.1 += v;
        } else {
            w.push((r, v));
        }
    };
    let mut area = 0.0;
    if poly.len() < 3 {
        return (Vec::new(), 0.0);
    }
    let p0 = poly[0].1;
    for k in 1..poly.len() - 1 {
        let p1 = poly[k].1;
        let p2 = poly[k + 1].1;
        let tri = 0.5 * ((p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1])).abs();
        area += tri;
        add(poly[0].0, tri / 3.0);
        add(poly[k].0, tri / 3.0);
        add(poly[k + 1].0, tri / 3.0);
    }
    (w, area)
}

impl Domain {
    /// Extrapolation stencil for boundary node `b` using only inside nodes
    /// with column index `>= min_i` and row index `>= min_j`.
    pub fn arc_stencil(&self, b: usize, min_i: usize, min_j: usize) -> ArcStencil {
        let bn = &self.bnodes[b];
        let g = &self.grid;
        if let Some(n) = bn.node {
            return vec![(n, 1.0)];
        }
        if let Some(i) = bn.col {
            if i >= min_i {
                let jt = g.t.partition_point(|&t| t < bn.p[1]);
                let js: Vec<usize> = (0..jt).rev().filter(|&j| j >= min_j).take(3).collect();
                if !js.is_empty() {
                    let xs: Vec<f64> = js.iter().map(|&j| g.t[j]).collect();
                    let w = lagrange_weights(&xs, bn.p[1]);
                    return js.iter().zip(w).map(|(&j, w)| (g.idx(i, j), w)).collect();
                }
            }
        }
        if let Some(j) = bn.row {
            if j >= min_j {
                let it = g.s.partition_point(|&s| s < bn.p[0]);
                let is: Vec<usize> = (0..it).rev().filter(|&i| i >= min_i).take(3).collect();
                if !is.is_empty() {
                    let xs: Vec<f64> = is.iter().map(|&i| g.s[i]).collect();
                    let w = lagrange_weights(&xs, bn.p[0]);
                    return is.iter().zip(w).map(|(&i, w)| (g.idx(i, j), w)).collect();
                }
            }
        }
        Vec::new()
    }

    /// Values at every boundary node extrapolated from a node field with
    /// `dim` components per node.
    pub fn arc_values(&self, node_vals: &[f64], dim: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.bnodes.len() * dim];
        for (b, st) in self.stencils.iter().enumerate() {
            for &(n, w) in st {
                for c in 0..dim {
                    out[b * dim + c] += w * node_vals[n * dim + c];
                }
            }
        }
        out
    }

    /// Integral over grid cell `(i, j)` of a scalar field.
    #[inline]
    pub fn cell_integral(&self, i: usize, j: usize, node_vals: &[f64], bnd_vals: &[f64]) -> f64 {
        let g = &self.grid;
        match self.cell(i, j) {
            CellKind::Outside => 0.0,
            CellKind::Full => {
                let area = (g.s[i + 1] - g.s[i]) * (g.t[j + 1] - g.t[j]);
                0.25 * area
                    * (node_vals[g.idx(i, j)]
                        + node_vals[g.idx(i + 1, j)]
                        + node_vals[g.idx(i, j + 1)]
                        + node_vals[g.idx(i + 1, j + 1)])
            }
            CellKind::Cut(c) => self.cuts[c]
                .weights
                .iter()
                .map(|&(r, w)| {
                    w * match r {
                        PointRef::Node(n) => node_vals[n],
                        PointRef::Bnd(b) => bnd_vals[b],
                    }
                })
                .sum(),
        }
    }

    /// Integral over G of a scalar field given at nodes and boundary nodes.
    pub fn integrate_domain(&self, node_vals: &[f64], bnd_vals: &[f64]) -> f64 {
        let (ns, nt) = (self.grid.ns(), self.grid.nt());
        let mut acc = 0.0;
        for i in 0..ns - 1 {
            for j in 0..nt - 1 {
                acc += self.cell_integral(i, j, node_vals, bnd_vals);
            }
        }
        acc
    }

    /// Integrals over E(s_i, t_j) for every node, by suffix sums of cells.
    pub fn e_integral_table(&self, node_vals: &[f64], bnd_vals: &[f64]) -> Vec<f64> {
        let (ns, nt) = (self.grid.ns(), self.grid.nt());
        let mut sum = vec![0.0; ns * nt];
        for i in (0..ns).rev() {
            for j in (0..nt).rev() {
                let c = if i + 1 < ns && j + 1 < nt { self.cell_integral(i, j, node_vals, bnd_vals) } else { 0.0 };
                let right = if i + 1 < ns { sum[(i + 1) * nt + j] } else { 0.0 };
                let up = if j + 1 < nt { sum[i * nt + j + 1] } else { 0.0 };
                let diag = if i + 1 < ns && j + 1 < nt { sum[(i + 1) * nt + j + 1] } else { 0.0 };
                sum[i * nt + j] = c + right + up - diag;
            }
        }
        sum
    }

    /// Integral over E(s_i, t_j) for one node.
    pub fn integrate_e_node(&self, node_vals: &[f64], bnd_vals: &[f64], i0: usize, j0: usize) -> f64 {
        let (ns, nt) = (self.grid.ns(), self.grid.nt());
        let mut acc = 0.0;
        for i in i0..ns - 1 {
            for j in j0..nt - 1 {
                acc += self.cell_integral(i, j, node_vals, bnd_vals);
            }
        }
        acc
    }

    /// Integral over E(target). Off-node targets interpolate the node values
    /// of the integral bilinearly (the integral vanishes outside G).
    pub fn integrate_e(&self, node_vals: &[f64], bnd_vals: &[f64], target: Point) -> Result<f64> {
        if !self.contains(target) {
            return Err(Error::OutsideDomain(target[0], target[1]));
        }
        let g = &self.grid;
        if let (Some(i), Some(j)) = (g.s_index(target[0]), g.t_index(target[1])) {
            return Ok(self.integrate_e_node(node_vals, bnd_vals, i, j));
        }
        let i = g.s.partition_point(|&s| s <= target[0]).clamp(1, g.ns() - 1) - 1;
        let j = g.t.partition_point(|&t| t <= target[1]).clamp(1, g.nt() - 1) - 1;
        let u = (target[0] - g.s[i]) / (g.s[i + 1] - g.s[i]);
        let v = (target[1] - g.t[j]) / (g.t[j + 1] - g.t[j]);
        let mut acc = 0.0;
        for (di, dj, w) in [(0, 0, (1.0 - u) * (1.0 - v)), (1, 0, u * (1.0 - v)), (0, 1, (1.0 - u) * v), (1, 1, u * v)] {
            if w != 0.0 && g.inside(i + di, j + dj) {
                acc += w * self.integrate_e_node(node_vals, bnd_vals, i + di, j + dj);
            }
        }
        Ok(acc)
    }

    /// Arc-length integral over the sub-arc gamma(target) between A_t and B_s.
    pub fn integrate_arc(&self, bnd_vals: &[f64], target: Point) -> Result<f64> {
        if !self.contains(target) {
            return Err(Error::OutsideDomain(target[0], target[1]));
        }
        let [s0, t0] = target;
        let inc = |bn: &BNode| bn.p[0] >= s0 - 1e-12 && bn.p[1] >= t0 - 1e-12;
        let mut acc = 0.0;
        for (k, range) in self.arc_bnodes.iter().enumerate() {
            let arc = &self.arcs[k];
            for b in range.start..range.end - 1 {
                let (x, y) = (&self.bnodes[b], &self.bnodes[b + 1]);
                let (ix, iy) = (inc(x), inc(y));
                if ix && iy {
                    acc += 0.5 * (y.mu - x.mu) * (bnd_vals[b] + bnd_vals[b + 1]);
                } else if ix != iy {
                    let out = if ix { y } else { x };
                    let lam = if out.p[1] < t0 - 1e-12 { arc.lambda_at_t(t0) } else { arc.lambda_at_s(s0) };
                    let mu = arc.mu_at(lam);
                    let frac = ((mu - x.mu) / (y.mu - x.mu)).clamp(0.0, 1.0);
                    let v = bnd_vals[b] + frac * (bnd_vals[b + 1] - bnd_vals[b]);
                    if ix {
                        acc += 0.5 * (mu - x.mu) * (bnd_vals[b] + v);
                    } else {
                        acc += 0.5 * (y.mu - mu) * (v + bnd_vals[b + 1]);
                    }
                }
            }
        }
        Ok(acc)
    }
}

use super::Grid;

impl Grid {
    /// Nodes of G in column-major order.
    pub fn inside_nodes(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.ns()).flat_map(move |i| (0..=self.col_top[i]).map(move |j| (i, j)))
    }
}
