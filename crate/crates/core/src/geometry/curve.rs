//! Parametric boundary curves and the arcs cut from them.
//!
//! Every curve is traversed counterclockwise (s non-increasing, t
//! non-decreasing) through a parameter lambda in [0, 1].

use serde::{Deserialize, Serialize};

use crate::numeric::{adaptive_simpson, bisect, Pchip};

use super::{Point, TOL_GEOM};

/// Closed-form or tabulated description of one piece of the boundary.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(tag = "curve", rename_all = "snake_case", deny_unknown_fields)]
pub enum CurveSpec {
    Segment { from: Point, to: Point },
    /// `center + (rs cos theta, rt sin theta)` for theta running from
    /// `theta[0]` to `theta[1]`; a circle has equal radii.
    Ellipse { center: Point, radii: [f64; 2], theta: [f64; 2] },
    /// Graph `t(s)` through samples listed in traversal order (s strictly
    /// decreasing), interpolated by a monotone cubic.
    Table { s: Vec<f64>, t: Vec<f64> },
}

#[derive(Clone, Debug)]
pub(crate) enum Curve {
    Segment { from: Point, to: Point },
    Ellipse { center: Point, radii: [f64; 2], theta: [f64; 2] },
    Table { s0: f64, s1: f64, interp: Pchip },
}

impl Curve {
    pub(crate) fn from_spec(spec: &CurveSpec) -> Result<Curve, String> {
        Ok(match spec {
            CurveSpec::Segment { from, to } => Curve::Segment { from: *from, to: *to },
            CurveSpec::Ellipse { center, radii, theta } => {
                if radii[0] <= 0.0 || radii[1] <= 0.0 {
                    return Err("ellipse radii must be positive".into());
                }
                Curve::Ellipse { center: *center, radii: *radii, theta: *theta }
            }
            CurveSpec::Table { s, t } => {
                if s.len() < 2 || s.len() != t.len() {
                    return Err("table needs at least two (s, t) samples of equal length".into());
                }
                if s.windows(2).any(|w| w[1] >= w[0]) {
                    return Err("table s samples must be strictly decreasing".into());
                }
                let xs: Vec<f64> = s.iter().rev().copied().collect();
                let ys: Vec<f64> = t.iter().rev().copied().collect();
                Curve::Table { s0: s[0], s1: *s.last().unwrap(), interp: Pchip::new(xs, ys) }
            }
        })
    }

    pub(crate) fn point(&self, lam: f64) -> Point {
        match self {
            Curve::Segment { from, to } => {
                [from[0] + lam * (to[0] - from[0]), from[1] + lam * (to[1] - from[1])]
            }
            Curve::Ellipse { center, radii, theta } => {
                let th = theta[0] + lam * (theta[1] - theta[0]);
                [center[0] + radii[0] * th.cos(), center[1] + radii[1] * th.sin()]
            }
            Curve::Table { s0, s1, interp } => {
                let s = s0 + lam * (s1 - s0);
                [s, interp.eval(s)]
            }
        }
    }

    pub(crate) fn deriv(&self, lam: f64) -> Point {
        match self {
            Curve::Segment { from, to } => [to[0] - from[0], to[1] - from[1]],
            Curve::Ellipse { radii, theta, .. } => {
                let dth = theta[1] - theta[0];
                let th = theta[0] + lam * dth;
                [-radii[0] * th.sin() * dth, radii[1] * th.cos() * dth]
            }
            Curve::Table { s0, s1, interp } => {
                let ds = s1 - s0;
                let s = s0 + lam * ds;
                [ds, interp.deriv(s) * ds]
            }
        }
    }

    fn is_segment(&self) -> bool {
        matches!(self, Curve::Segment { .. })
    }
}

/// Classification of a boundary arc.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArcKind {
    /// Segment parallel to the s-axis (t constant), outward normal (0, 1).
    FlatS,
    /// Segment parallel to the t-axis (s constant), outward normal (1, 0).
    FlatT,
    Oblique,
}

/// One arc of the boundary between two consecutive vertices.
#[derive(Clone, Debug)]
pub struct BoundaryArc {
    pub kind: ArcKind,
    pub(crate) curve: Curve,
    pub(crate) lam: [f64; 2],
    pub endpoints: [Point; 2],
    pub mu_range: [f64; 2],
}

impl BoundaryArc {
    pub(crate) fn new(curve: Curve, lam: [f64; 2], endpoints: [Point; 2]) -> BoundaryArc {
        let ds = endpoints[1][0] - endpoints[0][0];
        let dt = endpoints[1][1] - endpoints[0][1];
        let kind = if curve.is_segment() && dt.abs() <= TOL_GEOM {
            ArcKind::FlatS
        } else if curve.is_segment() && ds.abs() <= TOL_GEOM {
            ArcKind::FlatT
        } else {
            ArcKind::Oblique
        };
        let mut arc = BoundaryArc { kind, curve, lam, endpoints, mu_range: [0.0, 0.0] };
        arc.mu_range = [0.0, arc.length_to(lam[1])];
        arc
    }

    pub fn is_flat(&self) -> bool {
        self.kind != ArcKind::Oblique
    }

    /// Point at a curve parameter; the arc endpoints are returned exactly.
    pub fn point(&self, lam: f64) -> Point {
        if lam <= self.lam[0] {
            return self.endpoints[0];
        }
        if lam >= self.lam[1] {
            return self.endpoints[1];
        }
        match self.kind {
            ArcKind::FlatS => [self.curve.point(lam)[0], self.endpoints[0][1]],
            ArcKind::FlatT => [self.endpoints[0][0], self.curve.point(lam)[1]],
            ArcKind::Oblique => self.curve.point(lam),
        }
    }

    pub fn deriv(&self, lam: f64) -> Point {
        self.curve.deriv(lam)
    }

    /// Outward unit normal `(t', -s') / |L'|` at a curve parameter.
    pub fn normal(&self, lam: f64) -> Point {
        match self.kind {
            ArcKind::FlatS => [0.0, 1.0],
            ArcKind::FlatT => [1.0, 0.0],
            ArcKind::Oblique => {
                let d = self.deriv(lam);
                let len = d[0].hypot(d[1]);
                [d[1] / len, -d[0] / len]
            }
        }
    }

    /// Arc length from the start of the arc to parameter `lam`.
    pub fn length_to(&self, lam: f64) -> f64 {
        match self.curve {
            Curve::Segment { .. } => {
                let p = self.point(lam);
                (p[0] - self.endpoints[0][0]).hypot(p[1] - self.endpoints[0][1])
            }
            _ => adaptive_simpson(
                &|l| {
                    let d = self.curve.deriv(l);
                    d[0].hypot(d[1])
                },
                self.lam[0],
                lam.clamp(self.lam[0], self.lam[1]),
                1e-14,
            ),
        }
    }

    /// Global arc-length coordinate of parameter `lam`.
    pub fn mu_at(&self, lam: f64) -> f64 {
        self.mu_range[0] + self.length_to(lam)
    }

    pub fn lambda_at_mu(&self, mu: f64) -> f64 {
        bisect(&|l| self.mu_at(l) - mu, self.lam[0], self.lam[1])
    }

    pub fn s_range(&self) -> [f64; 2] {
        [self.endpoints[1][0], self.endpoints[0][0]]
    }

    pub fn t_range(&self) -> [f64; 2] {
        [self.endpoints[0][1], self.endpoints[1][1]]
    }

    /// Parameter where the arc reaches abscissa `s` (s decreases along the arc).
    pub fn lambda_at_s(&self, s: f64) -> f64 {
        if s >= self.endpoints[0][0] {
            return self.lam[0];
        }
        if s <= self.endpoints[1][0] {
            return self.lam[1];
        }
        bisect(&|l| self.point(l)[0] - s, self.lam[0], self.lam[1])
    }

    /// Parameter where the arc reaches ordinate `t` (t increases along the arc).
    pub fn lambda_at_t(&self, t: f64) -> f64 {
        if t <= self.endpoints[0][1] {
            return self.lam[0];
        }
        if t >= self.endpoints[1][1] {
            return self.lam[1];
        }
        bisect(&|l| self.point(l)[1] - t, self.lam[0], self.lam[1])
    }

    /// `tau = theta2(sigma)`; absent on segments parallel to the t-axis.
    pub fn theta2(&self, s: f64) -> Option<f64> {
        match self.kind {
            ArcKind::FlatT => None,
            ArcKind::FlatS => Some(self.endpoints[0][1]),
            ArcKind::Oblique => Some(self.point(self.lambda_at_s(s))[1]),
        }
    }

    /// `sigma = theta1(tau)`; absent on segments parallel to the s-axis.
    pub fn theta1(&self, t: f64) -> Option<f64> {
        match self.kind {
            ArcKind::FlatS => None,
            ArcKind::FlatT => Some(self.endpoints[0][0]),
            ArcKind::Oblique => Some(self.point(self.lambda_at_t(t))[0]),
        }
    }

    /// Slope `d theta2 / d sigma`.
    pub fn theta2_prime(&self, s: f64) -> Option<f64> {
        match self.kind {
            ArcKind::FlatT => None,
            ArcKind::FlatS => Some(0.0),
            ArcKind::Oblique => {
                let d = self.deriv(self.lambda_at_s(s));
                Some(d[1] / d[0])
            }
        }
    }

    /// Derivative of the outward normal with respect to arc length.
    pub fn normal_mu_derivative(&self, lam: f64) -> Point {
        if self.is_flat() {
            return [0.0, 0.0];
        }
        let dl = 1e-6 * (self.lam[1] - self.lam[0]);
        let l0 = (lam - dl).max(self.lam[0]);
        let l1 = (lam + dl).min(self.lam[1]);
        let n0 = self.normal(l0);
        let n1 = self.normal(l1);
        let d = self.deriv(lam);
        let speed = d[0].hypot(d[1]);
        let dmu = speed * (l1 - l0);
        [(n1[0] - n0[0]) / dmu, (n1[1] - n0[1]) / dmu]
    }

    /// Samples for plotting.
    pub fn samples(&self, n: usize) -> Vec<Point> {
        (0..=n)
            .map(|k| self.point(self.lam[0] + (self.lam[1] - self.lam[0]) * k as f64 / n as f64))
            .collect()
    }
}
