//! Small numerical kernels shared by the solvers: adaptive Simpson, scalar
//! root bracketing, Lagrange weights, monotone cubic interpolation and dense
//! row-vector/matrix helpers for the n-by-n coefficient blocks.

use nalgebra::{DMatrix, DVector};

/// Adaptive Simpson quadrature of `f` on `[a, b]`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, 48)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec(
    f: &dyn Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> f64 {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
        + simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
}

/// Root of a monotone function on a bracket by bisection. `f(lo)` and `f(hi)`
/// need opposite signs (or one of them zero); otherwise the closer end wins.
pub fn bisect(f: &dyn Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let mut flo = f(lo);
    let fhi = f(hi);
    if flo == 0.0 {
        return lo;
    }
    if fhi == 0.0 {
        return hi;
    }
    if flo.signum() == fhi.signum() {
        return if flo.abs() < fhi.abs() { lo } else { hi };
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let fm = f(mid);
        if fm == 0.0 {
            return mid;
        }
        if fm.signum() == flo.signum() {
            lo = mid;
            flo = fm;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Lagrange interpolation weights of the nodes `xs` evaluated at `x`.
pub fn lagrange_weights(xs: &[f64], x: f64) -> Vec<f64> {
    (0..xs.len())
        .map(|k| {
            let mut w = 1.0;
            for (m, &xm) in xs.iter().enumerate() {
                if m != k {
                    w *= (x - xm) / (xs[k] - xm);
                }
            }
            w
        })
        .collect()
}

/// Weights of the three-point first derivative at `x0` using nodes `xs`.
pub fn diff_weights3(xs: [f64; 3], x0: f64) -> [f64; 3] {
    let [a, b, c] = xs;
    [
        ((x0 - b) + (x0 - c)) / ((a - b) * (a - c)),
        ((x0 - a) + (x0 - c)) / ((b - a) * (b - c)),
        ((x0 - a) + (x0 - b)) / ((c - a) * (c - b)),
    ]
}

/// Piecewise cubic Hermite interpolant with Fritsch-Carlson slopes, which
/// preserves monotonicity of the data.
#[derive(Clone, Debug)]
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    /// `x` must be strictly increasing.
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Pchip {
        let n = x.len();
        assert!(n >= 2 && y.len() == n);
        let h: Vec<f64> = (0..n - 1).map(|k| x[k + 1] - x[k]).collect();
        let del: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut d = vec![0.0; n];
        if n == 2 {
            d[0] = del[0];
            d[1] = del[0];
        } else {
            for k in 1..n - 1 {
                if del[k - 1] * del[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    d[k] = (w1 + w2) / (w1 / del[k - 1] + w2 / del[k]);
                }
            }
            d[0] = end_slope(h[0], h[1], del[0], del[1]);
            d[n - 1] = end_slope(h[n - 2], h[n - 3], del[n - 2], del[n - 3]);
        }
        Pchip { x, y, d }
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.x.len();
        match self.x.partition_point(|&v| v <= x) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.segment(x);
        let h = self.x[k + 1] - self.x[k];
        let u = (x - self.x[k]) / h;
        let h00 = (1.0 + 2.0 * u) * (1.0 - u) * (1.0 - u);
        let h10 = u * (1.0 - u) * (1.0 - u);
        let h01 = u * u * (3.0 - 2.0 * u);
        let h11 = u * u * (u - 1.0);
        h00 * self.y[k] + h10 * h * self.d[k] + h01 * self.y[k + 1] + h11 * h * self.d[k + 1]
    }

    pub fn deriv(&self, x: f64) -> f64 {
        let k = self.segment(x);
        let h = self.x[k + 1] - self.x[k];
        let u = (x - self.x[k]) / h;
        let d00 = 6.0 * u * u - 6.0 * u;
        let d10 = 3.0 * u * u - 4.0 * u + 1.0;
        let d01 = -d00;
        let d11 = 3.0 * u * u - 2.0 * u;
        (d00 * self.y[k] + d01 * self.y[k + 1]) / h + d10 * self.d[k] + d11 * self.d[k + 1]
    }
}

fn end_slope(h0: f64, h1: f64, del0: f64, del1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * del0 - h0 * del1) / (h0 + h1);
    if d.signum() != del0.signum() {
        0.0
    } else if del0.signum() != del1.signum() && d.abs() > (3.0 * del0).abs() {
        3.0 * del0
    } else {
        d
    }
}

/// `out = v * M` for a row vector `v` and a row-major n-by-n matrix `m`.
#[inline]
pub fn row_times(v: &[f64], m: &[f64], out: &mut [f64]) {
    let n = v.len();
    for j in 0..n {
        let mut acc = 0.0;
        for i in 0..n {
            acc += v[i] * m[i * n + j];
        }
        out[j] = acc;
    }
}

/// `out = A * B` for row-major n-by-n matrices.
#[inline]
pub fn mat_mul(a: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a[i * n + k] * b[k * n + j];
            }
            out[i * n + j] = acc;
        }
    }
}

pub fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}

/// Solves the row-vector system `x * M = rhs` for row-major `m`.
pub fn solve_row(m: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let n = rhs.len();
    // x M = r  <=>  M^T x^T = r^T
    let mt = DMatrix::from_row_slice(n, n, m).transpose();
    let r = DVector::from_column_slice(rhs);
    mt.lu().solve(&r).map(|x| x.iter().copied().collect())
}

/// Solves `M * X = B` for row-major n-by-n matrices.
pub fn solve_mat(m: &[f64], b: &[f64], n: usize) -> Option<Vec<f64>> {
    let mm = DMatrix::from_row_slice(n, n, m);
    let bb = DMatrix::from_row_slice(n, n, b);
    mm.lu().solve(&bb).map(|x| {
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                out[i * n + j] = x[(i, j)];
            }
        }
        out
    })
}

pub fn sup_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_integrates_sine() {
        let v = adaptive_simpson(&|x: f64| x.sin(), 0.0, std::f64::consts::PI, 1e-12);
        assert!((v - 2.0).abs() < 1e-10);
    }

    #[test]
    fn bisect_finds_sqrt2() {
        let r = bisect(&|x| x * x - 2.0, 0.0, 2.0);
        assert!((r - 2f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn lagrange_reproduces_quadratics() {
        let xs = [0.0, 0.3, 1.1];
        let w = lagrange_weights(&xs, 1.7);
        let f = |x: f64| 2.0 - x + 0.5 * x * x;
        let v: f64 = xs.iter().zip(&w).map(|(x, w)| w * f(*x)).sum();
        assert!((v - f(1.7)).abs() < 1e-13);
    }

    #[test]
    fn diff_weights_exact_on_quadratics() {
        let xs = [0.0, 0.2, 0.5];
        let f = |x: f64| 1.0 + 3.0 * x - 2.0 * x * x;
        for x0 in [0.0, 0.2, 0.5] {
            let w = diff_weights3(xs, x0);
            let d: f64 = (0..3).map(|k| w[k] * f(xs[k])).sum();
            assert!((d - (3.0 - 4.0 * x0)).abs() < 1e-12);
        }
    }

    #[test]
    fn pchip_keeps_monotone_data_monotone() {
        let p = Pchip::new(vec![0.0, 1.0, 2.0, 3.0], vec![0.0, 0.1, 2.0, 2.05]);
        let mut prev = p.eval(0.0);
        for k in 1..=300 {
            let v = p.eval(k as f64 * 0.01);
            assert!(v >= prev - 1e-15);
            prev = v;
        }
        assert!((p.eval(2.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn row_solve_roundtrip() {
        let m = [2.0, 1.0, 0.5, 3.0];
        let x = solve_row(&m, &[1.0, 2.0]).unwrap();
        let mut back = [0.0; 2];
        row_times(&x, &m, &mut back);
        assert!((back[0] - 1.0).abs() < 1e-14 && (back[1] - 2.0).abs() < 1e-14);
    }
}
