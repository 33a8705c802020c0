use super::*;
use crate::geometry::{build_domain, shapes, GridOptions};
use crate::problem::QuadraticFamily;

fn rect(h: f64) -> Domain {
    build_domain(&shapes::rectangle(1.0, 1.0), &[], &GridOptions::uniform(h)).unwrap()
}

fn family(f: impl FnOnce(&mut QuadraticFamily)) -> ProblemSpec {
    let mut q = QuadraticFamily { d: vec![0.0], ..Default::default() };
    f(&mut q);
    q.build("test").unwrap()
}

fn series(z: f64, c: f64) -> f64 {
    // sum_k c^k z^k / (k!)^2, 30 terms
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..30 {
        term *= c * z / (k as f64 * k as f64);
        sum += term;
    }
    sum
}

#[test]
fn zero_dynamics_reproduces_data_in_one_iteration() {
    let dom = rect(0.1);
    let spec = family(|q| {
        q.x0 = 0.5;
        q.g1 = 1.0;
        q.g2 = 2.0;
    });
    let u = vec![0.0; dom.grid.len()];
    let st = solve_state(&dom, &spec, &u, 1e-12, 50).unwrap();
    assert_eq!(st.iterations, 1);
    for node in 0..dom.grid.len() {
        let [s, t] = dom.grid.point(node);
        assert_eq!(st.x[node], (0.5 + s) + (0.5 + 2.0 * t) - 0.5);
        assert_eq!(st.x_s[node], 1.0);
        assert_eq!(st.x_t[node], 2.0);
    }
}

#[test]
fn unit_control_gives_product() {
    let dom = rect(0.05);
    let spec = family(|q| q.d = vec![1.0]);
    let u = vec![1.0; dom.grid.len()];
    let st = solve_state(&dom, &spec, &u, 1e-12, 50).unwrap();
    for node in 0..dom.grid.len() {
        let [s, t] = dom.grid.point(node);
        assert!((st.x[node] - s * t).abs() < 1e-12);
        assert!((st.x_s[node] - t).abs() < 1e-12);
        assert!((st.x_t[node] - s).abs() < 1e-12);
    }
}

fn bessel_error(h: f64) -> f64 {
    let dom = rect(h);
    let spec = family(|q| {
        q.a = vec![1.0];
        q.x0 = 1.0;
    });
    let u = vec![0.0; dom.grid.len()];
    let st = solve_state(&dom, &spec, &u, 1e-13, 100).unwrap();
    let corner = dom.grid.idx(dom.grid.ns() - 1, dom.grid.nt() - 1);
    (st.x[corner] - series(1.0, 1.0)).abs()
}

#[test]
fn linear_state_matches_series_and_converges_quadratically() {
    let e1 = bessel_error(1.0 / 100.0);
    let e2 = bessel_error(1.0 / 200.0);
    let ratio = e1 / e2;
    assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    // Richardson-extrapolated corner value.
    assert!(e2 < 1e-5, "{e2}");
    let e3 = bessel_error(1.0 / 800.0);
    assert!(e3 < 1e-6, "{e3}");
}

#[test]
fn axis_values_equal_data_exactly() {
    let dom = build_domain(&shapes::quarter_disk(1.0), &[], &GridOptions::uniform(0.05)).unwrap();
    let spec = family(|q| {
        q.a = vec![0.7];
        q.sigma = 0.3;
        q.x0 = 0.2;
        q.g1 = 0.5;
        q.g2 = -0.4;
    });
    let u: Vec<f64> = (0..dom.grid.len()).map(|k| (k as f64 * 0.01).sin()).collect();
    let st = solve_state(&dom, &spec, &u, 1e-12, 100).unwrap();
    for i in 0..dom.grid.ns() {
        let s = dom.grid.s[i];
        assert_eq!(st.x[dom.grid.idx(i, 0)], (0.2 + 0.5 * s) + 0.2 - 0.2);
    }
    for j in 0..dom.grid.nt() {
        let t = dom.grid.t[j];
        assert_eq!(st.x[dom.grid.idx(0, j)], 0.2 + (0.2 - 0.4 * t) - 0.2);
    }
}

fn mixed_error(h: f64) -> (f64, f64) {
    let dom = rect(h);
    let spec = family(|q| {
        q.a = vec![0.5];
        q.b = vec![0.3];
        q.c = vec![-0.2];
        q.sigma = 0.4;
        q.d = vec![1.0];
        q.x0 = 0.1;
        q.g1 = 1.0;
        q.g2 = 0.5;
    });
    let g = &dom.grid;
    let u: Vec<f64> = (0..g.len()).map(|k| {
        let [s, t] = g.point(k);
        (s + 2.0 * t).cos()
    }).collect();
    let st = solve_state(&dom, &spec, &u, 1e-13, 100).unwrap();
    let (mut e_mix, mut e_d) = (0.0_f64, 0.0_f64);
    for i in 1..g.ns() - 1 {
        for j in 1..g.nt() - 1 {
            let x = |a: usize, b: usize| st.x[g.idx(a, b)];
            let mix = (x(i + 1, j + 1) - x(i + 1, j - 1) - x(i - 1, j + 1) + x(i - 1, j - 1)) / (4.0 * h * h);
            e_mix = e_mix.max((mix - st.x_st[g.idx(i, j)]).abs());
            let ds = (x(i + 1, j) - x(i - 1, j)) / (2.0 * h);
            let dt = (x(i, j + 1) - x(i, j - 1)) / (2.0 * h);
            e_d = e_d.max((ds - st.x_s[g.idx(i, j)]).abs()).max((dt - st.x_t[g.idx(i, j)]).abs());
        }
    }
    (e_mix, e_d)
}

#[test]
fn derivative_fields_are_consistent_with_differences() {
    let (m1, d1) = mixed_error(0.05);
    let (m2, d2) = mixed_error(0.025);
    assert!(m1 / m2 > 3.0 && d1 / d2 > 3.0, "{m1} {m2} {d1} {d2}");
    assert!(m2 < 1e-3 && d2 < 1e-3);
}

#[test]
fn backward_series_from_far_corner() {
    let dom = rect(1.0 / 200.0);
    let g = &dom.grid;
    let block = Block::rect(g, 0, g.ns() - 1, 0, g.nt() - 1);
    let c = 1.5;
    let kernel = move |_n: usize, psi: &[f64], _p: &[f64], _q: &[f64], out: &mut [f64]| out[0] = c * psi[0];
    let ones = vec![1.0; block.len()];
    let zeros = vec![0.0; block.len()];
    let sys = VolterraSystem {
        grid: g,
        block: &block,
        dim: 1,
        direction: Direction::Backward,
        psi0: ones,
        p0: zeros.clone(),
        q0: zeros,
        kernel: &kernel,
        clip: None,
    };
    let sol = picard_solve(&sys, &PicardOptions { tol: 1e-13, ..Default::default() }).unwrap();
    let mut worst = 0.0_f64;
    for (k, &node) in block.nodes.iter().enumerate() {
        let [s, t] = g.point(node);
        worst = worst.max((sol.psi[k] - series((1.0 - s) * (1.0 - t), c)).abs());
    }
    assert!(worst < 2e-5, "{worst}");
}

#[test]
fn zero_kernel_returns_seed() {
    let dom = rect(0.1);
    let g = &dom.grid;
    let block = Block::rect(g, 0, g.ns() - 1, 0, g.nt() - 1);
    let kernel = |_n: usize, _a: &[f64], _b: &[f64], _c: &[f64], out: &mut [f64]| out[0] = 0.0;
    let seed: Vec<f64> = (0..block.len()).map(|k| k as f64).collect();
    let sys = VolterraSystem {
        grid: g,
        block: &block,
        dim: 1,
        direction: Direction::Backward,
        psi0: seed.clone(),
        p0: seed.clone(),
        q0: seed.clone(),
        kernel: &kernel,
        clip: None,
    };
    let sol = picard_solve(&sys, &PicardOptions::default()).unwrap();
    assert_eq!(sol.iterations, 1);
    assert_eq!(sol.psi, seed);
}

#[test]
fn measured_ratio_respects_contraction_bound() {
    let dom = rect(0.02);
    let g = &dom.grid;
    let block = Block::rect(g, 0, g.ns() - 1, 0, g.nt() - 1);
    let l = 3.0;
    let rho = 4.0;
    let kernel = move |_n: usize, psi: &[f64], _p: &[f64], _q: &[f64], out: &mut [f64]| out[0] = l * psi[0];
    let ones = vec![1.0; block.len()];
    let zeros = vec![0.0; block.len()];
    let sys = VolterraSystem {
        grid: g,
        block: &block,
        dim: 1,
        direction: Direction::Backward,
        psi0: ones,
        p0: zeros.clone(),
        q0: zeros,
        kernel: &kernel,
        clip: None,
    };
    let sol = picard_solve(&sys, &PicardOptions { rho: Some(rho), ..Default::default() }).unwrap();
    let bound = contraction_bound(l, rho, 1.0, 1.0);
    let ratios = sol.psi_ratios();
    assert!(!ratios.is_empty());
    for r in ratios {
        assert!(r <= bound + 0.05, "{r} > {bound}");
    }
}

#[test]
fn divergent_iteration_is_reported() {
    let dom = rect(0.1);
    let g = &dom.grid;
    let block = Block::rect(g, 0, g.ns() - 1, 0, g.nt() - 1);
    let kernel = |_n: usize, psi: &[f64], _p: &[f64], _q: &[f64], out: &mut [f64]| out[0] = 40.0 * psi[0];
    let ones = vec![1.0; block.len()];
    let zeros = vec![0.0; block.len()];
    let sys = VolterraSystem {
        grid: g,
        block: &block,
        dim: 1,
        direction: Direction::Backward,
        psi0: ones,
        p0: zeros.clone(),
        q0: zeros,
        kernel: &kernel,
        clip: None,
    };
    let err = picard_solve(&sys, &PicardOptions { max_iter: 5, rho: Some(0.0), ..Default::default() }).unwrap_err();
    assert!(matches!(err, Error::ContractionViolated { .. }), "{err:?}");
    let err = picard_solve(&sys, &PicardOptions { max_iter: 3, rho: Some(0.0), tol: 0.0, ..Default::default() });
    assert!(err.is_err());
}

#[test]
fn weighted_norm_examples() {
    let dom = rect(0.25);
    let g = &dom.grid;
    let nodes: Vec<usize> = (0..g.len()).collect();
    let mut field = vec![0.0; g.len()];
    field[7] = -3.0;
    let max = WeightedNorm { rho: 0.0, corner: [1.0, 1.0], direction: Direction::Backward };
    assert_eq!(weighted_norm(g, &nodes, &field, 1, &max), 3.0);
    let wn = WeightedNorm { rho: 2.0, corner: [1.0, 1.0], direction: Direction::Backward };
    assert_eq!(weighted_norm(g, &nodes, &vec![1.0; g.len()], 1, &wn), 1.0);
    let mut spike = vec![0.0; g.len()];
    spike[g.idx(0, 0)] = 1.0;
    let wn1 = WeightedNorm { rho: 1.0, ..wn };
    assert!((weighted_norm(g, &nodes, &spike, 1, &wn1) - (-2.0_f64).exp()).abs() < 1e-15);
}

#[test]
fn rho_selection() {
    assert_eq!(choose_rho(None, 1.0, 1.0), 8.0);
    assert_eq!(choose_rho(Some(0.1), 1.0, 1.0), 1.0);
    let r = choose_rho(Some(10.0), 1.0, 1.0);
    assert!(contraction_bound(10.0, r, 1.0, 1.0) <= 0.5);
    assert!(contraction_bound(10.0, r / 2.0, 1.0, 1.0) > 0.5);
}

#[test]
fn variation_examples() {
    let dom = rect(0.05);
    let spec = family(|q| q.d = vec![1.0]);
    let u = vec![0.3; dom.grid.len()];
    let st = solve_state(&dom, &spec, &u, 1e-12, 50).unwrap();
    let dx = state_variation(&dom, &spec, &st, &u, &vec![0.0; dom.grid.len()]).unwrap();
    assert!(dx.iter().all(|v| *v == 0.0));
    let dx = state_variation(&dom, &spec, &st, &u, &vec![1.0; dom.grid.len()]).unwrap();
    for node in 0..dom.grid.len() {
        let [s, t] = dom.grid.point(node);
        assert!((dx[node] - s * t).abs() < 1e-12);
    }
}

#[test]
fn variation_matches_finite_difference_of_state() {
    let dom = build_domain(&shapes::quarter_disk(1.0), &[], &GridOptions::uniform(0.04)).unwrap();
    let spec = QuadraticFamily::preset("nonlinear").unwrap().build("nl").unwrap();
    let g = &dom.grid;
    let u: Vec<f64> = (0..g.len()).map(|k| 0.5 * g.point(k)[0]).collect();
    let du: Vec<f64> = (0..g.len()).map(|k| {
        let [s, t] = g.point(k);
        1.0 + s - t
    }).collect();
    let st = solve_state(&dom, &spec, &u, 1e-13, 100).unwrap();
    let dx = state_variation(&dom, &spec, &st, &u, &du).unwrap();
    let eps = 1e-6;
    let up: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a + eps * b).collect();
    let um: Vec<f64> = u.iter().zip(&du).map(|(a, b)| a - eps * b).collect();
    let sp = solve_state(&dom, &spec, &up, 1e-13, 100).unwrap();
    let sm = solve_state(&dom, &spec, &um, 1e-13, 100).unwrap();
    let mut worst = 0.0_f64;
    for node in 0..g.len() {
        if g.mask[node].in_domain() {
            let fd = (sp.x[node] - sm.x[node]) / (2.0 * eps);
            worst = worst.max((fd - dx[node]).abs());
        }
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn curvilinear_state_agrees_with_bounding_box_solve() {
    let h = 0.05;
    let disk = build_domain(&shapes::quarter_disk(1.0), &[], &GridOptions::uniform(h)).unwrap();
    let sq = rect(h);
    let spec = QuadraticFamily::preset("nonlinear").unwrap().build("nl").unwrap();
    assert_eq!(disk.grid.s, sq.grid.s);
    let u = |g: &crate::geometry::Grid| -> Vec<f64> { (0..g.len()).map(|k| g.point(k)[1].sin()).collect() };
    let a = solve_state(&disk, &spec, &u(&disk.grid), 1e-13, 100).unwrap();
    let b = solve_state(&sq, &spec, &u(&sq.grid), 1e-13, 100).unwrap();
    for node in 0..disk.grid.len() {
        if disk.grid.mask[node].in_domain() {
            assert!((a.x[node] - b.x[node]).abs() < 1e-12);
        }
    }
}

#[test]
fn residual_csv_has_header_and_rows() {
    let h = vec![IterRecord { iter: 1, sup: 0.5, weighted: 0.25, weighted_psi: 0.1 }];
    let csv = residual_csv(&h);
    assert_eq!(csv.lines().next().unwrap(), "iteration,sup_residual,weighted_residual");
    assert_eq!(csv.lines().nth(1).unwrap(), "1,5.0000000000000000e-1,2.5000000000000000e-1");
}
