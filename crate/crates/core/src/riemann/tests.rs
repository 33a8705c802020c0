use super::*;
use crate::forward::{solve_state, state_variation};
use crate::geometry::{build_domain, shapes, GridOptions};
use crate::problem::QuadraticFamily;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn family(f: impl FnOnce(&mut QuadraticFamily)) -> ProblemSpec {
    let mut q = QuadraticFamily { d: vec![0.0], ..Default::default() };
    f(&mut q);
    q.build("test").unwrap()
}

fn setup(dom: &Domain, spec: &ProblemSpec, u: impl Fn(f64, f64) -> f64) -> (Vec<f64>, Linearization) {
    let g = &dom.grid;
    let m = spec.m();
    let uf: Vec<f64> = (0..g.len()).flat_map(|k| {
        let [s, t] = g.point(k);
        vec![u(s, t); m]
    }).collect();
    let st = solve_state(dom, spec, &uf, 1e-13, 200).unwrap();
    let lin = Linearization::new(dom, spec, &st, &uf);
    (uf, lin)
}

fn rect(a: f64, b: f64, h: f64) -> Domain {
    build_domain(&shapes::rectangle(a, b), &[], &GridOptions::uniform(h)).unwrap()
}

fn series(z: f64, c: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..30 {
        term *= c * z / (k as f64 * k as f64);
        sum += term;
    }
    sum
}

#[test]
fn zero_linearization_gives_identity() {
    let dom = rect(1.0, 1.0, 0.1);
    let spec = QuadraticFamily { n: 2, m: 2, a: vec![0.0; 4], b: vec![0.0; 4], c: vec![0.0; 4], d: vec![1.0, 0.0, 0.0, 1.0], ..Default::default() }
        .build("z")
        .unwrap();
    let (_, lin) = setup(&dom, &spec, |s, _| s);
    let fw = riemann_forward(&dom, &spec, &lin, [0.3, 0.2]).unwrap();
    let ad = riemann_adjoint(&dom, &spec, &lin, [0.7, 0.6]).unwrap();
    for fam in [&fw, &ad] {
        for v in fam.values.chunks(4) {
            assert_eq!(v, &[1.0, 0.0, 0.0, 1.0]);
        }
    }
}

#[test]
fn family_at_its_anchor_is_identity() {
    let dom = build_domain(&shapes::quarter_disk(1.0), &[], &GridOptions::uniform(0.05)).unwrap();
    let spec = QuadraticFamily::preset("coupled2").unwrap().build("c2").unwrap();
    let (_, lin) = setup(&dom, &spec, |s, t| s - t);
    let p = [0.4, 0.3];
    let node = node_at(&dom, p).unwrap();
    let fw = riemann_forward(&dom, &spec, &lin, p).unwrap();
    let ad = riemann_adjoint(&dom, &spec, &lin, p).unwrap();
    assert_eq!(fw.at(node, &dom.grid).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(ad.at(node, &dom.grid).unwrap(), &[1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn scalar_linear_families_match_series() {
    let c = 0.8;
    let dom = rect(1.0, 1.0, 1.0 / 400.0);
    let spec = family(|q| q.a = vec![c]);
    let (_, lin) = setup(&dom, &spec, |_, _| 0.0);
    let base = [0.25, 0.1];
    let fw = riemann_forward(&dom, &spec, &lin, base).unwrap();
    let probes = [[0.25, 0.1], [0.5, 0.5], [1.0, 1.0], [0.75, 0.3], [0.3, 0.9]];
    for p in probes {
        let node = node_at(&dom, p).unwrap();
        let want = series((p[0] - base[0]) * (p[1] - base[1]), c);
        let got = fw.at(node, &dom.grid).unwrap()[0];
        assert!((got - want).abs() < 1e-6, "{p:?}: {got} vs {want}");
        // adjoint anchored at the probe, evaluated at the base
        let ad = riemann_adjoint(&dom, &spec, &lin, p).unwrap();
        let back = ad.at(node_at(&dom, base).unwrap(), &dom.grid).unwrap()[0];
        assert!((back - got).abs() < 1e-6, "{p:?}: {back} vs {got}");
    }
}

#[test]
fn outside_support_is_zero() {
    let dom = rect(1.0, 1.0, 0.1);
    let spec = family(|q| q.a = vec![1.0]);
    let (_, lin) = setup(&dom, &spec, |_, _| 0.0);
    let fw = riemann_forward(&dom, &spec, &lin, [0.5, 0.5]).unwrap();
    assert_eq!(fw.value(dom.grid.idx(2, 8), &dom.grid), vec![0.0]);
    assert!(matches!(riemann_forward(&dom, &spec, &lin, [1.5, 0.5]), Err(Error::OutsideDomain(..))));
    assert!(matches!(riemann_forward(&dom, &spec, &lin, [0.55, 0.5]), Err(Error::NotGridNode(..))));
}

fn reciprocity_error(h: f64) -> f64 {
    let dom = build_domain(&shapes::quarter_disk(1.0), &[], &GridOptions::uniform(h)).unwrap();
    let spec = QuadraticFamily { sigma: 0.6, beta: 0.4, ..QuadraticFamily::preset("coupled2").unwrap() }.build("c2").unwrap();
    let (_, lin) = setup(&dom, &spec, |s, t| (s + t).sin());
    let base = [0.1, 0.2];
    let fw = riemann_forward(&dom, &spec, &lin, base).unwrap();
    let bnode = node_at(&dom, base).unwrap();
    let mut worst = 0.0_f64;
    for p in [[0.5, 0.5], [0.7, 0.3], [0.2, 0.9], [0.6, 0.6]] {
        let ad = riemann_adjoint(&dom, &spec, &lin, p).unwrap();
        let a = ad.at(bnode, &dom.grid).unwrap();
        let f = fw.at(node_at(&dom, p).unwrap(), &dom.grid).unwrap();
        for k in 0..4 {
            worst = worst.max((a[k] - f[k]).abs());
        }
    }
    worst
}

#[test]
fn forward_and_adjoint_families_are_reciprocal() {
    let e1 = reciprocity_error(0.05);
    let e2 = reciprocity_error(0.025);
    assert!(e2 < 2e-4, "{e1} {e2}");
    assert!(e1 < 1e-12 || e1 / e2 > 3.0, "{e1} {e2}");
}

#[test]
fn rho1_is_exponential_for_constant_fp() {
    let c = 0.5;
    let dom = rect(0.05, 1.0, 1.0 / 2000.0);
    let spec = family(|q| q.b = vec![c]);
    let (_, lin) = setup(&dom, &spec, |_, _| 0.0);
    let t0 = 0.2;
    let aux = aux_costates(&dom, &spec, &lin, [0.025, t0]).unwrap();
    assert_eq!(aux.rho1[0].1, vec![1.0]);
    assert_eq!(aux.rho2[0].1, vec![1.0]);
    for (tau, r) in &aux.rho1 {
        assert!((r[0] - (c * (tau - t0)).exp()).abs() < 1e-8, "{tau} {}", r[0] - (c * (tau - t0)).exp());
    }
    // f_q = 0 gives rho2 = identity
    assert!(aux.rho2.iter().all(|(_, r)| (r[0] - 1.0).abs() < 1e-14));
}

#[test]
fn aux_costates_reach_the_boundary() {
    let dom = build_domain(&shapes::quarter_disk(1.0), &[], &GridOptions::uniform(0.1)).unwrap();
    let spec = family(|q| q.b = vec![0.5]);
    let (_, lin) = setup(&dom, &spec, |_, _| 0.0);
    let aux = aux_costates(&dom, &spec, &lin, [0.3, 0.2]).unwrap();
    let (tau, _) = aux.rho1.last().unwrap();
    assert!((tau - (1.0 - 0.09_f64).sqrt()).abs() < 1e-12);
    let (sig, _) = aux.rho2.last().unwrap();
    assert!((sig - (1.0 - 0.04_f64).sqrt()).abs() < 1e-12);
}

#[test]
fn aux_costates_restrict_adjoint_families() {
    let dom = build_domain(&shapes::quarter_disk(1.0), &[], &GridOptions::uniform(0.025)).unwrap();
    let spec = QuadraticFamily::preset("coupled2").unwrap().build("c2").unwrap();
    let (_, lin) = setup(&dom, &spec, |s, t| s * t);
    let target = [0.3, 0.2];
    let aux = aux_costates(&dom, &spec, &lin, target).unwrap();
    let tnode = node_at(&dom, target).unwrap();
    for &(tau, ref r) in aux.rho1.iter().take(aux.rho1.len() - 1).step_by(5) {
        let ad = riemann_adjoint(&dom, &spec, &lin, [0.3, tau]).unwrap();
        let want = ad.at(tnode, &dom.grid).unwrap();
        for k in 0..4 {
            assert!((want[k] - r[k]).abs() < 2e-4, "tau {tau}");
        }
    }
    for &(sig, ref r) in aux.rho2.iter().take(aux.rho2.len() - 1).step_by(5) {
        let ad = riemann_adjoint(&dom, &spec, &lin, [sig, 0.2]).unwrap();
        let want = ad.at(tnode, &dom.grid).unwrap();
        for k in 0..4 {
            assert!((want[k] - r[k]).abs() < 2e-4, "sigma {sig}");
        }
    }
}

#[test]
fn variation_examples() {
    let dom = rect(1.0, 1.0, 0.05);
    let spec = family(|q| q.d = vec![1.0]);
    let (_, lin) = setup(&dom, &spec, |_, _| 0.2);
    let zero = vec![0.0; dom.grid.len()];
    assert_eq!(variation_via_riemann(&dom, &spec, &lin, &zero, [0.5, 0.5]).unwrap(), vec![0.0]);
    let one = vec![1.0; dom.grid.len()];
    let v = variation_via_riemann(&dom, &spec, &lin, &one, [0.6, 0.35]).unwrap();
    assert!((v[0] - 0.6 * 0.35).abs() < 1e-12);
}

#[test]
fn variation_agrees_with_linearized_solve() {
    let dom = build_domain(&shapes::quarter_disk(1.0), &[], &GridOptions::uniform(0.025)).unwrap();
    let spec = QuadraticFamily::preset("coupled2").unwrap().build("c2").unwrap();
    let g = &dom.grid;
    let uf: Vec<f64> = (0..g.len()).flat_map(|k| {
        let [s, t] = g.point(k);
        vec![s, t]
    }).collect();
    let st = solve_state(&dom, &spec, &uf, 1e-13, 200).unwrap();
    let lin = Linearization::new(&dom, &spec, &st, &uf);
    let du: Vec<f64> = (0..g.len()).flat_map(|k| {
        let [s, t] = g.point(k);
        vec![(3.0 * s).cos(), t * t - s]
    }).collect();
    let dx = state_variation(&dom, &spec, &st, &uf, &du).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inside: Vec<usize> = (0..g.len()).filter(|&k| g.mask[k].in_domain()).collect();
    for _ in 0..10 {
        let node = inside[rng.gen_range(0..inside.len())];
        let v = variation_via_riemann(&dom, &spec, &lin, &du, g.point(node)).unwrap();
        for c in 0..2 {
            assert!((v[c] - dx[node * 2 + c]).abs() < 5e-4, "{:?}: {v:?}", g.point(node));
        }
    }
}

#[test]
fn variation_ignores_control_outside_the_past_cone() {
    let dom = rect(1.0, 1.0, 0.05);
    let spec = QuadraticFamily::preset("nonlinear").unwrap().build("nl").unwrap();
    let (_, lin) = setup(&dom, &spec, |s, _| s);
    let g = &dom.grid;
    let target = [0.5, 0.4];
    let du: Vec<f64> = (0..g.len()).map(|k| g.point(k)[0]).collect();
    let mut du2 = du.clone();
    for k in 0..g.len() {
        let [s, t] = g.point(k);
        if s > 0.5 + 1e-12 || t > 0.4 + 1e-12 {
            du2[k] = 100.0;
        }
    }
    let a = variation_via_riemann(&dom, &spec, &lin, &du, target).unwrap();
    let b = variation_via_riemann(&dom, &spec, &lin, &du2, target).unwrap();
    assert_eq!(a, b);
}

#[test]
fn cache_reuses_families() {
    let dom = rect(1.0, 1.0, 0.1);
    let spec = family(|q| q.a = vec![1.0]);
    let (_, lin) = setup(&dom, &spec, |_, _| 0.0);
    let cache = RiemannCache::new();
    let a = cache.get(&dom, &spec, &lin, Orientation::Adjoint, 50).unwrap();
    let b = cache.get(&dom, &spec, &lin, Orientation::Adjoint, 50).unwrap();
    assert!(Arc::ptr_eq(&a, &b));
    assert_eq!(cache.len(), 1);
}
