use super::*;
use crate::dsmc::{run, Acceptance, Admissibility, CollisionConfig, InitialLaw, SigmaPolicy};
use crate::models::{wealth_model, ParamFn, WealthParams};
use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid() -> VGrid {
    VGrid::with_spacing(0.0, 10.0, 0.05).unwrap()
}

#[test]
fn point_mass_histogram() {
    let g = grid();
    let values = vec![2.0; 50];
    let d = reconstruct(&values, 1, &g, OUT_OF_RANGE_LIMIT).unwrap();
    assert_abs_diff_eq!(d.density[0][40], 1.0 / g.dv(), epsilon = 1e-9);
    assert_abs_diff_eq!(g.mass(&d.density[0]), 1.0, epsilon = 1e-12);
    assert_eq!(d.density[0].iter().filter(|x| **x != 0.0).count(), 1);
}

#[test]
fn histogram_columns_and_edge_tally() {
    let g = grid();
    // Two points in z: column 0 inside, column 1 with one particle beyond the grid.
    let mut values = Vec::new();
    for i in 0..2000 {
        values.push(0.001 * i as f64);
        values.push(if i == 0 { 11.0 } else { 1.0 });
    }
    let d = reconstruct(&values, 2, &g, OUT_OF_RANGE_LIMIT).unwrap();
    assert_eq!(d.out_of_range, vec![0, 1]);
    assert_abs_diff_eq!(d.density[1][200], 1.0 / (2000.0 * g.dv()), epsilon = 1e-12);
    for col in &d.density {
        assert_abs_diff_eq!(g.mass(col), 1.0, epsilon = 1e-12);
    }
    values[3] = -4.0;
    values[5] = 12.0;
    assert!(matches!(reconstruct(&values, 2, &g, OUT_OF_RANGE_LIMIT), Err(Error::State(_))));
    assert!(reconstruct(&values, 2, &g, 0.01).is_ok());
    assert!(matches!(reconstruct(&values[..5], 2, &g, 1.0), Err(Error::Shape { .. })));
}

#[test]
fn histogram_error_shrinks_with_samples() {
    let g = grid();
    let exact = g.cell_average(|x| if x <= 0.0 { 0.0 } else { 1.0 - (-x).exp() });
    let sup = |n: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
        let v: Vec<f64> = (0..n).map(|_| -(1.0 - rng.random::<f64>()).ln()).collect();
        let d = reconstruct(&v, 1, &g, 1.0).unwrap();
        // Compare away from the tail cell that collects everything beyond v_max.
        d.density[0][..g.len() - 1]
            .iter()
            .zip(&exact)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    };
    let (coarse, fine) = (sup(1_000), sup(100_000));
    assert!(fine < coarse / 3.0, "{fine} vs {coarse}");
    assert!(fine < 0.05, "{fine}");
}

#[test]
fn z_statistics() {
    let basis = GpcBasis::with_default_nodes(RandomParamSpec::uniform(0.0, 1.0).unwrap(), &[3]).unwrap();
    let w = basis.weights();
    let flat: Vec<Vec<f64>> = (0..basis.num_nodes()).map(|_| vec![1.0, 2.0, 3.0]).collect();
    let (e, v) = stats_over_z(&flat, w).unwrap();
    assert_eq!(e.len(), 3);
    assert_abs_diff_eq!(e[1], 2.0, epsilon = 1e-14);
    assert!(v.iter().all(|x| x.abs() < 1e-13));
    // f = c0 + c1 Φ₁(z): expectation c0, variance c1².
    let (c0, c1) = (0.7, 0.3);
    let lin: Vec<Vec<f64>> = (0..basis.num_nodes())
        .map(|q| {
            let phi = basis.eval_basis(basis.node(q)).unwrap();
            vec![c0 + c1 * phi[1]]
        })
        .collect();
    let (e, v) = stats_over_z(&lin, w).unwrap();
    assert_abs_diff_eq!(e[0], c0, epsilon = 1e-13);
    assert_abs_diff_eq!(v[0], c1 * c1, epsilon = 1e-13);
    assert!(stats_over_z(&lin[..2], w).is_err());
}

#[test]
fn l2p_examples() {
    let basis = GpcBasis::with_default_nodes(RandomParamSpec::uniform(0.0, 1.0).unwrap(), &[2]).unwrap();
    let w = basis.weights();
    let a: Vec<f64> = (0..basis.num_nodes()).map(|q| basis.node(q)[0].sin()).collect();
    assert_eq!(l2p_error(&a, &a, w).unwrap(), 0.0);
    let phi1: Vec<f64> = (0..basis.num_nodes()).map(|q| basis.eval_basis(basis.node(q)).unwrap()[1]).collect();
    let b: Vec<f64> = a.iter().zip(&phi1).map(|(x, p)| x - p).collect();
    assert_abs_diff_eq!(l2p_error(&a, &b, w).unwrap(), 1.0, epsilon = 1e-13);
    let c: Vec<f64> = a.iter().map(|x| x + 0.25).collect();
    assert_abs_diff_eq!(l2p_error(&a, &c, w).unwrap(), 0.25, epsilon = 1e-14);
    assert!(l2p_error(&a, &c[1..], w).is_err());
    let traj_a = vec![a.clone(), a.clone()];
    let traj_b = vec![a.clone(), c];
    assert_abs_diff_eq!(l2p_error_max(&traj_a, &traj_b, w).unwrap(), 0.25, epsilon = 1e-14);
}

#[test]
fn line_fit() {
    let x = [1.0, 2.0, 3.0, 4.0];
    let y: Vec<f64> = x.iter().map(|v| 2.0 - 0.5 * v).collect();
    let f = linear_fit(&x, &y).unwrap();
    assert_abs_diff_eq!(f.slope, -0.5, epsilon = 1e-14);
    assert_abs_diff_eq!(f.intercept, 2.0, epsilon = 1e-14);
    assert!(f.slope_stderr < 1e-12);
    assert!(linear_fit(&[1.0, 1.0], &[0.0, 1.0]).is_err());
}

#[test]
fn deterministic_observable_has_no_mc_error() {
    let s = mc_error_study(&[10, 100, 1000], 4, 1, None, |_, _| Ok(1.0)).unwrap();
    assert!(s.rms.iter().all(|r| *r == 0.0));
    let s = mc_error_study(&[10, 100], 3, 1, Some(0.0), |n, _| Ok(1.0 / n as f64)).unwrap();
    assert_abs_diff_eq!(s.fit.slope, -1.0, epsilon = 1e-12);
}

#[test]
fn envelope_examples() {
    // ρ = 0.4, μ = 1: P = 0.6, β = 0.84 > 0.
    let b = TrafficBounds::new(BoundCase::Alpha1, &[0.6], 0.6).unwrap();
    assert_abs_diff_eq!(b.beta[0], 0.84, epsilon = 1e-14);
    assert_abs_diff_eq!(b.c1[0], 0.5 * (3.0 - 0.6 - 0.36), epsilon = 1e-14);
    assert_abs_diff_eq!(b.upper(0, 0.0), 0.6, epsilon = 1e-15);
    assert_abs_diff_eq!(b.lower(0, 0.0), 0.6, epsilon = 1e-15);
    // β ≤ 0 branch uses C₁ = P.
    let b = TrafficBounds::new(BoundCase::Alpha1, &[0.9], 0.5).unwrap();
    assert!(b.beta[0] <= 0.0);
    assert_eq!(b.c1[0], 0.9);
    // α = 2: V⁺ → (C₁ + C₂)/C₁ = (P² + P + 1)/(2P).
    let p: f64 = 0.6;
    let b = TrafficBounds::new(BoundCase::Alpha2, &[p], 0.6).unwrap();
    assert_abs_diff_eq!(b.upper(0, 200.0), (p * p + p + 1.0) / (2.0 * p), epsilon = 1e-12);
    assert!(b.lower(0, 200.0) < 1e-30);
    assert!(TrafficBounds::new(BoundCase::Alpha2, &[0.0], 0.6).is_err());
    assert!(TrafficBounds::new(BoundCase::Alpha2, &[0.5], 0.0).is_err());
}

#[test]
fn envelope_check_counts_violations() {
    let b = TrafficBounds::new(BoundCase::Alpha1, &[0.6, 0.3], 0.6).unwrap();
    let r = bound_check(&[0.0], &[vec![0.6, 0.6]], &b, 0.0).unwrap();
    assert!(r.pass());
    assert_eq!(r.samples, 2);
    let times: Vec<f64> = (0..100).map(|k| 0.1 * k as f64).collect();
    let mut mean: Vec<Vec<f64>> = times.iter().map(|t| vec![b.lower(0, *t), b.upper(1, *t)]).collect();
    assert_eq!(bound_check(&times, &mean, &b, 0.0).unwrap().violations, 0);
    mean[50][0] = b.lower(0, times[50]) - 0.02;
    mean[60][1] = 5.0;
    let r = bound_check(&times, &mean, &b, 0.01).unwrap();
    assert_eq!(r.violations, 2);
    assert!(r.pass());
    assert!(bound_check(&times[1..], &mean, &b, 0.01).is_err());
}

#[test]
fn spectral_study_reference_has_zero_error() {
    let model = wealth_model(
        WealthParams {
            kappa: 1.0,
            delta: ParamFn::affine(0.0, 1.0, 0),
            lambda: 0.5,
            sigma2: 0.5,
            w_a: 0.9,
            w_b: 1.1,
        },
        0.1,
    )
    .unwrap();
    let basis = NodeRule::Oversampled.basis(&RandomParamSpec::uniform(0.0, 1.0).unwrap(), 4).unwrap();
    let cfg = CollisionConfig {
        dt: 0.01,
        t_final: 0.2,
        acceptance: Acceptance::Sigmoid { beta: 1.0 },
        seed: 3,
        sigma_policy: SigmaPolicy::Truncate,
        admissibility: Admissibility::Strict,
        rescale: None,
    };
    let out = run(&model, &cfg, &basis, &InitialLaw::Uniform { a: 0.0, b: 2.0 }, 200, None, None).unwrap();
    let s = spectral_study(out.log.as_ref().unwrap(), &[1, 4], 4, NodeRule::Oversampled, 5).unwrap();
    assert_eq!(s.error_second[1], 0.0);
    assert_eq!(s.error_mean[1], 0.0);
    assert!(s.error_second[0] > 0.0);
}

#[test]
fn csv_headers() {
    let b = TrafficBounds::new(BoundCase::Alpha1, &[0.6], 0.6).unwrap();
    let mut buf = Vec::new();
    write_bounds_csv(&mut buf, &[0.0], &[vec![0.6]], &b).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "t,z_index,V,Vminus,Vplus\n0,0,0.6,0.6,0.6\n");
    let mut buf = Vec::new();
    let study = McStudy {
        sizes: vec![10],
        rms: vec![0.5],
        mean: vec![1.0],
        fit: LinearFit {
            intercept: 0.0,
            slope: 0.0,
            slope_stderr: 0.0,
        },
    };
    write_mc_csv(&mut buf, &study).unwrap();
    assert_eq!(String::from_utf8(buf).unwrap(), "N,rms\n10,0.5\n");
}
