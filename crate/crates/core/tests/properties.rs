use proptest::prelude::*;

use dsmcsg::analysis::{l2p_error, BoundCase, TrafficBounds};
use dsmcsg::dsmc::{
    node_moments, replay, rescale_moments, run, Acceptance, Admissibility, CollisionConfig, InitialLaw,
    ParticleEnsemble, RescaleMode, SigmaPolicy,
};
use dsmcsg::fokker_planck::{FpSolver, FpState, VGrid};
use dsmcsg::models::{
    gambling_model, traffic_model, wealth_model, GamblingParams, TrafficParams, WealthParams,
};
use dsmcsg::rng::stream;
use dsmcsg::{GpcBasis, ModelSpec, ParamFn, RandomParamSpec};

fn traffic(rho: f64, eps: f64) -> ModelSpec {
    traffic_model(
        TrafficParams {
            rho,
            mu: ParamFn::affine(1.0, 2.0, 0),
            alpha: ParamFn::affine(0.0, 2.0, 1),
            a: TrafficParams::default_amplitude(rho),
            c: 0.3,
            sigma2: 0.2,
        },
        eps,
    )
    .unwrap()
}

fn wealth(eps: f64) -> ModelSpec {
    wealth_model(
        WealthParams {
            kappa: 1.0,
            delta: ParamFn::affine(0.0, 1.0, 0),
            lambda: 0.5,
            sigma2: 0.5,
            w_a: 0.9,
            w_b: 1.1,
        },
        eps,
    )
    .unwrap()
}

fn gambling() -> ModelSpec {
    gambling_model(GamblingParams {
        kappa: 1.0,
        delta: ParamFn::affine(0.0, 0.5, 0),
    })
    .unwrap()
}

#[test]
fn traffic_updates_stay_in_unit_interval_over_a_million_draws() {
    let mut rng = stream(17, 3);
    for (rho, eps) in [(0.4, 0.1), (0.6, 0.1), (0.4, 0.05), (0.2, 0.5)] {
        let model = traffic(rho, eps);
        for _ in 0..250_000 {
            let z = [rand::Rng::random::<f64>(&mut rng), rand::Rng::random::<f64>(&mut rng)];
            let np = model.node_params(&z);
            let v: f64 = rand::Rng::random(&mut rng);
            let w: f64 = rand::Rng::random(&mut rng);
            let draw = model.sample_pair(&mut rng);
            let (dv, _) = model.increments(v, w, &np, &draw);
            let vp = v + dv;
            assert!((0.0..=1.0).contains(&vp), "v = {v}, w = {w}, z = {z:?}: v' = {vp}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn wealth_updates_stay_nonnegative(v in 0.0f64..50.0, z in 0.0f64..1.0, seed in any::<u64>(), eps in 0.01f64..1.0) {
        let model = wealth(eps);
        let np = model.node_params(&[z]);
        let mut rng = stream(seed, 1);
        let draw = model.sample_pair(&mut rng);
        let (dv, _) = model.increments(v, draw.extra, &np, &draw);
        prop_assert!(v + dv >= -1e-12);
    }

    #[test]
    fn gambling_updates_split_the_pot(v in 0.0f64..20.0, w in 0.0f64..20.0, omega in 0.0f64..1.0) {
        let model = gambling();
        let np = model.node_params(&[0.3]);
        let draw = dsmcsg::PairDraw { xi: 0.5, eta: 0.0, extra: omega };
        let (dv, dw) = model.increments(v, w, &np, &draw);
        prop_assert!((v + dv + w + dw - (v + w)).abs() <= 1e-12 * (1.0 + v + w));
        prop_assert!(v + dv >= -1e-12 && w + dw >= -1e-12);
    }

    #[test]
    fn kernels_are_symmetric(v in 0.0f64..5.0, w in 0.0f64..5.0, z in 0.0f64..1.0) {
        for model in [gambling(), wealth(0.1)] {
            let np = model.node_params(&[z]);
            prop_assert_eq!(model.kernel(v, w, &np), model.kernel(w, v, &np));
        }
        let t = traffic(0.4, 0.1);
        let np = t.node_params(&[z, z]);
        let (v, w) = (v / 5.0, w / 5.0);
        prop_assert_eq!(t.kernel(v, w, &np), t.kernel(w, v, &np));
    }

    #[test]
    fn fp_step_keeps_positivity_and_mass(raw in prop::collection::vec(0.0f64..1.0, 51), dt_frac in 0.1f64..1.0) {
        let grid = VGrid::new(0.0, 1.0, 51).unwrap();
        let basis = GpcBasis::new(RandomParamSpec::unit_cube(2).unwrap(), &[1, 1], &[2, 2]).unwrap();
        let solver = FpSolver::for_basis(&traffic(0.4, 0.1), grid.clone(), &basis).unwrap();
        let mass = grid.mass(&raw).max(1e-300);
        let f: Vec<f64> = raw.iter().map(|x| x / mass).collect();
        let mut state = FpState { t: 0.0, f: vec![f; basis.num_nodes()] };
        solver.step(&mut state, dt_frac * solver.max_dt()).unwrap();
        for f in &state.f {
            prop_assert!(f.iter().all(|x| *x >= 0.0));
            prop_assert!((grid.mass(f) - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn l2p_error_is_a_metric(
        a in prop::collection::vec(-5.0f64..5.0, 6),
        b in prop::collection::vec(-5.0f64..5.0, 6),
        c in prop::collection::vec(-5.0f64..5.0, 6),
    ) {
        let basis = GpcBasis::new(RandomParamSpec::uniform(0.0, 1.0).unwrap(), &[5], &[6]).unwrap();
        let w = basis.weights();
        let ab = l2p_error(&a, &b, w).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(l2p_error(&a, &a, w).unwrap(), 0.0);
        prop_assert!((ab - l2p_error(&b, &a, w).unwrap()).abs() <= 1e-14);
        let bound = l2p_error(&a, &c, w).unwrap() + l2p_error(&c, &b, w).unwrap();
        prop_assert!(ab <= bound + 1e-12);
    }

    #[test]
    fn lower_envelope_never_exceeds_upper(p in 0.01f64..1.0, v0 in 0.01f64..1.0, alpha2 in any::<bool>()) {
        let case = if alpha2 { BoundCase::Alpha2 } else { BoundCase::Alpha1 };
        let b = TrafficBounds::new(case, &[p], v0).unwrap();
        for k in 0..=2000 {
            let t = k as f64 * 0.05;
            prop_assert!(b.lower(0, t) <= b.upper(0, t) + 1e-12, "t = {}", t);
        }
        prop_assert!((b.lower(0, 0.0) - v0).abs() < 1e-12 && (b.upper(0, 0.0) - v0).abs() < 1e-12);
    }

    #[test]
    fn gpc_bases_are_orthonormal(m1 in 0usize..7, m2 in 0usize..4, extra in 0usize..4) {
        let spec = RandomParamSpec::unit_cube(2).unwrap();
        let basis = GpcBasis::new(spec, &[m1, m2], &[m1 + 1 + extra, m2 + 1 + extra]).unwrap();
        let phi: Vec<Vec<f64>> = (0..basis.num_nodes()).map(|q| basis.eval_basis(basis.node(q)).unwrap()).collect();
        for h in 0..basis.len() {
            for k in 0..basis.len() {
                let g: f64 = phi.iter().zip(basis.weights()).map(|(p, w)| w * p[h] * p[k]).sum();
                let id = if h == k { 1.0 } else { 0.0 };
                prop_assert!((g - id).abs() <= 1e-12, "({}, {}) = {}", h, k, g);
            }
        }
    }

    #[test]
    fn affine_rescale_hits_targets(
        m in 1usize..6,
        shift in -0.5f64..0.5,
        spread in 0.05f64..2.0,
        seed in any::<u64>(),
    ) {
        let basis = GpcBasis::new(RandomParamSpec::uniform(0.0, 1.0).unwrap(), &[m], &[m + 1]).unwrap();
        let q = basis.num_nodes();
        let mut rng = stream(seed, 2);
        let states: Vec<f64> = (0..300).map(|_| rand::Rng::random_range(&mut rng, 0.0..2.0)).collect();
        let mut ens = ParticleEnsemble::from_states(&states, &basis).unwrap();
        let v_fp: Vec<f64> = (0..q).map(|j| 1.0 + shift * j as f64 / q as f64).collect();
        let e_fp: Vec<f64> = v_fp.iter().map(|v| v * v + spread).collect();
        prop_assert!(rescale_moments(&mut ens, &v_fp, &e_fp, &basis, RescaleMode::VarianceMatching).unwrap());
        let got = node_moments(&ens.node_values(&basis), q);
        for j in 0..q {
            prop_assert!((got.mean[j] - v_fp[j]).abs() <= 1e-10);
            prop_assert!((got.second[j] - e_fp[j]).abs() <= 1e-10);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn replay_is_bit_identical(seed in any::<u64>(), sigmoid in any::<bool>()) {
        let model = wealth(0.1);
        let basis = GpcBasis::new(RandomParamSpec::uniform(0.0, 1.0).unwrap(), &[3], &[4]).unwrap();
        let cfg = CollisionConfig {
            dt: 0.05,
            t_final: 1.0,
            acceptance: if sigmoid { Acceptance::Sigmoid { beta: 1.0 } } else { Acceptance::Indicator },
            seed,
            sigma_policy: SigmaPolicy::Truncate,
            admissibility: Admissibility::Tally,
            rescale: None,
        };
        let out = run(&model, &cfg, &basis, &InitialLaw::Uniform { a: 0.0, b: 2.0 }, 500, None, None).unwrap();
        let log = out.log.as_ref().unwrap();
        let mut text = Vec::new();
        log.write(&mut text).unwrap();
        let reread = dsmcsg::dsmc::EventLog::read(text.as_slice()).unwrap();
        prop_assert_eq!(&reread, log);
        let again = replay(&reread, &basis, None, None, None).unwrap();
        let bits = |e: &ParticleEnsemble| e.coeffs().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&again.ensemble), bits(&out.ensemble));
    }
}
