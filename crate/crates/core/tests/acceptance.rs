//! Acceptance suite: runs every criterion at its stated tolerance and prints
//! one `[PASS]` / `[FAIL]` line per criterion. Exits nonzero on any failure.
//!
//! CI scale by default; set `DSMCSG_FULL_SCALE=1` for the full-size runs
//! (N = 1e5 everywhere, reference order 50).

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dsmcsg::analysis::{
    bound_check, l1_distance, mc_error_study, reconstruct_ensemble, spectral_study, stats_over_z, BoundCase,
    NodeRule, SpectralStudy, TrafficBounds, OUT_OF_RANGE_LIMIT,
};
use dsmcsg::dsmc::{
    node_moments, replay, rescale_moments, run, Acceptance, Admissibility, CollisionConfig, EventLog, InitialLaw,
    MomentTarget, ParticleEnsemble, RescaleMode, SigmaPolicy,
};
use dsmcsg::fokker_planck::{fp_solve, Equilibrium, FpMomentTarget, FpSchedule, FpSolver, FpState, VGrid};
use dsmcsg::models::{
    gambling_model, traffic_model, wealth_model, GamblingParams, TrafficParams, WealthParams,
};
use dsmcsg::{GpcBasis, ModelSpec, ParamFn, RandomParamSpec};

type Res<T> = Result<T, Box<dyn std::error::Error>>;

const SUITE_BUDGET: Duration = Duration::from_secs(600);

struct Scale {
    full: bool,
    n_small: usize,
    m_ref: usize,
}

impl Scale {
    fn from_env() -> Self {
        let full = std::env::var("DSMCSG_FULL_SCALE").is_ok_and(|v| v == "1");
        Scale {
            full,
            n_small: if full { 100_000 } else { 10_000 },
            m_ref: if full { 50 } else { 20 },
        }
    }
}

struct Outcome {
    id: usize,
    pass: bool,
    detail: String,
}

fn outcome(id: usize, pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        id,
        pass,
        detail: detail.into(),
    }
}

fn uniform01() -> RandomParamSpec {
    RandomParamSpec::uniform(0.0, 1.0).expect("unit interval")
}

fn interpolatory(orders: &[usize]) -> Res<GpcBasis> {
    let spec = if orders.len() == 1 {
        uniform01()
    } else {
        RandomParamSpec::unit_cube(orders.len())?
    };
    let nq: Vec<usize> = orders.iter().map(|m| m + 1).collect();
    Ok(GpcBasis::new(spec, orders, &nq)?)
}

fn config(dt: f64, t_final: f64, acceptance: Acceptance, seed: u64) -> CollisionConfig {
    CollisionConfig {
        dt,
        t_final,
        acceptance,
        seed,
        sigma_policy: SigmaPolicy::Truncate,
        admissibility: Admissibility::Tally,
        rescale: None,
    }
}

fn wealth_params() -> WealthParams {
    WealthParams {
        kappa: 1.0,
        delta: ParamFn::affine(0.0, 1.0, 0),
        lambda: 0.5,
        sigma2: 0.5,
        w_a: 0.9,
        w_b: 1.1,
    }
}

fn traffic_params(rho: f64, mu: ParamFn, alpha: ParamFn) -> TrafficParams {
    TrafficParams {
        rho,
        mu,
        alpha,
        a: TrafficParams::default_amplitude(rho),
        c: 0.3,
        sigma2: 0.2,
    }
}

/// `E_z` of the cell-averaged equilibria at the basis nodes, plus `Var_z`.
fn equilibrium_stats(model: &ModelSpec, basis: &GpcBasis, grid: &VGrid) -> Res<(Vec<f64>, Vec<f64>)> {
    let mut per_node = Vec::new();
    for np in model.nodes(basis)? {
        let eq = Equilibrium::of(model, &np).ok_or("model has no closed-form equilibrium")?;
        per_node.push(eq.cell_averages(grid)?);
    }
    Ok(stats_over_z(&per_node, basis.weights())?)
}

// Criteria 1 and 2 share the Test 1 run.
fn test1(_s: &Scale) -> Res<Vec<Outcome>> {
    let n = 100_000;
    let model = gambling_model(GamblingParams {
        kappa: 1.0,
        delta: ParamFn::affine(0.0, 0.5, 0),
    })?;
    let basis = interpolatory(&[5])?;
    let law = InitialLaw::Uniform { a: 0.0, b: 2.0 };
    let out = run(&model, &config(0.1, 10.0, Acceptance::Indicator, 1), &basis, &law, n, None, None)?;

    let grid = VGrid::with_spacing(0.0, 10.0, 0.05)?;
    let dens = reconstruct_ensemble(&out.ensemble, &basis, &grid, OUT_OF_RANGE_LIMIT)?;
    let (e, var) = stats_over_z(&dens.density, basis.weights())?;
    let (e_ref, var_ref) = equilibrium_stats(&model, &basis, &grid)?;
    let l1_e = l1_distance(&e, &e_ref, grid.dv())?;
    let l1_var = l1_distance(&var, &var_ref, grid.dv())?;

    let tr = &out.trajectory;
    let stderr = (1.0f64 / 3.0).sqrt() / (n as f64).sqrt();
    let last = tr.mean.last().ok_or("empty trajectory")?;
    let drift = last.iter().map(|m| (m - 1.0).abs()).fold(0.0, f64::max);
    let step_drift = tr
        .mean
        .windows(2)
        .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    let c1 = l1_e <= 0.05 && l1_var <= 0.05 && drift <= 5.0 * stderr && step_drift <= 1e-12;
    let c1_detail = format!(
        "L1(E_z f) = {l1_e:.4}, L1(Var_z f) = {l1_var:.4} (limit 0.05); mean drift {drift:.2e} \
         (limit {:.2e}); per-step change {step_drift:.1e} (limit 1e-12)",
        5.0 * stderr
    );

    let values = out.ensemble.node_values(&basis);
    let m = node_moments(&values, basis.num_nodes());
    let mut worst: f64 = 0.0;
    let mut rels = Vec::new();
    for (q, np) in model.nodes(&basis)?.iter().enumerate() {
        let var = m.second[q] - m.mean[q] * m.mean[q];
        let rel = var * (1.0 - np.exponent) - 1.0;
        rels.push(format!("{:.3}:{rel:+.3}", np.exponent));
        worst = worst.max(rel.abs());
    }
    let c2_detail = format!(
        "worst relative variance error {worst:.3} (limit 0.10); delta:rel = [{}]",
        rels.join(", ")
    );
    Ok(vec![outcome(1, c1, c1_detail), outcome(2, worst <= 0.10, c2_detail)])
}

fn test2_consistency(s: &Scale) -> Res<Vec<Outcome>> {
    let basis = interpolatory(&[5])?;
    let grid = VGrid::with_spacing(0.0, 10.0, 0.05)?;
    let law = InitialLaw::Uniform { a: 0.0, b: 2.0 };
    let mut dists = Vec::new();
    for eps in [0.5, 0.1, 0.05] {
        let model = wealth_model(wealth_params(), eps)?;
        let cfg = config(eps / 10.0, 10.0, Acceptance::Indicator, 2);
        let out = run(&model, &cfg, &basis, &law, s.n_small, None, None)?;
        let dens = reconstruct_ensemble(&out.ensemble, &basis, &grid, 1e-2)?;
        let (e, _) = stats_over_z(&dens.density, basis.weights())?;
        let (e_ref, _) = equilibrium_stats(&model, &basis, &grid)?;
        dists.push(l1_distance(&e, &e_ref, grid.dv())?);
    }
    let monotone = dists.windows(2).all(|w| w[1] < w[0]);
    let pass = monotone && dists[2] <= 0.08;
    Ok(vec![outcome(
        3,
        pass,
        format!(
            "L1 at eps = 0.5, 0.1, 0.05: {:.4}, {:.4}, {:.4} (monotone: {monotone}, limit 0.08 at 0.05)",
            dists[0], dists[1], dists[2]
        ),
    )])
}

fn wealth_fp_steady_state(_s: &Scale) -> Res<Vec<Outcome>> {
    let model = wealth_model(wealth_params(), 0.1)?;
    let basis = GpcBasis::with_default_nodes(uniform01(), &[5])?;
    let grid = VGrid::with_spacing(0.0, 10.0, 0.05)?;
    let solver = FpSolver::for_basis(&model, grid.clone(), &basis)?;
    let f0 = FpState::from_law(&InitialLaw::Uniform { a: 0.0, b: 2.0 }, &grid, basis.num_nodes())?;
    let sched = FpSchedule {
        dt: solver.max_dt(),
        t_final: 60.0,
        record_every: 1000,
        keep_snapshots: false,
    };
    let sol = fp_solve(&solver, f0, &sched, basis.weights())?;
    let mut worst: f64 = 0.0;
    for (q, np) in model.nodes(&basis)?.iter().enumerate() {
        let eq = Equilibrium::of(&model, np).ok_or("wealth equilibrium")?;
        let mut target = eq.cell_averages(&grid)?;
        let mass = grid.mass(&target);
        target.iter_mut().for_each(|x| *x /= mass);
        let f = &sol.final_state.f[q];
        let num: f64 = f.iter().zip(&target).map(|(a, b)| (a - b).abs()).sum();
        let den: f64 = target.iter().sum();
        worst = worst.max(num / den);
    }
    Ok(vec![outcome(
        4,
        worst <= 1e-2,
        format!("worst per-node relative L1 {worst:.2e} at T = 60 (limit 1e-2)"),
    )])
}

fn log10_drop(errors: &[f64]) -> f64 {
    errors[0].log10() - errors[errors.len() - 1].log10()
}

/// No error exceeds the best earlier one by more than 0.3 decades.
fn monotone_within_noise(errors: &[f64]) -> bool {
    let mut best = f64::INFINITY;
    for &e in errors {
        if e.log10() > best.log10() + 0.3 {
            return false;
        }
        best = best.min(e);
    }
    true
}

fn study(log: &EventLog, m_ref: usize) -> Res<SpectralStudy> {
    Ok(spectral_study(log, &(1..=8).collect::<Vec<_>>(), m_ref, NodeRule::Interpolatory, 1)?)
}

fn spectral(s: &Scale) -> Res<Vec<Outcome>> {
    let law_w = InitialLaw::Uniform { a: 0.0, b: 2.0 };
    let wealth = wealth_model(wealth_params(), 0.1)?;
    let traffic = traffic_model(
        traffic_params(0.4, ParamFn::affine(1.0, 2.0, 0), ParamFn::affine(0.0, 2.0, 1)),
        0.1,
    )?;
    let law_t = InitialLaw::Uniform { a: 0.0, b: 1.0 };
    let mut lines = Vec::new();
    let mut pass = true;
    let cases: [(&str, &ModelSpec, &InitialLaw, f64, usize, f64); 2] =
        [("wealth", &wealth, &law_w, 0.01, 1, 1.0), ("traffic", &traffic, &law_t, 0.1, 2, 0.01)];
    for (name, model, law, dt, dims, beta) in cases {
        let basis = interpolatory(&vec![3; dims])?;
        for acc in [Acceptance::Sigmoid { beta }, Acceptance::Indicator] {
            let mut cfg = config(dt, 1.0, acc, 5);
            if name == "traffic" {
                cfg.admissibility = Admissibility::Strict;
            }
            let out = run(model, &cfg, &basis, law, s.n_small, None, None)?;
            let log = out.log.ok_or("run returned no event log")?;
            let st = study(&log, s.m_ref)?;
            let drop = log10_drop(&st.error_second);
            let mono = monotone_within_noise(&st.error_second);
            let ok = match acc {
                Acceptance::Sigmoid { .. } => drop >= 3.0 && mono,
                Acceptance::Indicator => drop < 1.0,
            };
            pass &= ok;
            let mode = match acc {
                Acceptance::Sigmoid { beta } => format!("sigmoid beta={beta}"),
                Acceptance::Indicator => "indicator".to_string(),
            };
            lines.push(format!(
                "{name} {mode}: drop {drop:.2} decades, monotone {mono} [{}]",
                if ok { "ok" } else { "miss" }
            ));
        }
    }
    Ok(vec![outcome(5, pass, lines.join("; "))])
}

fn mc_rate(s: &Scale) -> Res<Vec<Outcome>> {
    let eps = 0.5;
    let model = wealth_model(wealth_params(), eps)?;
    let basis = interpolatory(&[1])?;
    let law = InitialLaw::Uniform { a: 0.0, b: 2.0 };
    let t_final = if s.full { 10.0 } else { 5.0 };
    let st = mc_error_study(&[1_000, 10_000, 100_000], 20, 100, None, |n, seed| {
        let cfg = config(eps / 10.0, t_final, Acceptance::Indicator, seed);
        let out = run(&model, &cfg, &basis, &law, n, None, None)?;
        out.trajectory
            .expected_mean()
            .last()
            .copied()
            .ok_or_else(|| dsmcsg::Error::State("empty trajectory".into()))
    })?;
    let slope = st.fit.slope;
    Ok(vec![outcome(
        6,
        (slope + 0.5).abs() <= 0.1,
        format!(
            "RMS {:.2e}, {:.2e}, {:.2e}; slope {slope:.3} +- {:.3} (target -0.5 +- 0.1)",
            st.rms[0], st.rms[1], st.rms[2], st.fit.slope_stderr
        ),
    )])
}

fn traffic_bounds(s: &Scale) -> Res<Vec<Outcome>> {
    let basis = interpolatory(&[1])?;
    let tol = 5.0 / (s.n_small as f64).sqrt();
    let mut worst_fraction: f64 = 0.0;
    let mut samples = 0;
    for (alpha, case) in [(1.0, BoundCase::Alpha1), (2.0, BoundCase::Alpha2)] {
        for rho in [0.4, 0.6] {
            for mu in [1.0, 3.0] {
                let p = traffic_params(rho, ParamFn::constant(mu), ParamFn::constant(alpha));
                let model = traffic_model(p.clone(), 0.1)?;
                let v0 = 1.0 - rho;
                let h = v0.min(1.0 - v0);
                let mut cfg = config(0.1, 20.0, Acceptance::Indicator, 11);
                cfg.admissibility = Admissibility::Strict;
                let law = InitialLaw::Uniform { a: v0 - h, b: v0 + h };
                let out = run(&model, &cfg, &basis, &law, s.n_small, None, None)?;
                let probs: Vec<f64> = (0..basis.num_nodes()).map(|q| p.accel_probability(basis.node(q))).collect();
                let bounds = TrafficBounds::new(case, &probs, v0)?;
                let tr = &out.trajectory;
                let r = bound_check(&tr.times, &tr.mean, &bounds, tol)?;
                worst_fraction = worst_fraction.max(r.fraction());
                samples += r.samples;
            }
        }
    }
    Ok(vec![outcome(
        7,
        worst_fraction <= 0.01,
        format!("8 cases, {samples} samples, worst violation fraction {worst_fraction:.4} (limit 0.01, tol {tol:.3})"),
    )])
}

fn rescaling(s: &Scale) -> Res<Vec<Outcome>> {
    let model = wealth_model(wealth_params(), 0.1)?;
    let basis = interpolatory(&[5])?;
    let q = basis.num_nodes();
    let grid = VGrid::with_spacing(0.0, 200.0, 0.05)?;
    let law = InitialLaw::Uniform { a: 0.0, b: 2.0 };
    let (dt, t_final) = (0.01, 10.0);
    let solver = FpSolver::for_basis(&model, grid.clone(), &basis)?;
    let sched = FpSchedule {
        dt,
        t_final,
        record_every: 1,
        keep_snapshots: false,
    };
    let fp = fp_solve(&solver, FpState::from_law(&law, &grid, q)?, &sched, basis.weights())?;

    let mut sup = [0.0f64; 2];
    let mut exact: f64 = 0.0;
    for (k, rescale) in [None, Some(RescaleMode::VarianceMatching)].into_iter().enumerate() {
        let mut cfg = config(dt, t_final, Acceptance::Sigmoid { beta: 1.0 }, 3);
        cfg.rescale = rescale;
        let mut target = FpMomentTarget::new(
            FpSolver::for_basis(&model, grid.clone(), &basis)?,
            FpState::from_law(&law, &grid, q)?,
            dt,
        )?;
        let tg = rescale.map(|_| &mut target as &mut dyn MomentTarget);
        let out = run(&model, &cfg, &basis, &law, s.n_small, tg, None)?;
        let tr = &out.trajectory;
        if tr.times.len() != fp.times.len() {
            return Err("trajectory and Fokker-Planck record lengths differ".into());
        }
        for n in 0..tr.times.len() {
            for j in 0..q {
                let dv = (tr.mean[n][j] / fp.mean[n][j] - 1.0).abs();
                let de = (tr.second[n][j] / fp.second[n][j] - 1.0).abs();
                sup[k] = sup[k].max(dv).max(de);
                if rescale.is_some() && n > 0 {
                    exact = exact.max(dv).max(de);
                }
            }
        }
    }
    let pass = exact <= 1e-10 && sup[1] <= 0.02 && sup[0] >= 2.0 * sup[1];
    Ok(vec![outcome(
        8,
        pass,
        format!(
            "post-rescale moment error {exact:.1e} (limit 1e-10); sup relative deviation from FP: \
             rescaled {:.4} (limit 0.02), unrescaled {:.4} (needs >= 2x)",
            sup[1], sup[0]
        ),
    )])
}

fn properties(_s: &Scale, elapsed: Duration) -> Res<Vec<Outcome>> {
    let mut failures = Vec::new();

    // Orthonormality in one and two dimensions.
    for basis in [interpolatory(&[8])?, GpcBasis::with_default_nodes(RandomParamSpec::unit_cube(2)?, &[3, 4])?] {
        let phi: Vec<Vec<f64>> = (0..basis.num_nodes())
            .map(|q| basis.eval_basis(basis.node(q)))
            .collect::<Result<_, _>>()?;
        let mut worst: f64 = 0.0;
        for h in 0..basis.len() {
            for k in 0..basis.len() {
                let g: f64 = phi.iter().zip(basis.weights()).map(|(p, w)| w * p[h] * p[k]).sum();
                worst = worst.max((g - f64::from(u8::from(h == k))).abs());
            }
        }
        if worst > 1e-12 {
            failures.push(format!("gram error {worst:.1e}"));
        }
    }

    // Fokker-Planck positivity and per-step mass.
    let wealth = wealth_model(wealth_params(), 0.1)?;
    let traffic = traffic_model(
        traffic_params(0.4, ParamFn::affine(1.0, 2.0, 0), ParamFn::affine(0.0, 2.0, 1)),
        0.1,
    )?;
    let fp_cases = [
        (&wealth, VGrid::with_spacing(0.0, 10.0, 0.05)?, interpolatory(&[3])?, (0.0, 2.0)),
        (&traffic, VGrid::new(0.0, 1.0, 51)?, interpolatory(&[2, 2])?, (0.0, 1.0)),
    ];
    for (model, grid, basis, (a, b)) in fp_cases {
        let solver = FpSolver::for_basis(model, grid.clone(), &basis)?;
        let mut state = FpState::from_law(&InitialLaw::Uniform { a, b }, &grid, basis.num_nodes())?;
        let dt = solver.max_dt();
        for _ in 0..200 {
            let before: Vec<f64> = state.f.iter().map(|f| grid.mass(f)).collect();
            solver.step(&mut state, dt)?;
            for (f, m0) in state.f.iter().zip(&before) {
                if f.iter().any(|x| *x < 0.0) {
                    failures.push(format!("{} FP density negative", model.name()));
                }
                if (grid.mass(f) - m0).abs() > 1e-12 {
                    failures.push(format!("{} FP mass changed by {:.1e}", model.name(), grid.mass(f) - m0));
                }
            }
        }
    }

    // Traffic speeds stay in [0, 1] (strict admissibility aborts otherwise).
    let basis = interpolatory(&[3, 3])?;
    let mut cfg = config(0.1, 5.0, Acceptance::Indicator, 9);
    cfg.admissibility = Admissibility::Strict;
    let law = InitialLaw::Uniform { a: 0.0, b: 1.0 };
    let out = run(&traffic, &cfg, &basis, &law, 5_000, None, None)?;
    if out.ensemble.node_values(&basis).iter().any(|v| !(0.0..=1.0).contains(v)) {
        failures.push("traffic speed left [0, 1]".into());
    }

    // Replay bit-equality, also through the text log.
    let log = out.log.as_ref().ok_or("no event log")?;
    let mut text = Vec::new();
    log.write(&mut text)?;
    let reread = EventLog::read(text.as_slice())?;
    for l in [log, &reread] {
        let again = replay(l, &basis, None, None, None)?;
        let same = again
            .ensemble
            .coeffs()
            .iter()
            .zip(out.ensemble.coeffs())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            failures.push("replay differs from the recorded run".into());
        }
    }

    // Affine rescale exactness in the span.
    let basis = interpolatory(&[4])?;
    let q = basis.num_nodes();
    let states: Vec<f64> = (0..2_000).map(|i| 0.1 + (i as f64 * 0.618_034).fract() * 1.8).collect();
    let mut ens = ParticleEnsemble::from_states(&states, &basis)?;
    let v_fp: Vec<f64> = (0..q).map(|j| 1.0 + 0.1 * j as f64).collect();
    let e_fp: Vec<f64> = v_fp.iter().map(|v| v * v + 0.3).collect();
    rescale_moments(&mut ens, &v_fp, &e_fp, &basis, RescaleMode::VarianceMatching)?;
    let m = node_moments(&ens.node_values(&basis), q);
    let worst = (0..q)
        .map(|j| ((m.mean[j] - v_fp[j]).abs()).max((m.second[j] - e_fp[j]).abs()))
        .fold(0.0, f64::max);
    if worst > 1e-10 {
        failures.push(format!("rescale misses targets by {worst:.1e}"));
    }

    if elapsed > SUITE_BUDGET {
        failures.push(format!("suite took {:.0} s (budget {} s)", elapsed.as_secs_f64(), SUITE_BUDGET.as_secs()));
    }
    let detail = if failures.is_empty() {
        format!(
            "orthonormality, FP positivity/mass, traffic support, replay, rescale exactness green; suite time {:.0} s",
            elapsed.as_secs_f64()
        )
    } else {
        failures.join("; ")
    };
    Ok(vec![outcome(9, failures.is_empty(), detail)])
}

type Criterion = fn(&Scale) -> Res<Vec<Outcome>>;

fn main() -> ExitCode {
    let scale = Scale::from_env();
    println!(
        "acceptance suite ({} scale)",
        if scale.full { "full" } else { "CI" }
    );
    let start = Instant::now();
    let groups: [(&[usize], Criterion); 7] = [
        (&[1, 2], test1),
        (&[3], test2_consistency),
        (&[4], wealth_fp_steady_state),
        (&[5], spectral),
        (&[6], mc_rate),
        (&[7], traffic_bounds),
        (&[8], rescaling),
    ];
    let mut failed = 0;
    let mut report = |ids: &[usize], res: Res<Vec<Outcome>>, took: Duration| match res {
        Ok(outs) => {
            for o in outs {
                let tag = if o.pass { "PASS" } else { "FAIL" };
                failed += usize::from(!o.pass);
                println!("[{tag}] criterion {}: {} ({:.1} s)", o.id, o.detail, took.as_secs_f64());
            }
        }
        Err(e) => {
            for id in ids {
                failed += 1;
                println!("[FAIL] criterion {id}: error: {e}");
            }
        }
    };
    for (ids, f) in groups {
        let t0 = Instant::now();
        report(ids, f(&scale), t0.elapsed());
    }
    // Runs last so that it can check the time taken by everything before it.
    let t0 = Instant::now();
    report(&[9], properties(&scale, start.elapsed()), t0.elapsed());
    println!("total {:.1} s", start.elapsed().as_secs_f64());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
