//! Experiment pipelines. Each writes its CSVs through a [`Sink`] and returns
//! named checks; the caller turns failed checks into exit code 1.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;

use dsmcsg::analysis::{
    bound_check, l1_distance, mc_error_study, reconstruct_ensemble, spectral_study, stats_over_z, write_bounds_csv,
    write_density_stats_csv, write_mc_csv, write_observables_csv, write_spectral_csv, BoundCase, TrafficBounds,
};
use dsmcsg::dsmc::{node_moments, run, InitialLaw, MomentTarget, RunOutput, Trajectory};
use dsmcsg::fokker_planck::{
    fp_solve, write_density_csv, Equilibrium, FpMomentTarget, FpSchedule, FpSolution, FpSolver, FpState, VGrid,
};
use dsmcsg::{GpcBasis, ModelSpec};

use crate::config::{Experiment, ExperimentConfig, StudyModel};
use crate::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl Report {
    fn check(&mut self, name: impl Into<String>, pass: bool, detail: impl Into<String>) {
        self.checks.push(Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        });
    }

    fn note(&mut self, line: impl Into<String>) {
        self.notes.push(line.into());
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for n in &self.notes {
            s.push_str(n);
            s.push('\n');
        }
        for c in &self.checks {
            let tag = if c.pass { "PASS" } else { "FAIL" };
            s.push_str(&format!("[{tag}] {}: {}\n", c.name, c.detail));
        }
        s
    }
}

/// Output directory whose files all start with the config hash.
pub struct Sink {
    dir: PathBuf,
    hash: String,
}

impl Sink {
    pub fn new(dir: &Path, hash: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Sink {
            dir: dir.to_path_buf(),
            hash: hash.to_string(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        let p = self.path(name);
        let f = File::create(&p).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", p.display())))?;
        Ok(BufWriter::new(f))
    }

    /// Writes `name` with the hash comment line followed by `body`.
    pub fn csv<F>(&self, name: &str, body: F) -> Result<(), CliError>
    where
        F: FnOnce(&mut BufWriter<File>) -> dsmcsg::Result<()>,
    {
        let mut w = self.create(name)?;
        writeln!(w, "# config-sha256: {}", self.hash)?;
        body(&mut w)?;
        w.flush()?;
        info!("wrote {}", self.path(name).display());
        Ok(())
    }

    pub fn text(&self, name: &str, body: &str) -> Result<(), CliError> {
        let mut w = self.create(name)?;
        w.write_all(body.as_bytes())?;
        w.flush()?;
        Ok(())
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, sink: &Sink) -> Result<Report, CliError> {
    let mut report = Report::default();
    match cfg.experiment {
        Experiment::Test1 => test1(cfg, sink, &mut report)?,
        Experiment::Test2 => test2(cfg, sink, &mut report)?,
        Experiment::Test3 => test3(cfg, sink, &mut report)?,
        Experiment::Spectral => spectral(cfg, sink, &mut report)?,
        Experiment::McRate => mc_rate(cfg, sink, &mut report)?,
        Experiment::Bounds => bounds(cfg, sink, &mut report)?,
    }
    sink.text("summary.txt", &report.render())?;
    Ok(report)
}

fn grid(cfg: &ExperimentConfig) -> Result<VGrid, CliError> {
    Ok(VGrid::with_spacing(cfg.grid.v_min, cfg.grid.v_max, cfg.grid.dv)?)
}

fn fp_grid(cfg: &ExperimentConfig) -> Result<VGrid, CliError> {
    Ok(VGrid::with_spacing(cfg.grid.v_min, cfg.grid.fp_v_max, cfg.grid.dv)?)
}

/// `E_z` and `Var_z` of the cell-averaged closed-form equilibria.
fn equilibrium_stats(model: &ModelSpec, basis: &GpcBasis, grid: &VGrid) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let mut per_node = Vec::with_capacity(basis.num_nodes());
    for np in model.nodes(basis)? {
        let eq = Equilibrium::of(model, &np)
            .ok_or_else(|| CliError::Runtime(format!("the {} model has no closed-form equilibrium", model.name())))?;
        per_node.push(eq.cell_averages(grid)?);
    }
    Ok(stats_over_z(&per_node, basis.weights())?)
}

/// DSMC run, rescaled towards a Fokker-Planck solution when configured.
fn simulate(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    basis: &GpcBasis,
    law: &InitialLaw,
    n: usize,
    eps: f64,
    seed: u64,
) -> Result<RunOutput, CliError> {
    let cc = cfg.collision(eps, seed);
    if cc.rescale.is_some() {
        let g = fp_grid(cfg)?;
        let solver = FpSolver::for_basis(model, g.clone(), basis)?;
        let dt_max = solver.max_dt().min(cc.dt);
        let state = FpState::from_law(law, &g, basis.num_nodes())?;
        let mut target = FpMomentTarget::new(solver, state, dt_max)?;
        Ok(run(model, &cc, basis, law, n, Some(&mut target as &mut dyn MomentTarget), None)?)
    } else {
        Ok(run(model, &cc, basis, law, n, None, None)?)
    }
}

fn fp_run(
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    basis: &GpcBasis,
    grid: &VGrid,
    law: &InitialLaw,
    record_dt: f64,
) -> Result<FpSolution, CliError> {
    let solver = FpSolver::for_basis(model, grid.clone(), basis)?;
    let h = solver.max_dt().min(record_dt);
    let sched = FpSchedule {
        dt: h,
        t_final: cfg.run.t_final,
        record_every: ((record_dt / h).round() as usize).max(1),
        keep_snapshots: false,
    };
    Ok(fp_solve(&solver, FpState::from_law(law, grid, basis.num_nodes())?, &sched, basis.weights())?)
}

fn fp_trajectory(sol: &FpSolution, weights: &[f64]) -> Trajectory {
    Trajectory {
        times: sol.times.clone(),
        mean: sol.mean.clone(),
        second: sol.second.clone(),
        weights: weights.to_vec(),
    }
}

fn note_stats(report: &mut Report, label: &str, out: &RunOutput) {
    let s = &out.stats;
    report.note(format!(
        "{label}: {} steps, {} collisions, {} truncated steps, {} inadmissible node values (worst {:.2e})",
        s.steps, s.collisions, s.truncated_steps, s.inadmissible_values, s.worst_violation
    ));
}

fn test1(cfg: &ExperimentConfig, sink: &Sink, report: &mut Report) -> Result<(), CliError> {
    let model = cfg.gambling_model()?;
    let basis = cfg.basis(&cfg.run.order)?;
    let law = cfg.run.initial;
    let n = cfg.run.n;
    let out = simulate(cfg, &model, &basis, &law, n, 1.0, cfg.seed)?;
    note_stats(report, "gambling", &out);
    let tr = &out.trajectory;
    sink.csv("observables.csv", |w| write_observables_csv(w, tr))?;

    let g = grid(cfg)?;
    let dens = reconstruct_ensemble(&out.ensemble, &basis, &g, cfg.grid.out_of_range)?;
    let (e, var) = stats_over_z(&dens.density, basis.weights())?;
    let (e_ref, var_ref) = equilibrium_stats(&model, &basis, &g)?;
    let t = cfg.run.t_final;
    sink.csv("density.csv", |w| write_density_stats_csv(w, &g, &[(t, e.clone(), var.clone())]))?;
    sink.csv("equilibrium.csv", |w| {
        write_density_stats_csv(w, &g, &[(f64::INFINITY, e_ref.clone(), var_ref.clone())])
    })?;

    let lim = cfg.checks.l1_limit;
    let l1_e = l1_distance(&e, &e_ref, g.dv())?;
    let l1_var = l1_distance(&var, &var_ref, g.dv())?;
    report.check("L1 of E_z f", l1_e <= lim, format!("{l1_e:.4} (limit {lim})"));
    report.check("L1 of Var_z f", l1_var <= lim, format!("{l1_var:.4} (limit {lim})"));

    let step_drift = tr
        .mean
        .windows(2)
        .flat_map(|w| w[0].iter().zip(&w[1]).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max);
    report.check(
        "mean conserved per step",
        step_drift <= 1e-12,
        format!("largest change {step_drift:.1e} (limit 1e-12)"),
    );

    let m = node_moments(&out.ensemble.node_values(&basis), basis.num_nodes());
    let mut worst: f64 = 0.0;
    let mut rels = Vec::new();
    for (q, np) in model.nodes(&basis)?.iter().enumerate() {
        let eq = Equilibrium::of(&model, np)
            .ok_or_else(|| CliError::Runtime("gambling equilibrium unavailable".into()))?;
        let v = m.second[q] - m.mean[q] * m.mean[q];
        let rel = v / eq.variance() - 1.0;
        rels.push(format!("{:.3}:{rel:+.3}", np.exponent));
        worst = worst.max(rel.abs());
    }
    let vl = cfg.checks.variance_rel;
    report.check(
        "equilibrium variance per node",
        worst <= vl,
        format!("worst relative error {worst:.3} (limit {vl}); delta:rel = [{}]", rels.join(", ")),
    );
    Ok(())
}

fn descending(eps: &[f64]) -> bool {
    eps.windows(2).all(|w| w[1] < w[0])
}

fn test2(cfg: &ExperimentConfig, sink: &Sink, report: &mut Report) -> Result<(), CliError> {
    let basis = cfg.basis(&cfg.run.order)?;
    let law = cfg.run.initial;
    let g = grid(cfg)?;
    let mut dists = Vec::new();
    for (k, &eps) in cfg.run.eps.iter().enumerate() {
        let model = cfg.wealth_model(eps)?;
        let out = simulate(cfg, &model, &basis, &law, cfg.run.n, eps, cfg.seed.wrapping_add(k as u64))?;
        note_stats(report, &format!("wealth eps={eps}"), &out);
        if out.stats.rescaled_steps > 0 || out.stats.skipped_rescales > 0 {
            report.note(format!(
                "eps={eps}: {} rescaled steps, {} skipped",
                out.stats.rescaled_steps, out.stats.skipped_rescales
            ));
        }
        sink.csv(&format!("observables_eps{eps}.csv"), |w| write_observables_csv(w, &out.trajectory))?;
        let dens = reconstruct_ensemble(&out.ensemble, &basis, &g, cfg.grid.out_of_range)?;
        let (e, var) = stats_over_z(&dens.density, basis.weights())?;
        let t = cfg.run.t_final;
        sink.csv(&format!("density_eps{eps}.csv"), |w| write_density_stats_csv(w, &g, &[(t, e.clone(), var)]))?;
        let (e_ref, _) = equilibrium_stats(&model, &basis, &g)?;
        let d = l1_distance(&e, &e_ref, g.dv())?;
        report.note(format!("eps={eps}: L1 of E_z f to the Fokker-Planck equilibrium {d:.4}"));
        dists.push(d);
    }

    let model = cfg.wealth_model(cfg.run.eps[0])?;
    let sol = fp_run(cfg, &model, &basis, &fp_grid(cfg)?, &law, 0.1)?;
    let ftr = fp_trajectory(&sol, basis.weights());
    sink.csv("fp_observables.csv", |w| write_observables_csv(w, &ftr))?;

    if cfg.run.eps.len() > 1 {
        let ok = descending(&cfg.run.eps) && descending(&dists);
        report.check(
            "L1 decreases with eps",
            ok,
            format!("{dists:.4?} along eps = {:?}", cfg.run.eps),
        );
    }
    let last = *dists.last().expect("eps is nonempty");
    let lim = cfg.checks.l1_limit;
    report.check("L1 at the smallest eps", last <= lim, format!("{last:.4} (limit {lim})"));
    Ok(())
}

fn test3(cfg: &ExperimentConfig, sink: &Sink, report: &mut Report) -> Result<(), CliError> {
    let basis = cfg.basis(&cfg.run.order)?;
    let law = cfg.run.initial;
    let g = grid(cfg)?;
    let eps_min = cfg.run.eps.iter().copied().fold(f64::INFINITY, f64::min);
    let mut inadmissible = 0usize;
    let mut worst_mass: f64 = 0.0;
    for (r, &rho) in cfg.rhos()?.iter().enumerate() {
        let mut e_small = None;
        for (k, &eps) in cfg.run.eps.iter().enumerate() {
            let model = cfg.traffic_model(rho, eps)?;
            let seed = cfg.seed.wrapping_add((r * cfg.run.eps.len() + k) as u64);
            let out = simulate(cfg, &model, &basis, &law, cfg.run.n, eps, seed)?;
            note_stats(report, &format!("traffic rho={rho} eps={eps}"), &out);
            inadmissible += out.stats.inadmissible_values;
            sink.csv(&format!("observables_rho{rho}_eps{eps}.csv"), |w| {
                write_observables_csv(w, &out.trajectory)
            })?;
            let dens = reconstruct_ensemble(&out.ensemble, &basis, &g, cfg.grid.out_of_range)?;
            let (e, var) = stats_over_z(&dens.density, basis.weights())?;
            let t = cfg.run.t_final;
            sink.csv(&format!("density_rho{rho}_eps{eps}.csv"), |w| {
                write_density_stats_csv(w, &g, &[(t, e.clone(), var)])
            })?;
            if eps == eps_min {
                e_small = Some(e);
            }
        }

        let model = cfg.traffic_model(rho, eps_min)?;
        let sol = fp_run(cfg, &model, &basis, &g, &law, 1.0)?;
        for f in &sol.final_state.f {
            worst_mass = worst_mass.max((g.mass(f) - 1.0).abs());
        }
        let ftr = fp_trajectory(&sol, basis.weights());
        sink.csv(&format!("fp_observables_rho{rho}.csv"), |w| write_observables_csv(w, &ftr))?;
        let fin = std::slice::from_ref(&sol.final_state);
        sink.csv(&format!("fp_density_rho{rho}.csv"), |w| write_density_csv(w, &g, fin))?;
        let (e_fp, _) = stats_over_z(&sol.final_state.f, basis.weights())?;
        if let Some(e) = e_small {
            let d = l1_distance(&e, &e_fp, g.dv())?;
            report.note(format!("rho={rho}: L1 of E_z f between DSMC at eps={eps_min} and Fokker-Planck {d:.4}"));
        }
    }
    report.check(
        "node speeds stay in [0,1]",
        inadmissible == 0,
        format!("{inadmissible} inadmissible node values"),
    );
    report.check(
        "Fokker-Planck mass conserved",
        worst_mass <= 1e-10,
        format!("worst mass defect {worst_mass:.1e} (limit 1e-10)"),
    );
    Ok(())
}

fn spectral(cfg: &ExperimentConfig, sink: &Sink, report: &mut Report) -> Result<(), CliError> {
    let st = cfg.study()?;
    let eps = cfg.run.eps[0];
    let model = match st.model {
        StudyModel::Wealth => cfg.wealth_model(eps)?,
        StudyModel::Traffic => cfg.traffic_model(cfg.rhos()?[0], eps)?,
    };
    let basis = cfg.basis(&cfg.run.order[..model.param_dims()])?;
    let out = simulate(cfg, &model, &basis, &cfg.run.initial, cfg.run.n, eps, cfg.seed)?;
    note_stats(report, &format!("{} eps={eps}", model.name()), &out);
    let log = out
        .log
        .ok_or_else(|| CliError::Runtime("the run returned no event log".into()))?;
    let mut w = BufWriter::new(File::create(sink.path("events.log"))?);
    log.write(&mut w)?;
    w.flush()?;
    drop(w);

    let study = spectral_study(&log, &st.orders, st.reference_order, cfg.run.nodes, st.observe_every)?;
    sink.csv("spectral.csv", |w| write_spectral_csv(w, &study))?;
    let errs = &study.error_second;
    let first = errs[0];
    let last = *errs.last().expect("orders is nonempty");
    let decades = if last > 0.0 { first.log10() - last.log10() } else { f64::INFINITY };
    report.note(format!(
        "second-moment errors: {}",
        errs.iter().map(|e| format!("{e:.2e}")).collect::<Vec<_>>().join(", ")
    ));
    let need = cfg.checks.min_decades;
    report.check(
        "spectral error drop",
        decades >= need,
        format!("{decades:.2} decades from M={} to M={} (needs {need})", st.orders[0], st.orders[st.orders.len() - 1]),
    );
    Ok(())
}

fn mc_rate(cfg: &ExperimentConfig, sink: &Sink, report: &mut Report) -> Result<(), CliError> {
    let st = cfg.study()?;
    let eps = cfg.run.eps[0];
    let model = cfg.wealth_model(eps)?;
    let basis = cfg.basis(&cfg.run.order)?;
    let law = cfg.run.initial;
    let study = mc_error_study(&st.sizes, st.reps, cfg.seed, None, |n, seed| {
        let out = run(&model, &cfg.collision(eps, seed), &basis, &law, n, None, None)?;
        out.trajectory
            .expected_mean()
            .last()
            .copied()
            .ok_or_else(|| dsmcsg::Error::State("empty trajectory".into()))
    })?;
    sink.csv("mc.csv", |w| write_mc_csv(w, &study))?;
    let s = study.fit.slope;
    let tol = cfg.checks.slope_tol;
    report.check(
        "Monte Carlo rate",
        (s + 0.5).abs() <= tol,
        format!("slope {s:.3} +- {:.3} (target -0.5 +- {tol})", study.fit.slope_stderr),
    );
    Ok(())
}

fn bounds(cfg: &ExperimentConfig, sink: &Sink, report: &mut Report) -> Result<(), CliError> {
    let st = cfg.study()?;
    let eps = cfg.run.eps[0];
    let basis = cfg.basis(&cfg.run.order)?;
    let tol = 5.0 / (cfg.run.n as f64).sqrt();
    let mut k = 0u64;
    for &rho in cfg.rhos()? {
        for &mu in &st.mus {
            for &alpha in &st.alphas {
                let case = if alpha == 1.0 { BoundCase::Alpha1 } else { BoundCase::Alpha2 };
                let model = cfg.bound_model(rho, mu, alpha, eps)?;
                let v0 = 1.0 - rho;
                let h = v0.min(1.0 - v0);
                let law = InitialLaw::Uniform { a: v0 - h, b: v0 + h };
                let out = simulate(cfg, &model, &basis, &law, cfg.run.n, eps, cfg.seed.wrapping_add(k))?;
                k += 1;
                let params = cfg.traffic_params(rho)?;
                let probs: Vec<f64> = (0..basis.num_nodes())
                    .map(|q| {
                        let mut p = params.clone();
                        p.mu = dsmcsg::ParamFn::constant(mu);
                        p.alpha = dsmcsg::ParamFn::constant(alpha);
                        p.accel_probability(basis.node(q))
                    })
                    .collect();
                let b = TrafficBounds::new(case, &probs, v0)?;
                let tr = &out.trajectory;
                sink.csv(&format!("bounds_rho{rho}_mu{mu}_alpha{alpha}.csv"), |w| {
                    write_bounds_csv(w, &tr.times, &tr.mean, &b)
                })?;
                let r = bound_check(&tr.times, &tr.mean, &b, tol)?;
                let lim = cfg.checks.bound_fraction;
                report.check(
                    format!("envelope rho={rho} mu={mu} alpha={alpha}"),
                    r.fraction() <= lim,
                    format!(
                        "{} of {} samples outside (fraction {:.4}, limit {lim}, tol {tol:.3})",
                        r.violations,
                        r.samples,
                        r.fraction()
                    ),
                );
            }
        }
    }
    Ok(())
}
