//! Stochastic-Galerkin DSMC: Nanbu-Babovski collisions between particles
//! whose states are polynomial chaos expansions in `z`.
//!
//! A step draws every random choice up front into a [`StepRecord`] and then
//! applies it. Replays feed recorded steps through the same application code,
//! which is what makes a replay at the original order bit-identical and lets a
//! replay at another order follow exactly the same collision sequence.

mod eventlog;

pub use eventlog::{Event, EventLog, LogHeader, StepRecord, BACKGROUND_PARTNER};

use std::borrow::Cow;

use log::{debug, warn};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpc::{weighted_mean, GpcBasis, TensorGrid, TensorMap, Workspace};
use crate::models::{Interaction, ModelSpec, NodeParams};
use crate::rng;

/// Collision acceptance rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Acceptance {
    /// `χ(Σξ < B)`.
    Indicator,
    /// `½(1 + tanh(-β(Σξ - B)))`.
    Sigmoid { beta: f64 },
}

#[inline]
pub fn acceptance_factor(mode: Acceptance, sigma: f64, xi: f64, b: f64) -> f64 {
    match mode {
        Acceptance::Indicator => {
            if sigma * xi < b {
                1.0
            } else {
                0.0
            }
        }
        Acceptance::Sigmoid { beta } => 0.5 * (1.0 + (-beta * (sigma * xi - b)).tanh()),
    }
}

/// What to do when the kernel bound makes `Σ·Δt` exceed one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaPolicy {
    /// Abort with [`Error::StepSize`].
    Strict,
    /// Use `Σ = 1/Δt`, i.e. simulate the truncated kernel `min{B, Σ}`.
    Truncate,
}

/// What to do when a node-evaluated state leaves the state space.
///
/// Polynomial truncation of a collision increment that varies sharply in `z`
/// (the indicator acceptance in particular) can push node values slightly
/// outside the state space even though every pointwise update is admissible.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Admissibility {
    /// Fail the run; roundoff within [`NEGATIVE_TOLERANCE`] is clamped.
    #[default]
    Strict,
    /// Count violations in [`RunStats`] and keep the expansions unchanged.
    Tally,
}

/// Moment rescaling map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RescaleMode {
    /// `(v - V_K)·√((E_FP - V_FP²)/(E_K - V_K²)) + V_FP`: matches mean and energy.
    VarianceMatching,
    /// `(v - V_K)·√(E_FP/E_K) + V_FP`.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollisionConfig {
    /// Time step in scaled time.
    pub dt: f64,
    pub t_final: f64,
    pub acceptance: Acceptance,
    pub seed: u64,
    pub sigma_policy: SigmaPolicy,
    #[serde(default)]
    pub admissibility: Admissibility,
    pub rescale: Option<RescaleMode>,
}

impl CollisionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::config(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.t_final >= 0.0 && self.t_final.is_finite()) {
            return Err(Error::config(format!("final time must be nonnegative, got {}", self.t_final)));
        }
        if let Acceptance::Sigmoid { beta } = self.acceptance {
            if !(beta > 0.0 && beta.is_finite()) {
                return Err(Error::config(format!("sigmoid beta must be positive, got {beta}")));
            }
        }
        self.steps()?;
        Ok(())
    }

    /// `n_TOT = T/Δt`, which must be an integer up to rounding.
    pub fn steps(&self) -> Result<usize> {
        let n = self.t_final / self.dt;
        let r = n.round();
        if (n - r).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::config(format!(
                "final time {} is not a multiple of dt {}",
                self.t_final, self.dt
            )));
        }
        Ok(r as usize)
    }
}

/// Deterministic initial law sampled identically for every `z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum InitialLaw {
    Uniform { a: f64, b: f64 },
    Point { v: f64 },
}

impl InitialLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            InitialLaw::Uniform { a, b } => rng.random_range(a..b),
            InitialLaw::Point { v } => v,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            InitialLaw::Uniform { a, b } => 0.5 * (a + b),
            InitialLaw::Point { v } => v,
        }
    }
}

/// `N` particles, each a row of `K` gPC coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEnsemble {
    n: usize,
    k: usize,
    coeffs: Vec<f64>,
    pub t: f64,
}

impl ParticleEnsemble {
    /// Constant-in-`z` expansions of the given scalar states.
    pub fn from_states(states: &[f64], basis: &GpcBasis) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::config("ensemble needs at least one particle"));
        }
        let k = basis.len();
        let mut coeffs = vec![0.0; states.len() * k];
        for (row, &v) in coeffs.chunks_mut(k).zip(states) {
            if !v.is_finite() {
                return Err(Error::config(format!("non-finite initial state {v}")));
            }
            row[0] = v;
        }
        Ok(ParticleEnsemble {
            n: states.len(),
            k,
            coeffs,
            t: 0.0,
        })
    }

    pub fn from_coeffs(coeffs: Vec<f64>, k: usize) -> Result<Self> {
        if k == 0 || coeffs.is_empty() || !coeffs.len().is_multiple_of(k) {
            return Err(Error::shape("ensemble coefficients", k, coeffs.len()));
        }
        Ok(ParticleEnsemble {
            n: coeffs.len() / k,
            k,
            coeffs,
            t: 0.0,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn basis_len(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.coeffs[i * self.k..(i + 1) * self.k]
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Values of every particle at every point of `map`'s output grid, row-major `N × Q`.
    pub fn values_with(&self, map: &TensorMap, out: &mut Vec<f64>) {
        let q = map.output_len();
        out.resize(self.n * q, 0.0);
        out.par_chunks_mut(q)
            .zip(self.coeffs.par_chunks(self.k))
            .for_each_init(Workspace::default, |ws, (o, c)| map.apply(c, o, ws));
    }

    /// Values at the basis quadrature nodes, row-major `N × Q`.
    pub fn node_values(&self, basis: &GpcBasis) -> Vec<f64> {
        let q = basis.num_nodes();
        let mut out = vec![0.0; self.n * q];
        out.par_chunks_mut(q)
            .zip(self.coeffs.par_chunks(self.k))
            .for_each_init(Workspace::default, |ws, (o, c)| basis.evaluate_at_nodes(c, o, ws));
        out
    }
}

/// Samples `N` i.i.d. states from `law` and expands them as constants in `z`.
pub fn init_ensemble(law: &InitialLaw, n: usize, basis: &GpcBasis, seed: u64) -> Result<ParticleEnsemble> {
    if n == 0 {
        return Err(Error::config("particle count must be positive"));
    }
    ParticleEnsemble::from_states(&initial_states(law, n, seed), basis)
}

pub fn initial_states(law: &InitialLaw, n: usize, seed: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, rng::INIT_STREAM);
    (0..n).map(|_| law.sample(&mut r)).collect()
}

/// Stochastic rounding: `⌊x⌋ + 1` with probability `x - ⌊x⌋`, else `⌊x⌋`.
pub fn sround<R: Rng + ?Sized>(x: f64, rng: &mut R) -> Result<usize> {
    if !(x >= 0.0 && x.is_finite()) {
        return Err(Error::Domain(format!("stochastic rounding needs a finite x >= 0, got {x}")));
    }
    let fl = x.floor();
    let frac = x - fl;
    let u: f64 = rng.random();
    Ok(fl as usize + usize::from(u < frac))
}

/// Projected increments `(V̂, Ŵ)` of one interaction.
///
/// `v_nodes` and `w_nodes` hold the pre-collision states at the quadrature
/// nodes; for background models `w_nodes` is ignored and the partner is the
/// scalar `draw.extra`.
#[allow(clippy::too_many_arguments)]
pub fn collision_matrices(
    v_nodes: &[f64],
    w_nodes: &[f64],
    draw: &crate::models::PairDraw,
    sigma: f64,
    mode: Acceptance,
    model: &ModelSpec,
    nodes: &[NodeParams],
    basis: &GpcBasis,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let q = basis.num_nodes();
    if v_nodes.len() != q {
        return Err(Error::shape("collision v node values", q, v_nodes.len()));
    }
    let mut scratch = PairScratch::new(basis);
    let mut out = vec![0.0; 2 * basis.len()];
    let partner = match model.interaction() {
        Interaction::Binary => {
            if w_nodes.len() != q {
                return Err(Error::shape("collision w node values", q, w_nodes.len()));
            }
            Partner::Nodes(w_nodes)
        }
        Interaction::Background => Partner::Scalar(draw.extra),
    };
    pair_increment(v_nodes, partner, draw, sigma, mode, model, nodes, basis, &mut scratch, &mut out);
    check_finite(&out, "collision matrices")?;
    let k = basis.len();
    let w = out.split_off(k);
    Ok((out, w))
}

#[derive(Clone, Copy)]
enum Partner<'a> {
    Nodes(&'a [f64]),
    Scalar(f64),
}

struct PairScratch {
    dv: Vec<f64>,
    dw: Vec<f64>,
    ws: Workspace,
}

impl PairScratch {
    fn new(basis: &GpcBasis) -> Self {
        PairScratch {
            dv: vec![0.0; basis.num_nodes()],
            dw: vec![0.0; basis.num_nodes()],
            ws: Workspace::default(),
        }
    }
}

#[allow(clippy::too_many_arguments)]
#[inline]
fn pair_increment(
    v_nodes: &[f64],
    partner: Partner<'_>,
    draw: &crate::models::PairDraw,
    sigma: f64,
    mode: Acceptance,
    model: &ModelSpec,
    nodes: &[NodeParams],
    basis: &GpcBasis,
    s: &mut PairScratch,
    out: &mut [f64],
) {
    let k = basis.len();
    for (q, np) in nodes.iter().enumerate() {
        let v = v_nodes[q];
        let w = match partner {
            Partner::Nodes(w) => w[q],
            Partner::Scalar(w) => w,
        };
        let b = model.kernel(v, w, np);
        let a = acceptance_factor(mode, sigma, draw.xi, b);
        if a == 0.0 {
            s.dv[q] = 0.0;
            s.dw[q] = 0.0;
            continue;
        }
        let (dv, dw) = model.increments(v, w, np, draw);
        s.dv[q] = a * dv;
        s.dw[q] = a * dw;
    }
    let (vo, wo) = out.split_at_mut(k);
    basis.project_into(&s.dv, vo, &mut s.ws);
    if model.updates_partner() {
        basis.project_into(&s.dw, wo, &mut s.ws);
    } else {
        wo.fill(0.0);
    }
}

fn check_finite(xs: &[f64], context: &str) -> Result<()> {
    if let Some(x) = xs.iter().find(|x| !x.is_finite()) {
        return Err(Error::numerical(context, format!("non-finite value {x}")));
    }
    Ok(())
}

/// Per-node mean and second moment of the ensemble.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeMoments {
    pub mean: Vec<f64>,
    pub second: Vec<f64>,
}

pub fn node_moments(values: &[f64], q: usize) -> NodeMoments {
    let n = values.len() / q;
    let mut mean = vec![0.0; q];
    let mut second = vec![0.0; q];
    for row in values.chunks(q) {
        for ((m, s), &v) in mean.iter_mut().zip(second.iter_mut()).zip(row) {
            *m += v;
            *s += v * v;
        }
    }
    let inv = 1.0 / n as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    second.iter_mut().for_each(|s| *s *= inv);
    NodeMoments { mean, second }
}

/// Maps node values affinely so that per-node mean and energy hit the targets,
/// then re-projects to coefficients.
///
/// Returns `false` (ensemble untouched) if some node has a degenerate
/// ensemble variance.
pub fn rescale_moments(
    ensemble: &mut ParticleEnsemble,
    v_fp: &[f64],
    e_fp: &[f64],
    basis: &GpcBasis,
    mode: RescaleMode,
) -> Result<bool> {
    let q = basis.num_nodes();
    if v_fp.len() != q || e_fp.len() != q {
        return Err(Error::shape("rescale targets", q, v_fp.len().min(e_fp.len())));
    }
    let mut values = ensemble.node_values(basis);
    let m = node_moments(&values, q);
    let mut scale = vec![0.0; q];
    for j in 0..q {
        let var_k = m.second[j] - m.mean[j] * m.mean[j];
        if !(var_k > 1e-14 * m.second[j].max(1e-300)) {
            warn!("rescale skipped: degenerate ensemble variance {var_k} at node {j}");
            return Ok(false);
        }
        scale[j] = match mode {
            RescaleMode::VarianceMatching => {
                let var_fp = (e_fp[j] - v_fp[j] * v_fp[j]).max(0.0);
                (var_fp / var_k).sqrt()
            }
            RescaleMode::Literal => (e_fp[j] / m.second[j]).sqrt(),
        };
    }
    let k = basis.len();
    values
        .par_chunks_mut(q)
        .zip(ensemble.coeffs.par_chunks_mut(k))
        .for_each_init(Workspace::default, |ws, (vals, c)| {
            for j in 0..q {
                vals[j] = (vals[j] - m.mean[j]) * scale[j] + v_fp[j];
            }
            basis.project_into(vals, c, ws);
        });
    check_finite(&ensemble.coeffs, "rescale")?;
    Ok(true)
}

/// Source of per-node `(V_FP, E_FP)` targets for rescaling.
pub trait MomentTarget {
    /// Advances to scaled time `t` and returns the targets at the basis nodes.
    fn moments_at(&mut self, t: f64) -> Result<NodeMoments>;
}

/// Per-node moments of a run sampled at the recorded times.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// `mean[n][q]`: ensemble mean at time `n`, observation point `q`.
    pub mean: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    /// Weights of the observation points (sum to one).
    pub weights: Vec<f64>,
}

impl Trajectory {
    fn new(weights: Vec<f64>) -> Self {
        Trajectory {
            times: Vec::new(),
            mean: Vec::new(),
            second: Vec::new(),
            weights,
        }
    }

    fn push(&mut self, t: f64, m: NodeMoments) {
        self.times.push(t);
        self.mean.push(m.mean);
        self.second.push(m.second);
    }

    /// `E_z` of the mean at each recorded time.
    pub fn expected_mean(&self) -> Vec<f64> {
        self.mean.iter().map(|m| weighted_mean(&self.weights, m)).collect()
    }
}

/// Counters collected while running.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub steps: usize,
    pub collisions: usize,
    pub truncated_steps: usize,
    pub rescaled_steps: usize,
    pub skipped_rescales: usize,
    /// Node values clamped from `(-tol, 0)` to zero on readout.
    pub clamped_values: usize,
    /// Node values outside the state space beyond the tolerance (tally mode).
    pub inadmissible_values: usize,
    /// Largest distance outside the state space seen.
    pub worst_violation: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub trajectory: Trajectory,
    pub ensemble: ParticleEnsemble,
    /// The recorded collision sequence; `None` for replays.
    pub log: Option<EventLog>,
    pub stats: RunStats,
}

/// Tolerance below the lower state bound that is clamped rather than rejected.
pub const NEGATIVE_TOLERANCE: f64 = 1e-12;

/// Extra observation grid for a run; the basis quadrature is always used for
/// rescaling and the kernel bound.
pub struct Observer<'a> {
    pub grid: &'a TensorGrid,
    /// Record every this many steps (the last step is always recorded).
    pub every: usize,
}

struct Stepper<'a> {
    model: &'a ModelSpec,
    basis: &'a GpcBasis,
    nodes: Vec<NodeParams>,
    acceptance: Acceptance,
    admissibility: Admissibility,
    dt_eff: f64,
    values: Vec<f64>,
    obs_map: Option<TensorMap>,
    obs_weights: Vec<f64>,
    obs_values: Vec<f64>,
    obs_every: usize,
    increments: Vec<f64>,
}

impl<'a> Stepper<'a> {
    fn new(
        model: &'a ModelSpec,
        basis: &'a GpcBasis,
        acceptance: Acceptance,
        admissibility: Admissibility,
        dt: f64,
        observer: Option<Observer<'_>>,
    ) -> Result<Self> {
        let nodes = model.nodes(basis)?;
        let (obs_map, obs_weights, obs_every) = match observer {
            Some(o) => (Some(basis.evaluator(o.grid)?), o.grid.weights().to_vec(), o.every.max(1)),
            None => (None, basis.weights().to_vec(), 1),
        };
        Ok(Stepper {
            model,
            basis,
            nodes,
            acceptance,
            admissibility,
            dt_eff: dt / model.eps,
            values: Vec::new(),
            obs_map,
            obs_weights,
            obs_values: Vec::new(),
            obs_every,
            increments: Vec::new(),
        })
    }

    fn refresh(&mut self, ens: &ParticleEnsemble, stats: &mut RunStats) -> Result<()> {
        self.values = ens.node_values(self.basis);
        check_admissible(self.model, self.admissibility, &mut self.values, stats)
    }

    fn observe(&mut self, ens: &ParticleEnsemble) -> Result<NodeMoments> {
        match &self.obs_map {
            None => Ok(node_moments(&self.values, self.basis.num_nodes())),
            Some(map) => {
                // Off-node readouts of a truncated expansion may overshoot the
                // state space between collocation points; they are not states.
                ens.values_with(map, &mut self.obs_values);
                check_finite(&self.obs_values, "observation readout")?;
                Ok(node_moments(&self.obs_values, map.output_len()))
            }
        }
    }

    /// Draws every random choice of step `step` from the counter-based streams.
    fn draw(&self, step: usize, n: usize, seed: u64, policy: SigmaPolicy) -> Result<StepRecord> {
        let v_max = self.values.iter().copied().fold(0.0, f64::max);
        let sigma_raw = self.model.kernel_upper_bound(v_max, &self.nodes)?;
        let cap = 1.0 / self.dt_eff;
        let (sigma, truncated) = if sigma_raw > cap {
            match policy {
                SigmaPolicy::Strict => {
                    return Err(Error::StepSize {
                        step,
                        sigma: sigma_raw,
                        dt_eff: self.dt_eff,
                    })
                }
                SigmaPolicy::Truncate => (cap, true),
            }
        } else {
            (sigma_raw, false)
        };
        let mut srng = rng::step_stream(seed, step);
        let background = self.model.interaction() == Interaction::Background;
        let (target, max_events) = if background {
            (sigma * self.dt_eff * n as f64, n)
        } else {
            (sigma * self.dt_eff * n as f64 / 2.0, n / 2)
        };
        let nc = sround(target, &mut srng)?.min(max_events);
        let per_event = if background { 1 } else { 2 };
        let picks = index::sample(&mut srng, n, nc * per_event).into_vec();
        let events = (0..nc)
            .map(|slot| {
                let mut prng = rng::pair_stream(seed, step, slot);
                let draw = self.model.sample_pair(&mut prng);
                let (i, j) = if background {
                    (picks[slot] as u32, BACKGROUND_PARTNER)
                } else {
                    (picks[2 * slot] as u32, picks[2 * slot + 1] as u32)
                };
                Event { i, j, draw }
            })
            .collect();
        Ok(StepRecord {
            sigma,
            truncated,
            events,
        })
    }

    /// Applies a step record; node values must describe the pre-step ensemble.
    fn apply(&mut self, ens: &mut ParticleEnsemble, rec: &StepRecord, step: usize) -> Result<()> {
        let k = self.basis.len();
        let q = self.basis.num_nodes();
        let n = ens.len();
        let background = self.model.interaction() == Interaction::Background;
        for e in &rec.events {
            let bad_j = !background && (e.j as usize >= n || e.j == e.i);
            if e.i as usize >= n || bad_j {
                return Err(Error::Replay(format!(
                    "step {step}: event ({}, {}) does not fit an ensemble of {n}",
                    e.i, e.j
                )));
            }
        }
        self.increments.resize(rec.events.len() * 2 * k, 0.0);
        let values = &self.values;
        let (model, basis, nodes, mode, sigma) = (self.model, self.basis, &self.nodes, self.acceptance, rec.sigma);
        self.increments
            .par_chunks_mut(2 * k)
            .zip(rec.events.par_iter())
            .for_each_init(
                || PairScratch::new(basis),
                |s, (out, e)| {
                    let i = e.i as usize;
                    let vi = &values[i * q..(i + 1) * q];
                    let partner = if background {
                        Partner::Scalar(e.draw.extra)
                    } else {
                        let j = e.j as usize;
                        Partner::Nodes(&values[j * q..(j + 1) * q])
                    };
                    pair_increment(vi, partner, &e.draw, sigma, mode, model, nodes, basis, s, out);
                },
            );
        check_finite(&self.increments, &format!("collision step {step}"))?;
        let update_partner = model.updates_partner();
        for (e, inc) in rec.events.iter().zip(self.increments.chunks(2 * k)) {
            let i = e.i as usize;
            for (c, d) in ens.coeffs[i * k..(i + 1) * k].iter_mut().zip(&inc[..k]) {
                *c += d;
            }
            if update_partner {
                let j = e.j as usize;
                for (c, d) in ens.coeffs[j * k..(j + 1) * k].iter_mut().zip(&inc[k..]) {
                    *c += d;
                }
            }
        }
        Ok(())
    }
}

/// Checks node values against the state space and clamps roundoff.
fn check_admissible(
    model: &ModelSpec,
    policy: Admissibility,
    values: &mut [f64],
    stats: &mut RunStats,
) -> Result<()> {
    let (lo, hi) = model.domain();
    for v in values.iter_mut() {
        if !v.is_finite() {
            return Err(Error::numerical("node readout", format!("non-finite state {v}")));
        }
        let excess = (lo - *v).max(*v - hi);
        if excess <= 0.0 {
            continue;
        }
        if excess <= NEGATIVE_TOLERANCE && policy == Admissibility::Strict {
            *v = v.clamp(lo, hi);
            stats.clamped_values += 1;
            continue;
        }
        match policy {
            Admissibility::Strict => {
                return Err(Error::State(format!(
                    "{} state {v} outside the state space [{lo}, {hi}]",
                    model.name()
                )))
            }
            Admissibility::Tally => {
                stats.inadmissible_values += 1;
                stats.worst_violation = stats.worst_violation.max(excess);
            }
        }
    }
    Ok(())
}

/// One collision step driven by the counter-based streams of `config.seed`.
///
/// Returns the record of everything that was drawn. Rescaling is not applied
/// here; see [`rescale_moments`].
pub fn collision_step(
    ensemble: &mut ParticleEnsemble,
    model: &ModelSpec,
    basis: &GpcBasis,
    config: &CollisionConfig,
    step: usize,
) -> Result<StepRecord> {
    config.validate()?;
    check_basis(ensemble, basis)?;
    let mut stats = RunStats::default();
    let mut st = Stepper::new(model, basis, config.acceptance, config.admissibility, config.dt, None)?;
    st.refresh(ensemble, &mut stats)?;
    let rec = st.draw(step, ensemble.len(), config.seed, config.sigma_policy)?;
    st.apply(ensemble, &rec, step)?;
    ensemble.t += config.dt;
    Ok(rec)
}

fn check_basis(ens: &ParticleEnsemble, basis: &GpcBasis) -> Result<()> {
    if ens.basis_len() != basis.len() {
        return Err(Error::shape("ensemble basis length", basis.len(), ens.basis_len()));
    }
    Ok(())
}

/// Runs `n_TOT = T/Δt` steps from `N` particles sampled from `law`.
#[allow(clippy::too_many_arguments)]
pub fn run(
    model: &ModelSpec,
    config: &CollisionConfig,
    basis: &GpcBasis,
    law: &InitialLaw,
    n: usize,
    target: Option<&mut dyn MomentTarget>,
    observer: Option<Observer<'_>>,
) -> Result<RunOutput> {
    config.validate()?;
    if config.rescale.is_some() != target.is_some() {
        return Err(Error::config(
            "a moment target (Fokker-Planck solver) is required exactly when rescaling is on",
        ));
    }
    if n == 0 {
        return Err(Error::config("particle count must be positive"));
    }
    let states = initial_states(law, n, config.seed);
    let header = LogHeader {
        seed: config.seed,
        model: model.clone(),
        n_particles: n,
        dt: config.dt,
        n_steps: config.steps()?,
        acceptance: config.acceptance,
        sigma_policy: config.sigma_policy,
        admissibility: config.admissibility,
        param_spec: basis.spec().clone(),
        orders: basis.orders().to_vec(),
        nq: basis.nodes_per_dim(),
        initial: states,
    };
    drive(header, None, basis, config.rescale, target, observer)
}

/// Re-runs a recorded collision sequence with another basis of the same
/// parameter law.
pub fn replay(
    log: &EventLog,
    basis: &GpcBasis,
    rescale: Option<RescaleMode>,
    target: Option<&mut dyn MomentTarget>,
    observer: Option<Observer<'_>>,
) -> Result<RunOutput> {
    if basis.spec() != &log.header.param_spec {
        return Err(Error::Replay("basis parameter law differs from the recorded run".into()));
    }
    if log.steps.len() != log.header.n_steps {
        return Err(Error::Replay(format!(
            "log is incomplete: {} of {} steps recorded",
            log.steps.len(),
            log.header.n_steps
        )));
    }
    if rescale.is_some() != target.is_some() {
        return Err(Error::config("a moment target is required exactly when rescaling is on"));
    }
    drive(log.header.clone(), Some(&log.steps), basis, rescale, target, observer)
}

fn drive(
    header: LogHeader,
    recorded: Option<&[StepRecord]>,
    basis: &GpcBasis,
    rescale: Option<RescaleMode>,
    mut target: Option<&mut dyn MomentTarget>,
    observer: Option<Observer<'_>>,
) -> Result<RunOutput> {
    let model = header.model.clone();
    let mut ens = ParticleEnsemble::from_states(&header.initial, basis)?;
    let mut stats = RunStats::default();
    let mut st = Stepper::new(&model, basis, header.acceptance, header.admissibility, header.dt, observer)?;
    let mut traj = Trajectory::new(st.obs_weights.clone());
    st.refresh(&ens, &mut stats)?;
    traj.push(0.0, st.observe(&ens)?);
    let mut steps = Vec::with_capacity(if recorded.is_none() { header.n_steps } else { 0 });
    for step in 0..header.n_steps {
        let rec = match recorded {
            Some(r) => Cow::Borrowed(&r[step]),
            None => Cow::Owned(st.draw(step, ens.len(), header.seed, header.sigma_policy)?),
        };
        st.apply(&mut ens, &rec, step)?;
        stats.steps += 1;
        stats.collisions += rec.events.len();
        stats.truncated_steps += usize::from(rec.truncated);
        ens.t = (step + 1) as f64 * header.dt;
        if let (Some(mode), Some(tg)) = (rescale, target.as_deref_mut()) {
            let m = tg.moments_at(ens.t)?;
            if rescale_moments(&mut ens, &m.mean, &m.second, basis, mode)? {
                stats.rescaled_steps += 1;
            } else {
                stats.skipped_rescales += 1;
            }
        }
        st.refresh(&ens, &mut stats)?;
        if (step + 1) % st.obs_every == 0 || step + 1 == header.n_steps {
            traj.push(ens.t, st.observe(&ens)?);
        }
        if recorded.is_none() {
            steps.push(rec.into_owned());
        }
    }
    if stats.inadmissible_values > 0 {
        warn!(
            "{} node values left the state space (worst by {:e})",
            stats.inadmissible_values, stats.worst_violation
        );
    }
    if stats.truncated_steps > 0 {
        debug!(
            "kernel bound truncated to 1/dt in {} of {} steps",
            stats.truncated_steps, stats.steps
        );
    }
    let log = recorded.is_none().then_some(EventLog { header, steps });
    Ok(RunOutput {
        trajectory: traj,
        ensemble: ens,
        log,
        stats,
    })
}
