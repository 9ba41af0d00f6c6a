//! Deterministic Fokker-Planck solver for the quasi-invariant limit.
//!
//! The equation is written in flux form,
//! `∂_τ f = ∂_v [ B̃[f] f + 𝒟[f] ∂_v f ]` with `B̃ = a + ∂_v d` and `𝒟 = d`,
//! and solved independently at every collocation node with a Chang-Cooper
//! discretisation. Each step is linear in the new density with coefficients
//! frozen at the old one, so the update matrix is an M-matrix: positivity and
//! mass follow from the structure, not from step-size limits.

mod equilibrium;

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsmc::{InitialLaw, MomentTarget, NodeMoments};
use crate::error::{Error, Result};
use crate::gpc::{weighted_mean, GpcBasis};
use crate::models::{background_moment, Interaction, ModelKind, ModelSpec, NodeParams};

pub use equilibrium::{equilibrium_gambling, equilibrium_wealth, Equilibrium};

/// Uniform velocity grid. Nodes sit at `v_i = v_min + iΔv`; node `i` owns the
/// cell `[v_i − Δv/2, v_i + Δv/2]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VGrid {
    v_min: f64,
    v_max: f64,
    n: usize,
}

impl VGrid {
    pub fn new(v_min: f64, v_max: f64, n: usize) -> Result<Self> {
        if n < 8 {
            return Err(Error::config(format!("velocity grid needs at least 8 points, got {n}")));
        }
        if !(v_min.is_finite() && v_max.is_finite() && v_max > v_min) {
            return Err(Error::config(format!("invalid velocity domain [{v_min}, {v_max}]")));
        }
        Ok(VGrid { v_min, v_max, n })
    }

    /// Grid on `[v_min, v_max]` with spacing as close to `dv` as divides the interval.
    pub fn with_spacing(v_min: f64, v_max: f64, dv: f64) -> Result<Self> {
        if !(dv > 0.0) {
            return Err(Error::config(format!("grid spacing must be positive, got {dv}")));
        }
        let cells = ((v_max - v_min) / dv).round() as usize;
        Self::new(v_min, v_max, cells + 1)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn v_min(&self) -> f64 {
        self.v_min
    }

    pub fn v_max(&self) -> f64 {
        self.v_max
    }

    pub fn dv(&self) -> f64 {
        (self.v_max - self.v_min) / (self.n - 1) as f64
    }

    #[inline]
    pub fn point(&self, i: usize) -> f64 {
        self.v_min + i as f64 * self.dv()
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.point(i)).collect()
    }

    /// Position of the face between nodes `i` and `i + 1`.
    #[inline]
    pub fn face(&self, i: usize) -> f64 {
        self.point(i) + 0.5 * self.dv()
    }

    /// `Δv Σ f_i`.
    pub fn mass(&self, f: &[f64]) -> f64 {
        self.dv() * f.iter().sum::<f64>()
    }

    /// `Δv Σ v_i^k f_i`.
    pub fn moment(&self, f: &[f64], k: i32) -> f64 {
        self.dv() * f.iter().enumerate().map(|(i, x)| self.point(i).powi(k) * x).sum::<f64>()
    }

    /// Cell averages of a law given by its CDF.
    pub fn cell_average(&self, cdf: impl Fn(f64) -> f64) -> Vec<f64> {
        let h = self.dv();
        (0..self.n)
            .map(|i| {
                let c = self.point(i);
                (cdf(c + 0.5 * h) - cdf(c - 0.5 * h)) / h
            })
            .collect()
    }
}

/// Densities at every collocation node at one time.
#[derive(Clone, Debug, PartialEq)]
pub struct FpState {
    pub t: f64,
    /// `f[q][i]`: density at node `q`, grid point `i`.
    pub f: Vec<Vec<f64>>,
}

impl FpState {
    /// Cell-averaged initial law, identical at all `nodes`.
    pub fn from_law(law: &InitialLaw, grid: &VGrid, nodes: usize) -> Result<Self> {
        let f = match *law {
            InitialLaw::Uniform { a, b } => {
                if !(b > a) {
                    return Err(Error::config(format!("uniform law needs a < b, got [{a}, {b}]")));
                }
                grid.cell_average(|x| ((x - a) / (b - a)).clamp(0.0, 1.0))
            }
            InitialLaw::Point { v } => {
                let h = grid.dv();
                let i = ((v - grid.v_min()) / h).round();
                if i < 0.0 || i >= grid.len() as f64 {
                    return Err(Error::config(format!("point mass at {v} lies outside the grid")));
                }
                let mut f = vec![0.0; grid.len()];
                f[i as usize] = 1.0 / h;
                f
            }
        };
        let m = grid.mass(&f);
        if (m - 1.0).abs() > 1e-3 {
            warn!("initial law has mass {m} on the grid; renormalising");
        }
        let f: Vec<f64> = f.iter().map(|x| x / m).collect();
        Ok(FpState {
            t: 0.0,
            f: vec![f; nodes],
        })
    }

    pub fn nodes(&self) -> usize {
        self.f.len()
    }

    pub fn moments(&self, grid: &VGrid) -> NodeMoments {
        NodeMoments {
            mean: self.f.iter().map(|f| grid.moment(f, 1)).collect(),
            second: self.f.iter().map(|f| grid.moment(f, 2)).collect(),
        }
    }
}

/// How the nonlocal coefficients are treated within a step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CoefficientUpdate {
    /// Coefficients from the density at the start of the step.
    #[default]
    Frozen,
    /// Fixed-point iteration on the coefficients until the step converges.
    Picard { tol: f64, max_iter: usize },
}

/// Drift and diffusion on the faces of the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceCoefficients {
    /// `B̃` at face `i + 1/2`.
    pub drift: Vec<f64>,
    /// `𝒟` at face `i + 1/2`.
    pub diffusion: Vec<f64>,
}

/// `a` and `d` at nodes and faces for one collocation node.
#[derive(Clone, Debug, Default)]
struct Coefficients {
    a_node: Vec<f64>,
    a_face: Vec<f64>,
    d_node: Vec<f64>,
    d_face: Vec<f64>,
}

/// Row-major `rows x cols` matrix.
#[derive(Clone, Debug)]
struct Dense {
    cols: usize,
    data: Vec<f64>,
}

impl Dense {
    fn build(rows: &[f64], cols: &[f64], entry: impl Fn(f64, f64) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols.len());
        for &v in rows {
            data.extend(cols.iter().map(|&w| entry(v, w)));
        }
        Dense {
            cols: cols.len(),
            data,
        }
    }

    fn apply(&self, x: &[f64], scale: f64, out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.data
                .chunks_exact(self.cols)
                .map(|row| scale * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()),
        );
    }
}

/// Coefficient assembly for one collocation node.
#[derive(Clone, Debug)]
enum NodeOperator {
    /// Binary interactions: `a` and `d` are linear in `f` through kernel matrices.
    Nonlocal {
        a_node: Dense,
        a_face: Dense,
        diffusion: Option<(Dense, Dense)>,
    },
    /// Background interactions: coefficients do not depend on `f`.
    Local(Coefficients),
}

impl NodeOperator {
    fn new(model: &ModelSpec, np: &NodeParams, grid: &VGrid) -> Self {
        let nodes = grid.points();
        let faces: Vec<f64> = (0..grid.len() - 1).map(|i| grid.face(i)).collect();
        match model.interaction() {
            Interaction::Binary => {
                // The interaction terms are affine in the model's extra variable,
                // so its mean (1/2) gives the expectation exactly.
                let drift = |v: f64, w: f64| {
                    0.5 * model.kernel(v, w, np) * (model.i1(v, w, np, 0.5) + model.i2(w, v, np, 0.5))
                };
                let s2 = model.sigma2();
                let diff = |v: f64, w: f64| {
                    let d1 = model.d1(v);
                    let d2 = model.d2(v);
                    0.25 * s2 * (d1 * d1 + d2 * d2) * model.kernel(v, w, np)
                };
                NodeOperator::Nonlocal {
                    a_node: Dense::build(&nodes, &nodes, drift),
                    a_face: Dense::build(&faces, &nodes, drift),
                    diffusion: (s2 > 0.0)
                        .then(|| (Dense::build(&nodes, &nodes, diff), Dense::build(&faces, &nodes, diff))),
                }
            }
            Interaction::Background => {
                let ModelKind::Wealth(p) = &model.kind else {
                    unreachable!("background interaction is specific to the wealth model")
                };
                let delta = np.exponent;
                let m0 = background_moment(p, delta);
                let m1 = background_moment(p, 1.0 + delta);
                let a = |v: f64| p.kappa * p.lambda * v.powf(delta) * (v * m0 - m1);
                let d = |v: f64| 0.5 * p.sigma2 * p.kappa * m0 * v.powf(2.0 + delta);
                NodeOperator::Local(Coefficients {
                    a_node: nodes.iter().map(|&v| a(v)).collect(),
                    a_face: faces.iter().map(|&v| a(v)).collect(),
                    d_node: nodes.iter().map(|&v| d(v)).collect(),
                    d_face: faces.iter().map(|&v| d(v)).collect(),
                })
            }
        }
    }

    fn assemble(&self, f: &[f64], dv: f64, out: &mut Coefficients) {
        match self {
            NodeOperator::Local(c) => out.clone_from(c),
            NodeOperator::Nonlocal {
                a_node,
                a_face,
                diffusion,
            } => {
                a_node.apply(f, dv, &mut out.a_node);
                a_face.apply(f, dv, &mut out.a_face);
                match diffusion {
                    Some((dn, df)) => {
                        dn.apply(f, dv, &mut out.d_node);
                        df.apply(f, dv, &mut out.d_face);
                        for d in out.d_face.iter_mut().chain(out.d_node.iter_mut()) {
                            if *d < 0.0 {
                                warn!("negative diffusion {d:e} from roundoff; clamped");
                                *d = 0.0;
                            }
                        }
                    }
                    None => {
                        out.d_node.clear();
                        out.d_node.resize(f.len(), 0.0);
                        out.d_face.clear();
                        out.d_face.resize(f.len() - 1, 0.0);
                    }
                }
            }
        }
    }
}

/// `x / (e^x − 1)`, continuous at 0.
#[inline]
pub fn bernoulli(x: f64) -> f64 {
    if x.abs() < 1e-10 {
        1.0 - 0.5 * x
    } else {
        x / x.exp_m1()
    }
}

/// Chang-Cooper weight `δ(λ) = 1/λ − 1/(e^λ − 1)`.
pub fn chang_cooper_delta(lambda: f64) -> f64 {
    if lambda.abs() < 1e-6 {
        0.5 - lambda / 12.0
    } else {
        1.0 / lambda - 1.0 / lambda.exp_m1()
    }
}

/// Face fluxes `F_{i+1/2} = p_i f_{i+1} − q_i f_i` with `p_i, q_i ≥ 0`.
fn flux_weights(c: &Coefficients, dv: f64, p: &mut Vec<f64>, q: &mut Vec<f64>) {
    p.clear();
    q.clear();
    for i in 0..c.a_face.len() {
        let d = c.d_face[i];
        let b = c.a_face[i] + (c.d_node[i + 1] - c.d_node[i]) / dv;
        if d > 0.0 {
            let lambda = dv * b / d;
            p.push(d / dv * bernoulli(-lambda));
            q.push(d / dv * bernoulli(lambda));
        } else if c.d_node[i] == 0.0 && c.d_node[i + 1] == 0.0 {
            // Pure transport: split the node fluxes a_i f_i by sign. The face
            // fluxes then sum to Σ a_i f_i, which keeps the discrete drift
            // antisymmetry of the collision operator.
            p.push(c.a_node[i + 1].max(0.0));
            q.push((-c.a_node[i]).max(0.0));
        } else {
            p.push(b.max(0.0));
            q.push((-b).max(0.0));
        }
    }
}

/// Solves `(I − r L) x = rhs` where `L` is the zero-flux divergence of the
/// face fluxes; the matrix is tridiagonal and column diagonally dominant.
fn implicit_solve(p: &[f64], q: &[f64], r: f64, rhs: &[f64], x: &mut [f64], scratch: &mut Vec<f64>) -> Result<()> {
    let n = rhs.len();
    scratch.clear();
    scratch.resize(n, 0.0);
    let diag = |i: usize| {
        let right = if i + 1 < n { q[i] } else { 0.0 };
        let left = if i > 0 { p[i - 1] } else { 0.0 };
        1.0 + r * (right + left)
    };
    // Thomas: sub-diagonal −r q_{i−1}, super-diagonal −r p_i.
    let mut b = diag(0);
    x[0] = rhs[0] / b;
    for i in 1..n {
        scratch[i] = -r * p[i - 1] / b;
        b = diag(i) + r * q[i - 1] * scratch[i];
        if !(b > 0.0) {
            return Err(Error::numerical(
                "Fokker-Planck tridiagonal solve",
                format!("pivot {b} at row {i}"),
            ));
        }
        x[i] = (rhs[i] + r * q[i - 1] * x[i - 1]) / b;
    }
    for i in (0..n - 1).rev() {
        x[i] -= scratch[i + 1] * x[i + 1];
    }
    Ok(())
}

#[derive(Default)]
struct StepScratch {
    coeffs: Coefficients,
    p: Vec<f64>,
    q: Vec<f64>,
    tri: Vec<f64>,
    prev: Vec<f64>,
}

/// Per-node solver for one model on one grid.
#[derive(Clone, Debug)]
pub struct FpSolver {
    model: ModelSpec,
    grid: VGrid,
    ops: Vec<NodeOperator>,
    update: CoefficientUpdate,
}

impl FpSolver {
    pub fn new(model: &ModelSpec, grid: VGrid, nodes: &[NodeParams]) -> Result<Self> {
        let (lo, hi) = model.domain();
        if grid.v_min() < lo || grid.v_max() > hi {
            return Err(Error::config(format!(
                "grid [{}, {}] exceeds the {} state space [{lo}, {hi}]",
                grid.v_min(),
                grid.v_max(),
                model.name()
            )));
        }
        if nodes.is_empty() {
            return Err(Error::config("Fokker-Planck solver needs at least one node"));
        }
        let ops = nodes.iter().map(|np| NodeOperator::new(model, np, &grid)).collect();
        Ok(FpSolver {
            model: model.clone(),
            grid,
            ops,
            update: CoefficientUpdate::Frozen,
        })
    }

    /// Solver at the quadrature nodes of `basis`.
    pub fn for_basis(model: &ModelSpec, grid: VGrid, basis: &GpcBasis) -> Result<Self> {
        Self::new(model, grid, &model.nodes(basis)?)
    }

    pub fn with_update(mut self, update: CoefficientUpdate) -> Self {
        self.update = update;
        self
    }

    pub fn grid(&self) -> &VGrid {
        &self.grid
    }

    pub fn model(&self) -> &ModelSpec {
        &self.model
    }

    pub fn nodes(&self) -> usize {
        self.ops.len()
    }

    /// Largest admissible step, `Δv/2`.
    pub fn max_dt(&self) -> f64 {
        0.5 * self.grid.dv()
    }

    /// `B̃` and `𝒟` on the faces for density `f` at node `q`.
    pub fn coefficients(&self, q: usize, f: &[f64]) -> Result<FaceCoefficients> {
        self.check_node(q, f)?;
        let mut c = Coefficients::default();
        let dv = self.grid.dv();
        self.ops[q].assemble(f, dv, &mut c);
        let drift = (0..c.a_face.len())
            .map(|i| c.a_face[i] + (c.d_node[i + 1] - c.d_node[i]) / dv)
            .collect();
        Ok(FaceCoefficients {
            drift,
            diffusion: c.d_face,
        })
    }

    fn check_node(&self, q: usize, f: &[f64]) -> Result<()> {
        if q >= self.ops.len() {
            return Err(Error::shape("collocation node index", self.ops.len(), q));
        }
        if f.len() != self.grid.len() {
            return Err(Error::shape("density length", self.grid.len(), f.len()));
        }
        Ok(())
    }

    /// Advances every node by `dt`.
    pub fn step(&self, state: &mut FpState, dt: f64) -> Result<()> {
        if state.nodes() != self.ops.len() {
            return Err(Error::shape("Fokker-Planck state nodes", self.ops.len(), state.nodes()));
        }
        if !(dt > 0.0) || dt > self.max_dt() * (1.0 + 1e-12) {
            return Err(Error::config(format!(
                "Fokker-Planck step {dt} must lie in (0, Δv/2 = {}]",
                self.max_dt()
            )));
        }
        let t = state.t;
        state
            .f
            .par_iter_mut()
            .zip(&self.ops)
            .enumerate()
            .try_for_each_init(StepScratch::default, |s, (q, (f, op))| {
                self.step_node(op, f, dt, s)
                    .map_err(|e| Error::numerical(format!("Fokker-Planck node {q} at t = {t}"), e.to_string()))
            })?;
        state.t += dt;
        Ok(())
    }

    fn step_node(&self, op: &NodeOperator, f: &mut [f64], dt: f64, s: &mut StepScratch) -> Result<()> {
        if f.len() != self.grid.len() {
            return Err(Error::shape("density length", self.grid.len(), f.len()));
        }
        let dv = self.grid.dv();
        let r = dt / dv;
        s.prev.clear();
        s.prev.extend_from_slice(f);
        op.assemble(f, dv, &mut s.coeffs);
        flux_weights(&s.coeffs, dv, &mut s.p, &mut s.q);
        implicit_solve(&s.p, &s.q, r, &s.prev, f, &mut s.tri)?;
        if let CoefficientUpdate::Picard { tol, max_iter } = self.update {
            if let NodeOperator::Nonlocal { .. } = op {
                let mut iter = 0;
                let mut change = f64::INFINITY;
                let mut next = vec![0.0; f.len()];
                while change > tol && iter < max_iter {
                    op.assemble(f, dv, &mut s.coeffs);
                    flux_weights(&s.coeffs, dv, &mut s.p, &mut s.q);
                    implicit_solve(&s.p, &s.q, r, &s.prev, &mut next, &mut s.tri)?;
                    change = dv * next.iter().zip(f.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>();
                    f.copy_from_slice(&next);
                    iter += 1;
                }
                if change > tol {
                    warn!("coefficient iteration stopped at L1 change {change:e} after {iter} sweeps");
                }
            }
        }
        if let Some(i) = f.iter().position(|x| !(*x >= 0.0)) {
            return Err(Error::numerical("Fokker-Planck step", format!("density {} at grid point {i}", f[i])));
        }
        Ok(())
    }

    /// Advances `state` to time `t` with equal substeps no longer than `dt_max`.
    pub fn advance_to(&self, state: &mut FpState, t: f64, dt_max: f64) -> Result<()> {
        let span = t - state.t;
        if span <= 1e-12 * t.abs().max(1.0) {
            return Ok(());
        }
        let dt_max = dt_max.min(self.max_dt());
        let n = (span / dt_max * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        let h = span / n as f64;
        for _ in 0..n {
            self.step(state, h)?;
        }
        state.t = t;
        Ok(())
    }
}

/// `‖f‖_{L²_p}` and `‖∂_v f‖_{L²_p}` over velocity and the random parameter.
pub fn weighted_norms(state: &FpState, grid: &VGrid, weights: &[f64]) -> Result<(f64, f64)> {
    if weights.len() != state.nodes() {
        return Err(Error::shape("node weights", state.nodes(), weights.len()));
    }
    let dv = grid.dv();
    let f2: Vec<f64> = state.f.iter().map(|f| dv * f.iter().map(|x| x * x).sum::<f64>()).collect();
    let g2: Vec<f64> = state
        .f
        .iter()
        .map(|f| f.windows(2).map(|w| (w[1] - w[0]).powi(2)).sum::<f64>() / dv)
        .collect();
    Ok((weighted_mean(weights, &f2).sqrt(), weighted_mean(weights, &g2).sqrt()))
}

/// Least-squares rate `C` in `y(t) ≈ y₀ e^{Ct}`.
pub fn growth_rate(times: &[f64], values: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(_, y)| **y > 0.0)
        .map(|(t, y)| (*t, y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mt = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Output settings for [`fp_solve`].
#[derive(Clone, Debug, PartialEq)]
pub struct FpSchedule {
    pub dt: f64,
    pub t_final: f64,
    /// Moments and norms are recorded every this many steps (and at the end).
    pub record_every: usize,
    pub keep_snapshots: bool,
}

#[derive(Clone, Debug)]
pub struct FpSolution {
    pub times: Vec<f64>,
    /// `mean[n][q]` at recorded time `n`.
    pub mean: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
    /// Weighted norms of `f` and `∂_v f` at the recorded times.
    pub norm_f: Vec<f64>,
    pub norm_df: Vec<f64>,
    pub snapshots: Vec<FpState>,
    pub final_state: FpState,
}

impl FpSolution {
    /// Fitted exponential growth rates of the squared norms (diagnostic only).
    pub fn norm_growth_rates(&self) -> (Option<f64>, Option<f64>) {
        let sq = |v: &[f64]| v.iter().map(|x| x * x).collect::<Vec<_>>();
        (
            growth_rate(&self.times, &sq(&self.norm_f)),
            growth_rate(&self.times, &sq(&self.norm_df)),
        )
    }
}

/// Runs the solver from `f0` to `t_final`, recording moments per node.
pub fn fp_solve(solver: &FpSolver, f0: FpState, schedule: &FpSchedule, weights: &[f64]) -> Result<FpSolution> {
    if !(schedule.t_final >= 0.0) || schedule.record_every == 0 {
        return Err(Error::config("Fokker-Planck schedule needs t_final >= 0 and record_every >= 1"));
    }
    if !(schedule.dt > 0.0) || schedule.dt > solver.max_dt() * (1.0 + 1e-12) {
        return Err(Error::config(format!(
            "Fokker-Planck step {} must lie in (0, Δv/2 = {}]",
            schedule.dt,
            solver.max_dt()
        )));
    }
    let grid = solver.grid();
    let steps = (schedule.t_final / schedule.dt * (1.0 - 1e-12)).ceil() as usize;
    let h = if steps > 0 { schedule.t_final / steps as f64 } else { 0.0 };
    let mut state = f0;
    let mut out = FpSolution {
        times: Vec::new(),
        mean: Vec::new(),
        second: Vec::new(),
        norm_f: Vec::new(),
        norm_df: Vec::new(),
        snapshots: Vec::new(),
        final_state: state.clone(),
    };
    let record = |s: &FpState, out: &mut FpSolution| -> Result<()> {
        let m = s.moments(grid);
        let (nf, ndf) = weighted_norms(s, grid, weights)?;
        if !(nf.is_finite() && ndf.is_finite()) {
            return Err(Error::numerical("Fokker-Planck norms", format!("non-finite at t = {}", s.t)));
        }
        out.times.push(s.t);
        out.mean.push(m.mean);
        out.second.push(m.second);
        out.norm_f.push(nf);
        out.norm_df.push(ndf);
        if schedule.keep_snapshots {
            out.snapshots.push(s.clone());
        }
        Ok(())
    };
    record(&state, &mut out)?;
    for k in 1..=steps {
        solver.step(&mut state, h)?;
        if k == steps {
            state.t = schedule.t_final;
        }
        if k % schedule.record_every == 0 || k == steps {
            record(&state, &mut out)?;
        }
    }
    out.final_state = state;
    Ok(out)
}

/// Moment targets for rescaling, produced by advancing a Fokker-Planck state
/// alongside the particle run.
pub struct FpMomentTarget {
    solver: FpSolver,
    state: FpState,
    dt_max: f64,
}

impl FpMomentTarget {
    pub fn new(solver: FpSolver, state: FpState, dt_max: f64) -> Result<Self> {
        if state.nodes() != solver.nodes() {
            return Err(Error::shape("Fokker-Planck state nodes", solver.nodes(), state.nodes()));
        }
        if !(dt_max > 0.0) {
            return Err(Error::config(format!("Fokker-Planck substep must be positive, got {dt_max}")));
        }
        Ok(FpMomentTarget { solver, state, dt_max })
    }

    pub fn state(&self) -> &FpState {
        &self.state
    }
}

impl MomentTarget for FpMomentTarget {
    fn moments_at(&mut self, t: f64) -> Result<NodeMoments> {
        if t + 1e-12 < self.state.t {
            return Err(Error::State(format!(
                "moment target asked for t = {t} after advancing to {}",
                self.state.t
            )));
        }
        self.solver.advance_to(&mut self.state, t, self.dt_max)?;
        Ok(self.state.moments(self.solver.grid()))
    }
}

/// Writes density snapshots with columns `t,z_node_index,v,f`.
pub fn write_density_csv<W: Write>(mut w: W, grid: &VGrid, states: &[FpState]) -> Result<()> {
    writeln!(w, "t,z_node_index,v,f")?;
    for s in states {
        for (q, f) in s.f.iter().enumerate() {
            for (i, x) in f.iter().enumerate() {
                writeln!(w, "{},{},{},{}", s.t, q, grid.point(i), x)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
