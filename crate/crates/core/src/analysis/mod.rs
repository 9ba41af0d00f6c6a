//! Post-processing: density reconstruction, statistics over the random
//! parameter, error norms, convergence studies and the traffic mean-speed
//! envelopes.

#[cfg(test)]
mod tests;

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsmc::{replay, EventLog, Observer, ParticleEnsemble, Trajectory};
use crate::error::{Error, Result};
use crate::fokker_planck::VGrid;
use crate::gpc::{GpcBasis, RandomParamSpec, TensorGrid};

/// Default cap on the fraction of particles outside the reconstruction grid.
pub const OUT_OF_RANGE_LIMIT: f64 = 1e-3;

/// Histogram densities at a set of points in `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityGrid {
    pub grid: VGrid,
    /// `density[q][i]`: histogram value in the cell of grid point `i` at point `q`.
    pub density: Vec<Vec<f64>>,
    /// Particles per point that fell outside the grid and were put in an edge cell.
    pub out_of_range: Vec<usize>,
    pub samples: usize,
}

/// Histogram of each column of the row-major `N × Q` value table.
///
/// Particles outside the grid go to the nearest edge cell. More than
/// `limit · N` of them at any point is an error.
pub fn reconstruct(values: &[f64], q: usize, grid: &VGrid, limit: f64) -> Result<DensityGrid> {
    if q == 0 || values.is_empty() || !values.len().is_multiple_of(q) {
        return Err(Error::shape("particle value table", q, values.len()));
    }
    let n = values.len() / q;
    let h = grid.dv();
    let last = grid.len() - 1;
    let scale = 1.0 / (n as f64 * h);
    let mut density = vec![vec![0.0; grid.len()]; q];
    let mut out_of_range = vec![0usize; q];
    for row in values.chunks_exact(q) {
        for (j, &v) in row.iter().enumerate() {
            let x = ((v - grid.v_min()) / h).round();
            let bin = if x < 0.0 || x.is_nan() {
                out_of_range[j] += 1;
                0
            } else if x > last as f64 {
                out_of_range[j] += 1;
                last
            } else {
                x as usize
            };
            density[j][bin] += scale;
        }
    }
    let worst = out_of_range.iter().copied().max().unwrap_or(0);
    if worst > 0 {
        let frac = worst as f64 / n as f64;
        if frac > limit {
            return Err(Error::State(format!(
                "{worst} of {n} particles ({:.3}%) fall outside the reconstruction grid [{}, {}]",
                100.0 * frac,
                grid.v_min(),
                grid.v_max()
            )));
        }
        warn!("{worst} of {n} particles outside [{}, {}] counted in edge cells", grid.v_min(), grid.v_max());
    }
    Ok(DensityGrid {
        grid: grid.clone(),
        density,
        out_of_range,
        samples: n,
    })
}

/// Histograms of an ensemble at the basis quadrature nodes.
pub fn reconstruct_ensemble(ens: &ParticleEnsemble, basis: &GpcBasis, grid: &VGrid, limit: f64) -> Result<DensityGrid> {
    reconstruct(&ens.node_values(basis), basis.num_nodes(), grid, limit)
}

/// Weighted expectation and variance over `z` of per-point vectors
/// (`values[q]` is the vector at point `q`).
pub fn stats_over_z(values: &[Vec<f64>], weights: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    if values.len() != weights.len() || values.is_empty() {
        return Err(Error::shape("per-point values", weights.len(), values.len()));
    }
    let len = values[0].len();
    if let Some(bad) = values.iter().find(|v| v.len() != len) {
        return Err(Error::shape("per-point vector length", len, bad.len()));
    }
    let mut mean = vec![0.0; len];
    let mut second = vec![0.0; len];
    for (v, w) in values.iter().zip(weights) {
        for i in 0..len {
            mean[i] += w * v[i];
            second[i] += w * v[i] * v[i];
        }
    }
    let var = second.iter().zip(&mean).map(|(s, m)| (s - m * m).max(0.0)).collect();
    Ok((mean, var))
}

/// `(Σ_q w_q |a_q − b_q|²)^{1/2}`.
pub fn l2p_error(a: &[f64], b: &[f64], weights: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("l2p operand", a.len(), b.len()));
    }
    if a.len() != weights.len() {
        return Err(Error::shape("l2p weights", a.len(), weights.len()));
    }
    Ok(a.iter()
        .zip(b)
        .zip(weights)
        .map(|((x, y), w)| w * (x - y).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// [`l2p_error`] at every time, aggregated by the maximum.
pub fn l2p_error_max(a: &[Vec<f64>], b: &[Vec<f64>], weights: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("trajectory length", a.len(), b.len()));
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| l2p_error(x, y, weights))
        .try_fold(0.0f64, |acc, e| e.map(|e| acc.max(e)))
}

/// `Δv Σ |a_i − b_i|`.
pub fn l1_distance(a: &[f64], b: &[f64], dv: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("l1 operand", a.len(), b.len()));
    }
    Ok(dv * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
}

/// Quadrature nodes used per polynomial order when replaying.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeRule {
    /// `2M + 2` points per dimension.
    #[default]
    Oversampled,
    /// `M + 1` points per dimension.
    Interpolatory,
}

impl NodeRule {
    pub fn nodes(self, order: usize) -> usize {
        match self {
            NodeRule::Oversampled => 2 * order + 2,
            NodeRule::Interpolatory => order + 1,
        }
    }

    pub fn basis(self, spec: &RandomParamSpec, order: usize) -> Result<GpcBasis> {
        let d = spec.dims();
        GpcBasis::new(spec.clone(), &vec![order; d], &vec![self.nodes(order); d])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralStudy {
    pub orders: Vec<usize>,
    pub reference_order: usize,
    /// Max-in-time `L²_p` error of the second moment per order.
    pub error_second: Vec<f64>,
    /// Same for the mean.
    pub error_mean: Vec<f64>,
}

/// Replays `log` at every order and measures the distance to the replay at
/// `reference_order`, on a Gauss grid exact for products of two
/// reference-order polynomials.
pub fn spectral_study(
    log: &EventLog,
    orders: &[usize],
    reference_order: usize,
    rule: NodeRule,
    observe_every: usize,
) -> Result<SpectralStudy> {
    let spec = &log.header.param_spec;
    let obs = TensorGrid::gauss(spec, &vec![reference_order + 1; spec.dims()]);
    let run_at = |order: usize| -> Result<Trajectory> {
        let basis = rule.basis(spec, order)?;
        let out = replay(
            log,
            &basis,
            None,
            None,
            Some(Observer {
                grid: &obs,
                every: observe_every,
            }),
        )?;
        Ok(out.trajectory)
    };
    let reference = run_at(reference_order)?;
    let mut error_second = Vec::with_capacity(orders.len());
    let mut error_mean = Vec::with_capacity(orders.len());
    for &m in orders {
        let tr = run_at(m)?;
        error_second.push(l2p_error_max(&tr.second, &reference.second, obs.weights())?);
        error_mean.push(l2p_error_max(&tr.mean, &reference.mean, obs.weights())?);
    }
    Ok(SpectralStudy {
        orders: orders.to_vec(),
        reference_order,
        error_second,
        error_mean,
    })
}

/// Ordinary least squares `y = a + b x` with the standard error of `b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    /// `NaN` with fewer than three points.
    pub slope_stderr: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() {
        return Err(Error::shape("fit data", x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::Domain("a line fit needs at least two points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Domain("a line fit needs distinct abscissae".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_stderr = if x.len() > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (rss / (n - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(LinearFit {
        intercept,
        slope,
        slope_stderr,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct McStudy {
    pub sizes: Vec<usize>,
    /// RMS deviation over repetitions for each size.
    pub rms: Vec<f64>,
    /// Mean observable over repetitions for each size.
    pub mean: Vec<f64>,
    /// Fit of `log10 rms` against `log10 N`.
    pub fit: LinearFit,
}

/// Monte Carlo error study: `observable(N, seed)` for `reps` seeds per size.
///
/// Deviations are taken from `reference` when given, else from the mean over
/// the repetitions at the same `N`.
pub fn mc_error_study<F>(sizes: &[usize], reps: usize, base_seed: u64, reference: Option<f64>, observable: F) -> Result<McStudy>
where
    F: Fn(usize, u64) -> Result<f64> + Sync,
{
    if reps < 2 || sizes.len() < 2 {
        return Err(Error::config("Monte Carlo study needs at least two sizes and two repetitions"));
    }
    let mut rms = Vec::with_capacity(sizes.len());
    let mut mean = Vec::with_capacity(sizes.len());
    for (k, &n) in sizes.iter().enumerate() {
        let samples: Vec<f64> = (0..reps)
            .into_par_iter()
            .map(|r| observable(n, base_seed.wrapping_add((k * reps + r) as u64)))
            .collect::<Result<_>>()?;
        let m = samples.iter().sum::<f64>() / reps as f64;
        let centre = reference.unwrap_or(m);
        let dof = if reference.is_some() { reps } else { reps - 1 };
        let ms = samples.iter().map(|x| (x - centre).powi(2)).sum::<f64>() / dof as f64;
        rms.push(ms.sqrt());
        mean.push(m);
    }
    let fit = if rms.iter().all(|r| *r > 0.0) {
        let lx: Vec<f64> = sizes.iter().map(|n| (*n as f64).log10()).collect();
        let ly: Vec<f64> = rms.iter().map(|r| r.log10()).collect();
        linear_fit(&lx, &ly)?
    } else {
        LinearFit {
            intercept: f64::NEG_INFINITY,
            slope: 0.0,
            slope_stderr: 0.0,
        }
    };
    Ok(McStudy {
        sizes: sizes.to_vec(),
        rms,
        mean,
        fit,
    })
}

/// Kernel exponent for which the mean-speed envelope is available.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundCase {
    Alpha1,
    Alpha2,
}

/// Envelopes `V⁻ ≤ V ≤ V⁺` of the traffic mean speed in scaled time, one per
/// collocation point.
///
/// Both are Bernoulli solutions `1/V = r + e^{∓kt}(1/V₀ − r)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrafficBounds {
    pub case: BoundCase,
    pub v0: f64,
    pub c1: Vec<f64>,
    pub c2: Vec<f64>,
    /// `3 − 3P − P²`; selects the `C₁` branch when `α = 1`.
    pub beta: Vec<f64>,
}

impl TrafficBounds {
    /// `p[q]` is the acceleration probability `P(ρ, z_q)`.
    pub fn new(case: BoundCase, p: &[f64], v0: f64) -> Result<Self> {
        if !(v0 > 0.0 && v0 <= 1.0) {
            return Err(Error::Domain(format!("initial mean speed must lie in (0, 1], got {v0}")));
        }
        let mut c1 = Vec::with_capacity(p.len());
        let mut c2 = Vec::with_capacity(p.len());
        let mut beta = Vec::with_capacity(p.len());
        for &pp in p {
            if !(pp > 0.0 && pp <= 1.0) {
                return Err(Error::Domain(format!(
                    "acceleration probability must lie in (0, 1], got {pp}; P = 0 makes the envelope degenerate"
                )));
            }
            let b = 3.0 - 3.0 * pp - pp * pp;
            let (a, c) = match case {
                BoundCase::Alpha1 => {
                    let a = if b > 0.0 { 0.5 * (3.0 - pp - pp * pp) } else { pp };
                    (a, 0.5 * (1.0 + pp - pp * pp))
                }
                BoundCase::Alpha2 => (pp, 0.5 * (pp * pp + 1.0 - pp)),
            };
            c1.push(a);
            c2.push(c);
            beta.push(b);
        }
        Ok(TrafficBounds { case, v0, c1, c2, beta })
    }

    pub fn len(&self) -> usize {
        self.c1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c1.is_empty()
    }

    fn ratio_rate(&self, q: usize) -> (f64, f64) {
        let (a, c) = (self.c1[q], self.c2[q]);
        match self.case {
            BoundCase::Alpha1 => (c / a, a),
            BoundCase::Alpha2 => (a / (a + c), a + c),
        }
    }

    pub fn upper(&self, q: usize, t: f64) -> f64 {
        let (r, k) = self.ratio_rate(q);
        1.0 / (r + (-k * t).exp() * (1.0 / self.v0 - r))
    }

    /// Lower envelope; zero once the Bernoulli solution would blow up.
    pub fn lower(&self, q: usize, t: f64) -> f64 {
        let (r, k) = self.ratio_rate(q);
        let inv = r + (k * t).exp() * (1.0 / self.v0 - r);
        if inv > 0.0 {
            1.0 / inv
        } else {
            0.0
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub samples: usize,
    pub violations: usize,
    pub tolerance: f64,
    /// Largest distance outside the widened envelope.
    pub worst: f64,
}

impl BoundReport {
    pub fn fraction(&self) -> f64 {
        self.violations as f64 / self.samples.max(1) as f64
    }

    /// At most 1% of samples outside the envelope.
    pub fn pass(&self) -> bool {
        self.fraction() <= 0.01
    }
}

/// Counts `(t, q)` samples with `V` outside `[V⁻ − tol, V⁺ + tol]`.
pub fn bound_check(times: &[f64], mean: &[Vec<f64>], bounds: &TrafficBounds, tol: f64) -> Result<BoundReport> {
    if times.len() != mean.len() {
        return Err(Error::shape("trajectory times", times.len(), mean.len()));
    }
    let mut report = BoundReport {
        samples: 0,
        violations: 0,
        tolerance: tol,
        worst: 0.0,
    };
    for (&t, m) in times.iter().zip(mean) {
        if m.len() != bounds.len() {
            return Err(Error::shape("bound points", bounds.len(), m.len()));
        }
        for (q, &v) in m.iter().enumerate() {
            let excess = (bounds.lower(q, t) - tol - v).max(v - bounds.upper(q, t) - tol);
            report.samples += 1;
            if excess > 0.0 {
                report.violations += 1;
                report.worst = report.worst.max(excess);
            }
        }
    }
    Ok(report)
}

/// Writes `t,z_index,V,E` rows.
pub fn write_observables_csv<W: Write>(mut w: W, tr: &Trajectory) -> Result<()> {
    writeln!(w, "t,z_index,V,E")?;
    for ((t, m), e) in tr.times.iter().zip(&tr.mean).zip(&tr.second) {
        for (q, (v, e)) in m.iter().zip(e).enumerate() {
            writeln!(w, "{t},{q},{v},{e}")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `t,v,Ez_f,Varz_f` rows for z-statistics of histograms.
pub fn write_density_stats_csv<W: Write>(mut w: W, grid: &VGrid, snapshots: &[(f64, Vec<f64>, Vec<f64>)]) -> Result<()> {
    writeln!(w, "t,v,Ez_f,Varz_f")?;
    for (t, e, var) in snapshots {
        for (i, (a, b)) in e.iter().zip(var).enumerate() {
            writeln!(w, "{t},{},{a},{b}", grid.point(i))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes `M,error` rows (second-moment error) plus the mean error.
pub fn write_spectral_csv<W: Write>(mut w: W, study: &SpectralStudy) -> Result<()> {
    writeln!(w, "M,error,error_mean")?;
    for ((m, e), em) in study.orders.iter().zip(&study.error_second).zip(&study.error_mean) {
        writeln!(w, "{m},{e},{em}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `N,rms` rows.
pub fn write_mc_csv<W: Write>(mut w: W, study: &McStudy) -> Result<()> {
    writeln!(w, "N,rms")?;
    for (n, r) in study.sizes.iter().zip(&study.rms) {
        writeln!(w, "{n},{r}")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `t,z_index,V,Vminus,Vplus` rows.
pub fn write_bounds_csv<W: Write>(mut w: W, times: &[f64], mean: &[Vec<f64>], bounds: &TrafficBounds) -> Result<()> {
    writeln!(w, "t,z_index,V,Vminus,Vplus")?;
    for (&t, m) in times.iter().zip(mean) {
        for (q, v) in m.iter().enumerate() {
            writeln!(w, "{t},{q},{v},{},{}", bounds.lower(q, t), bounds.upper(q, t))?;
        }
    }
    w.flush()?;
    Ok(())
}
