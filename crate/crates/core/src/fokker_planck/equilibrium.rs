//! Closed-form steady states.

use statrs::distribution::{ContinuousCDF, Gamma, InverseGamma};
use statrs::function::gamma::ln_gamma;

use super::VGrid;
use crate::error::{Error, Result};
use crate::models::{background_moment, ModelKind, ModelSpec, NodeParams, WealthParams};

/// Gambling steady state `(1−δ)^{1−δ}/Γ(1−δ) v^{−δ} e^{−(1−δ)v}`.
///
/// Diverges at `v = 0` for `δ > 0`; use [`Equilibrium::cell_averages`] on grids.
pub fn equilibrium_gambling(v: f64, delta: f64) -> f64 {
    let s = 1.0 - delta;
    Equilibrium::Gamma { shape: s, rate: s }.pdf(v)
}

/// Wealth steady state: inverse Gamma with shape `1+μ+δ` and scale `μm`,
/// `μ = 2λ/σ²`, `m = M_{1+δ}/M_δ`. Zero at `v ≤ 0`.
pub fn equilibrium_wealth(v: f64, p: &WealthParams, delta: f64) -> f64 {
    let (shape, scale) = wealth_shape_scale(p, delta);
    Equilibrium::InverseGamma { shape, scale }.pdf(v)
}

fn wealth_shape_scale(p: &WealthParams, delta: f64) -> (f64, f64) {
    let mu = 2.0 * p.lambda / p.sigma2;
    let m = background_moment(p, 1.0 + delta) / background_moment(p, delta);
    (1.0 + mu + delta, mu * m)
}

/// Steady state of a model at one collocation node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Equilibrium {
    Gamma { shape: f64, rate: f64 },
    InverseGamma { shape: f64, scale: f64 },
}

impl Equilibrium {
    /// `None` for models without a closed-form steady state (traffic).
    pub fn of(model: &ModelSpec, np: &NodeParams) -> Option<Self> {
        match &model.kind {
            ModelKind::Gambling(_) => {
                let s = 1.0 - np.exponent;
                Some(Equilibrium::Gamma { shape: s, rate: s })
            }
            ModelKind::Wealth(p) => {
                let (shape, scale) = wealth_shape_scale(p, np.exponent);
                Some(Equilibrium::InverseGamma { shape, scale })
            }
            ModelKind::Traffic(_) => None,
        }
    }

    pub fn pdf(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return match self {
                Equilibrium::Gamma { shape, .. } if v == 0.0 && *shape < 1.0 => f64::INFINITY,
                Equilibrium::Gamma { rate, shape } if v == 0.0 && *shape == 1.0 => *rate,
                _ => 0.0,
            };
        }
        match *self {
            Equilibrium::Gamma { shape, rate } => {
                (shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * v.ln() - rate * v).exp()
            }
            Equilibrium::InverseGamma { shape, scale } => {
                (shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * v.ln() - scale / v).exp()
            }
        }
    }

    pub fn cdf(&self, v: f64) -> Result<f64> {
        if v <= 0.0 {
            return Ok(0.0);
        }
        let bad = |e: &dyn std::fmt::Display| Error::Domain(format!("equilibrium parameters: {e}"));
        Ok(match *self {
            Equilibrium::Gamma { shape, rate } => Gamma::new(shape, rate).map_err(|e| bad(&e))?.cdf(v),
            Equilibrium::InverseGamma { shape, scale } => {
                InverseGamma::new(shape, scale).map_err(|e| bad(&e))?.cdf(v)
            }
        })
    }

    /// Mean of the law (infinite for inverse Gamma with shape ≤ 1).
    pub fn mean(&self) -> f64 {
        match *self {
            Equilibrium::Gamma { shape, rate } => shape / rate,
            Equilibrium::InverseGamma { shape, scale } if shape > 1.0 => scale / (shape - 1.0),
            Equilibrium::InverseGamma { .. } => f64::INFINITY,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            Equilibrium::Gamma { shape, rate } => shape / (rate * rate),
            Equilibrium::InverseGamma { shape, scale } if shape > 2.0 => {
                scale * scale / ((shape - 1.0).powi(2) * (shape - 2.0))
            }
            Equilibrium::InverseGamma { .. } => f64::INFINITY,
        }
    }

    /// Cell averages over the cells of `grid`, cells clipped at `v = 0`.
    pub fn cell_averages(&self, grid: &VGrid) -> Result<Vec<f64>> {
        let h = grid.dv();
        (0..grid.len())
            .map(|i| {
                let c = grid.point(i);
                Ok((self.cdf(c + 0.5 * h)? - self.cdf(c - 0.5 * h)?) / h)
            })
            .collect()
    }

    /// Probability mass beyond `v`.
    pub fn tail_mass(&self, v: f64) -> Result<f64> {
        Ok(1.0 - self.cdf(v)?)
    }
}
