//! The three kinetic interaction models: gambling, wealth exchange with a
//! background, and traffic speed relaxation.
//!
//! Every model works on pre-interaction states evaluated at one quadrature node
//! of the random parameter. Parameters that depend on `z` are affine functions
//! of one coordinate and are resolved once per node into [`NodeParams`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gpc::GpcBasis;

/// `offset + slope * z[dim]`; a constant when `slope == 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamFn {
    pub offset: f64,
    #[serde(default)]
    pub slope: f64,
    #[serde(default)]
    pub dim: usize,
}

impl ParamFn {
    pub fn constant(value: f64) -> Self {
        ParamFn {
            offset: value,
            slope: 0.0,
            dim: 0,
        }
    }

    pub fn affine(offset: f64, slope: f64, dim: usize) -> Self {
        ParamFn { offset, slope, dim }
    }

    pub fn eval(&self, z: &[f64]) -> f64 {
        if self.slope == 0.0 {
            self.offset
        } else {
            self.offset + self.slope * z[self.dim]
        }
    }

    pub fn is_constant(&self) -> bool {
        self.slope == 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GamblingParams {
    pub kappa: f64,
    pub delta: ParamFn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WealthParams {
    pub kappa: f64,
    pub delta: ParamFn,
    pub lambda: f64,
    pub sigma2: f64,
    /// Background law `U([w_a, w_b])`.
    pub w_a: f64,
    pub w_b: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficParams {
    pub rho: f64,
    pub mu: ParamFn,
    pub alpha: ParamFn,
    /// Diffusion amplitude `a(ρ)`.
    pub a: f64,
    /// Noise support bound: `η ∈ [-c(1-ε), c(1-ε)]`.
    pub c: f64,
    pub sigma2: f64,
}

impl TrafficParams {
    pub fn default_amplitude(rho: f64) -> f64 {
        (2.0 * rho * (1.0 - rho)).max(0.0).sqrt()
    }

    /// Probability to accelerate, `P(ρ, z) = (1-ρ)^μ(z)`.
    pub fn accel_probability(&self, z: &[f64]) -> f64 {
        (1.0 - self.rho).powf(self.mu.eval(z))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum ModelKind {
    Gambling(GamblingParams),
    Wealth(WealthParams),
    Traffic(TrafficParams),
}

/// How partners are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interaction {
    /// Particle pairs from the ensemble.
    Binary,
    /// Each selected particle meets a fresh draw from a fixed background law.
    Background,
}

/// Parameter values resolved at one quadrature node.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NodeParams {
    /// Kernel exponent: `δ(z)` for gambling and wealth, `α(z)` for traffic.
    pub exponent: f64,
    /// Acceleration probability `P(ρ, z)` (traffic only, else 0).
    pub p: f64,
}

/// Scalar randomness drawn once per interacting pair and shared across `z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairDraw {
    pub xi: f64,
    pub eta: f64,
    /// `ω` for gambling, the background partner `w` for wealth, unused for traffic.
    pub extra: f64,
}

/// A kinetic model with its quasi-invariant scaling `ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub eps: f64,
}

pub fn gambling_model(p: GamblingParams) -> Result<ModelSpec> {
    if !(p.kappa > 0.0 && p.kappa.is_finite()) {
        return Err(Error::config(format!("gambling: kappa must be positive, got {}", p.kappa)));
    }
    Ok(ModelSpec {
        kind: ModelKind::Gambling(p),
        eps: 1.0,
    })
}

pub fn wealth_model(p: WealthParams, eps: f64) -> Result<ModelSpec> {
    check_eps(eps)?;
    if !(p.kappa > 0.0 && p.kappa.is_finite()) {
        return Err(Error::config(format!("wealth: kappa must be positive, got {}", p.kappa)));
    }
    if !(p.lambda > 0.0 && p.lambda <= 1.0) {
        return Err(Error::config(format!("wealth: lambda must lie in (0, 1], got {}", p.lambda)));
    }
    if !(p.sigma2 > 0.0 && p.sigma2.is_finite()) {
        return Err(Error::config(format!("wealth: sigma2 must be positive, got {}", p.sigma2)));
    }
    if p.sigma2 + p.lambda * p.lambda >= 2.0 * p.lambda {
        return Err(Error::config(format!(
            "wealth: moment bound requires sigma2 + lambda^2 < 2 lambda, got {} + {} >= {}",
            p.sigma2,
            p.lambda * p.lambda,
            2.0 * p.lambda
        )));
    }
    if !(p.w_a > 0.0 && p.w_a < p.w_b && p.w_b.is_finite()) {
        return Err(Error::config(format!(
            "wealth: background support needs 0 < w_a < w_b, got [{}, {}]",
            p.w_a, p.w_b
        )));
    }
    Ok(ModelSpec {
        kind: ModelKind::Wealth(p),
        eps,
    })
}

pub fn traffic_model(p: TrafficParams, eps: f64) -> Result<ModelSpec> {
    check_eps(eps)?;
    if eps >= 1.0 {
        return Err(Error::config(format!("traffic: eps must be below 1, got {eps}")));
    }
    if !(0.0..=1.0).contains(&p.rho) {
        return Err(Error::config(format!("traffic: rho must lie in [0, 1], got {}", p.rho)));
    }
    if !(p.a >= 0.0 && p.a.is_finite()) {
        return Err(Error::config(format!("traffic: amplitude a must be nonnegative, got {}", p.a)));
    }
    if !(p.c > 0.0 && p.c.is_finite()) {
        return Err(Error::config(format!("traffic: noise bound c must be positive, got {}", p.c)));
    }
    if !(p.sigma2 >= 0.0 && p.sigma2.is_finite()) {
        return Err(Error::config(format!("traffic: sigma2 must be nonnegative, got {}", p.sigma2)));
    }
    // With η bounded by c(1-ε), post-interaction speeds stay in [0,1] for all
    // v, w iff (c a)² ≤ ε / (1 + ε).
    let ca2 = (p.c * p.a).powi(2);
    if ca2 > eps / (1.0 + eps) * (1.0 + 1e-12) {
        return Err(Error::config(format!(
            "traffic: (c*a)^2 = {ca2} exceeds eps/(1+eps) = {}; speeds could leave [0,1]",
            eps / (1.0 + eps)
        )));
    }
    Ok(ModelSpec {
        kind: ModelKind::Traffic(p),
        eps,
    })
}

fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::config(format!("eps must be positive, got {eps}")));
    }
    Ok(())
}

/// `∫ w^e dℰ(w)` for the uniform background on `[w_a, w_b]`.
pub fn background_moment(p: &WealthParams, exponent: f64) -> f64 {
    let e1 = exponent + 1.0;
    (p.w_b.powf(e1) - p.w_a.powf(e1)) / ((p.w_b - p.w_a) * e1)
}

#[inline]
fn pow0(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        1.0
    } else {
        x.powf(e)
    }
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self.kind {
            ModelKind::Gambling(_) => "gambling",
            ModelKind::Wealth(_) => "wealth",
            ModelKind::Traffic(_) => "traffic",
        }
    }

    pub fn interaction(&self) -> Interaction {
        match self.kind {
            ModelKind::Wealth(_) => Interaction::Background,
            _ => Interaction::Binary,
        }
    }

    /// Lower and upper edge of the state space.
    pub fn domain(&self) -> (f64, f64) {
        match self.kind {
            ModelKind::Traffic(_) => (0.0, 1.0),
            _ => (0.0, f64::INFINITY),
        }
    }

    /// Whether the partner `w` is updated as well.
    pub fn updates_partner(&self) -> bool {
        matches!(self.kind, ModelKind::Gambling(_))
    }

    /// Number of random-parameter dimensions the model reads.
    pub fn param_dims(&self) -> usize {
        let fns: Vec<&ParamFn> = match &self.kind {
            ModelKind::Gambling(p) => vec![&p.delta],
            ModelKind::Wealth(p) => vec![&p.delta],
            ModelKind::Traffic(p) => vec![&p.mu, &p.alpha],
        };
        fns.iter()
            .filter(|f| !f.is_constant())
            .map(|f| f.dim + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn node_params(&self, z: &[f64]) -> NodeParams {
        match &self.kind {
            ModelKind::Gambling(p) => NodeParams {
                exponent: p.delta.eval(z),
                p: 0.0,
            },
            ModelKind::Wealth(p) => NodeParams {
                exponent: p.delta.eval(z),
                p: 0.0,
            },
            ModelKind::Traffic(p) => NodeParams {
                exponent: p.alpha.eval(z),
                p: p.accel_probability(z),
            },
        }
    }

    /// Resolves the parameters at every quadrature node and checks the
    /// model's constraints there.
    pub fn nodes(&self, basis: &GpcBasis) -> Result<Vec<NodeParams>> {
        if self.param_dims() > basis.dims() {
            return Err(Error::config(format!(
                "{} model reads {} random dimensions but the basis has {}",
                self.name(),
                self.param_dims(),
                basis.dims()
            )));
        }
        (0..basis.num_nodes())
            .map(|q| {
                let z = basis.node(q);
                let np = self.node_params(z);
                self.check_node(&np, z)?;
                Ok(np)
            })
            .collect()
    }

    fn check_node(&self, np: &NodeParams, z: &[f64]) -> Result<()> {
        match &self.kind {
            ModelKind::Gambling(_) => {
                if !(np.exponent > 0.0 && np.exponent < 1.0) {
                    return Err(Error::config(format!(
                        "gambling: delta(z) must lie in (0, 1); delta({z:?}) = {}",
                        np.exponent
                    )));
                }
            }
            ModelKind::Wealth(_) => {
                if !(np.exponent > 0.0 && np.exponent <= 1.0) {
                    return Err(Error::config(format!(
                        "wealth: delta(z) must lie in (0, 1]; delta({z:?}) = {}",
                        np.exponent
                    )));
                }
            }
            ModelKind::Traffic(p) => {
                if p.mu.eval(z) <= 0.0 {
                    return Err(Error::config(format!(
                        "traffic: mu(z) must be positive; mu({z:?}) = {}",
                        p.mu.eval(z)
                    )));
                }
                if np.exponent < 0.0 {
                    return Err(Error::config(format!(
                        "traffic: alpha(z) must be nonnegative; alpha({z:?}) = {}",
                        np.exponent
                    )));
                }
            }
        }
        Ok(())
    }

    /// Interaction kernel `B(v, w, z)`.
    #[inline]
    pub fn kernel(&self, v: f64, w: f64, np: &NodeParams) -> f64 {
        match &self.kind {
            ModelKind::Gambling(p) => p.kappa * pow0((v * w).max(0.0), np.exponent),
            ModelKind::Wealth(p) => p.kappa * pow0((v * w).max(0.0), np.exponent),
            ModelKind::Traffic(_) => pow0((v - w).abs(), np.exponent),
        }
    }

    /// `I₁(v, w, z)`; `extra` is `ω` for gambling and ignored otherwise.
    #[inline]
    pub fn i1(&self, v: f64, w: f64, np: &NodeParams, extra: f64) -> f64 {
        match &self.kind {
            ModelKind::Gambling(_) => (1.0 - extra) * v - extra * w,
            ModelKind::Wealth(p) => p.lambda * (v - w),
            ModelKind::Traffic(_) => {
                let pp = np.p;
                -(pp * (1.0 - v) + (1.0 - pp) * (pp * w - v))
            }
        }
    }

    #[inline]
    pub fn i2(&self, v: f64, w: f64, _np: &NodeParams, extra: f64) -> f64 {
        match &self.kind {
            ModelKind::Gambling(_) => (extra - 1.0) * v + extra * w,
            _ => 0.0,
        }
    }

    #[inline]
    pub fn d1(&self, v: f64) -> f64 {
        match &self.kind {
            ModelKind::Gambling(_) => 0.0,
            ModelKind::Wealth(_) => v,
            ModelKind::Traffic(p) => {
                let e = self.eps;
                p.a * ((1.0 + e) * v * (1.0 - v) - 0.25 * e).max(0.0).sqrt()
            }
        }
    }

    #[inline]
    pub fn d2(&self, _w: f64) -> f64 {
        0.0
    }

    /// State increments `(v' - v, w' - w)` of one full interaction.
    #[inline]
    pub fn increments(&self, v: f64, w: f64, np: &NodeParams, draw: &PairDraw) -> (f64, f64) {
        let e = self.eps;
        let dv = -e * self.i1(v, w, np, draw.extra) + self.d1(v) * draw.eta;
        let dw = -e * self.i2(v, w, np, draw.extra) + self.d2(w) * draw.eta;
        (dv, dw)
    }

    /// Noise variance `σ² = σ_ε²/ε`.
    pub fn sigma2(&self) -> f64 {
        match &self.kind {
            ModelKind::Gambling(_) => 0.0,
            ModelKind::Wealth(p) => p.sigma2,
            ModelKind::Traffic(p) => p.sigma2,
        }
    }

    /// Admissible support of `η_ε`.
    pub fn noise_support(&self) -> (f64, f64) {
        match &self.kind {
            ModelKind::Gambling(_) => (0.0, 0.0),
            ModelKind::Wealth(p) => (-1.0 + self.eps * p.lambda, f64::INFINITY),
            ModelKind::Traffic(p) => {
                let b = p.c * (1.0 - self.eps);
                (-b, b)
            }
        }
    }

    /// Uniform noise with variance `εσ²`, clipped to the admissible support.
    pub fn sample_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let var = self.eps * self.sigma2();
        if var == 0.0 {
            return 0.0;
        }
        let h = (3.0 * var).sqrt();
        let x = rng.random_range(-h..=h);
        let (lo, hi) = self.noise_support();
        x.clamp(lo, hi)
    }

    /// Draws `ξ ∈ (0,1)`, the noise, and the model-specific extra variable.
    pub fn sample_pair<R: Rng + ?Sized>(&self, rng: &mut R) -> PairDraw {
        let xi = open01(rng);
        let eta = self.sample_noise(rng);
        let extra = match &self.kind {
            ModelKind::Gambling(_) => rng.random::<f64>(),
            ModelKind::Wealth(p) => rng.random_range(p.w_a..=p.w_b),
            ModelKind::Traffic(_) => 0.0,
        };
        PairDraw { xi, eta, extra }
    }

    /// Upper bound `Σ` of the kernel over the current states and all nodes.
    pub fn kernel_upper_bound(&self, v_max: f64, nodes: &[NodeParams]) -> Result<f64> {
        if nodes.is_empty() {
            return Err(Error::State("kernel bound over an empty node set".into()));
        }
        if !v_max.is_finite() {
            return Err(Error::State(format!("kernel bound from non-finite state maximum {v_max}")));
        }
        let v_max = v_max.max(0.0);
        let bound = match &self.kind {
            ModelKind::Gambling(p) => {
                p.kappa * nodes.iter().map(|n| pow0(v_max * v_max, n.exponent)).fold(0.0, f64::max)
            }
            ModelKind::Wealth(p) => {
                p.kappa * nodes.iter().map(|n| pow0(v_max * p.w_b, n.exponent)).fold(0.0, f64::max)
            }
            ModelKind::Traffic(_) => 1.0,
        };
        Ok(bound)
    }
}

/// Uniform draw on the open interval `(0, 1)`.
pub fn open01<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let x: f64 = rng.random();
        if x > 0.0 {
            return x;
        }
    }
}
