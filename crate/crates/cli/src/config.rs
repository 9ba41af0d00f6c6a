//! Experiment configuration: TOML file merged over per-experiment defaults,
//! then `section.key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use dsmcsg::analysis::NodeRule;
use dsmcsg::dsmc::{Acceptance, Admissibility, CollisionConfig, InitialLaw, RescaleMode, SigmaPolicy};
use dsmcsg::models::{gambling_model, traffic_model, wealth_model, GamblingParams, TrafficParams, WealthParams};
use dsmcsg::{GpcBasis, ModelSpec, ParamFn, RandomParamSpec};

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Test1,
    Test2,
    Test3,
    Spectral,
    McRate,
    Bounds,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcceptanceKind {
    Indicator,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StudyModel {
    Wealth,
    Traffic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Particle count.
    pub n: usize,
    /// Polynomial order per random dimension.
    pub order: Vec<usize>,
    pub nodes: NodeRule,
    /// Scaling parameters to sweep (ignored by gambling, which has ε = 1).
    pub eps: Vec<f64>,
    /// Time step as a multiple of ε: `Δt = dt_scale · ε`.
    pub dt_scale: f64,
    pub t_final: f64,
    pub acceptance: AcceptanceKind,
    pub beta: f64,
    pub rescale: bool,
    pub sigma_policy: SigmaPolicy,
    pub admissibility: Admissibility,
    /// Initial law, identical for every `z`. The bounds experiment centres
    /// its own law on `1 - rho` instead.
    pub initial: InitialLaw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSection {
    pub rho: Vec<f64>,
    pub mu: ParamFn,
    pub alpha: ParamFn,
    pub c: f64,
    pub sigma2: f64,
    /// Diffusion amplitude; `sqrt(2ρ(1-ρ))` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    /// Histogram and Fokker-Planck grid.
    pub v_min: f64,
    pub v_max: f64,
    pub dv: f64,
    /// Upper end of the Fokker-Planck grid used for moment targets.
    pub fp_v_max: f64,
    /// Fraction of particles allowed outside the histogram range.
    pub out_of_range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub model: StudyModel,
    pub orders: Vec<usize>,
    pub reference_order: usize,
    pub observe_every: usize,
    pub sizes: Vec<usize>,
    pub reps: usize,
    pub alphas: Vec<f64>,
    pub mus: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChecksSection {
    pub l1_limit: f64,
    pub variance_rel: f64,
    pub slope_tol: f64,
    pub bound_fraction: f64,
    pub min_decades: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    pub run: RunSection,
    pub grid: GridSection,
    pub checks: ChecksSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudySection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gambling: Option<GamblingParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wealth: Option<WealthParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub traffic: Option<TrafficSection>,
}

const COMMON: &str = r#"
seed = 1

[run]
nodes = "interpolatory"
acceptance = "indicator"
beta = 1.0
rescale = false
sigma_policy = "truncate"
admissibility = "tally"
initial = { kind = "uniform", a = 0.0, b = 2.0 }

[grid]
v_min = 0.0
v_max = 10.0
dv = 0.05
fp_v_max = 200.0
out_of_range = 0.01

[checks]
l1_limit = 0.05
variance_rel = 0.10
slope_tol = 0.1
bound_fraction = 0.01
min_decades = 0.0
"#;

const WEALTH: &str = r#"
[wealth]
kappa = 1.0
delta = { offset = 0.0, slope = 1.0 }
lambda = 0.5
sigma2 = 0.5
w_a = 0.9
w_b = 1.1
"#;

const TRAFFIC: &str = r#"
[traffic]
rho = [0.4, 0.6]
mu = { offset = 1.0, slope = 2.0, dim = 0 }
alpha = { offset = 0.0, slope = 2.0, dim = 1 }
c = 0.3
sigma2 = 0.2
"#;

fn defaults(experiment: Experiment) -> String {
    let specific = match experiment {
        Experiment::Test1 => r#"
[run]
n = 100000
order = [5]
eps = [1.0]
dt_scale = 0.1
t_final = 10.0

[grid]
out_of_range = 0.001

[gambling]
kappa = 1.0
delta = { offset = 0.0, slope = 0.5 }
"#
        .to_string(),
        Experiment::Test2 => format!(
            r#"
[run]
n = 100000
order = [5]
eps = [0.5, 0.1, 0.05]
dt_scale = 0.1
t_final = 10.0

[checks]
l1_limit = 0.08
{WEALTH}"#
        ),
        Experiment::Test3 => format!(
            r#"
[run]
n = 100000
order = [5, 5]
eps = [0.5, 0.1, 0.05]
dt_scale = 1.0
t_final = 300.0
admissibility = "strict"
initial = {{ kind = "uniform", a = 0.0, b = 1.0 }}

[grid]
v_max = 1.0
dv = 0.02
fp_v_max = 1.0
out_of_range = 0.0
{TRAFFIC}"#
        ),
        Experiment::Spectral => format!(
            r#"
[run]
n = 100000
order = [3]
eps = [0.1]
dt_scale = 0.1
t_final = 1.0
acceptance = "sigmoid"

[study]
model = "wealth"
orders = [1, 2, 3, 4, 5, 6, 7, 8]
reference_order = 50
observe_every = 1
sizes = []
reps = 0
alphas = []
mus = []
{WEALTH}{TRAFFIC}"#
        ),
        Experiment::McRate => format!(
            r#"
[run]
n = 0
order = [1]
eps = [0.5]
dt_scale = 0.1
t_final = 10.0

[study]
model = "wealth"
orders = []
reference_order = 0
observe_every = 1
sizes = [1000, 10000, 100000]
reps = 20
alphas = []
mus = []
{WEALTH}"#
        ),
        Experiment::Bounds => format!(
            r#"
[run]
n = 100000
order = [1]
eps = [0.1]
dt_scale = 1.0
t_final = 20.0
admissibility = "strict"

[grid]
v_max = 1.0
dv = 0.02
fp_v_max = 1.0

[study]
model = "traffic"
orders = []
reference_order = 0
observe_every = 1
sizes = []
reps = 0
alphas = [1.0, 2.0]
mus = [1.0, 3.0]
{TRAFFIC}"#
        ),
    };
    specific
}

fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<Table, CliError> {
    text.parse::<Table>()
        .map_err(|e| CliError::Config(format!("{origin}: {e}")))
}

/// Parses `section.key=value`; the value is read as TOML, or as a bare string.
fn apply_override(table: &mut Table, item: &str) -> Result<(), CliError> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override '{item}' is not of the form key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override '{item}' has an empty key")));
    }
    let value = match format!("v = {}", raw.trim()).parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.trim().to_string()),
    };
    let mut cur = table;
    for k in &keys[..keys.len() - 1] {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override '{item}': '{k}' is not a section")))?;
    }
    cur.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies overrides and fills per-experiment defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut user = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
                parse_table(&text, &p.display().to_string())?
            }
            None => Table::new(),
        };
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let experiment: Experiment = match user.get("experiment") {
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| CliError::Config(format!("experiment: {e}")))?,
            None => return Err(CliError::Config("missing required field 'experiment'".into())),
        };
        let mut table = parse_table(COMMON, "built-in defaults")?;
        merge(&mut table, parse_table(&defaults(experiment), "built-in defaults")?);
        merge(&mut table, user);
        let cfg: ExperimentConfig = Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The resolved configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved configuration, excluding the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        hex(&Sha256::digest(c.to_toml().as_bytes()))
    }

    fn need<'a, T>(&self, field: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
        field
            .as_ref()
            .ok_or_else(|| CliError::Config(format!("experiment {:?} needs a [{name}] section", self.experiment)))
    }

    pub fn study(&self) -> Result<&StudySection, CliError> {
        self.need(&self.study, "study")
    }

    pub fn acceptance(&self) -> Acceptance {
        match self.run.acceptance {
            AcceptanceKind::Indicator => Acceptance::Indicator,
            AcceptanceKind::Sigmoid => Acceptance::Sigmoid { beta: self.run.beta },
        }
    }

    pub fn collision(&self, eps: f64, seed: u64) -> CollisionConfig {
        CollisionConfig {
            dt: self.run.dt_scale * eps,
            t_final: self.run.t_final,
            acceptance: self.acceptance(),
            seed,
            sigma_policy: self.run.sigma_policy,
            admissibility: self.run.admissibility,
            rescale: self.run.rescale.then_some(RescaleMode::VarianceMatching),
        }
    }

    pub fn gambling_model(&self) -> Result<ModelSpec, CliError> {
        Ok(gambling_model(self.need(&self.gambling, "gambling")?.clone())?)
    }

    pub fn wealth_model(&self, eps: f64) -> Result<ModelSpec, CliError> {
        Ok(wealth_model(self.need(&self.wealth, "wealth")?.clone(), eps)?)
    }

    pub fn traffic_params(&self, rho: f64) -> Result<TrafficParams, CliError> {
        let t = self.need(&self.traffic, "traffic")?;
        Ok(TrafficParams {
            rho,
            mu: t.mu,
            alpha: t.alpha,
            a: t.a.unwrap_or_else(|| TrafficParams::default_amplitude(rho)),
            c: t.c,
            sigma2: t.sigma2,
        })
    }

    pub fn traffic_model(&self, rho: f64, eps: f64) -> Result<ModelSpec, CliError> {
        Ok(traffic_model(self.traffic_params(rho)?, eps)?)
    }

    pub fn rhos(&self) -> Result<&[f64], CliError> {
        Ok(&self.need(&self.traffic, "traffic")?.rho)
    }

    /// Basis over `U([0,1])^d` with `d` the number of configured orders.
    pub fn basis(&self, orders: &[usize]) -> Result<GpcBasis, CliError> {
        let spec = RandomParamSpec::unit_cube(orders.len())?;
        let nq: Vec<usize> = orders.iter().map(|&m| self.run.nodes.nodes(m)).collect();
        Ok(GpcBasis::new(spec, orders, &nq)?)
    }

    /// Checks every parameter against the invariants of the models it feeds.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        let r = &self.run;
        if r.order.is_empty() {
            return bad("run.order must list one order per random dimension".into());
        }
        if r.eps.is_empty() {
            return bad("run.eps must not be empty".into());
        }
        if !(r.dt_scale > 0.0 && r.dt_scale.is_finite()) {
            return bad(format!("run.dt_scale must be positive, got {}", r.dt_scale));
        }
        if r.acceptance == AcceptanceKind::Sigmoid && !(r.beta > 0.0 && r.beta.is_finite()) {
            return bad(format!("run.beta must be positive for sigmoid acceptance, got {}", r.beta));
        }
        let g = &self.grid;
        if !(g.v_max > g.v_min && g.dv > 0.0 && g.fp_v_max >= g.v_max) {
            return bad("grid needs v_min < v_max <= fp_v_max and dv > 0".into());
        }
        if !(0.0..1.0).contains(&g.out_of_range) {
            return bad(format!("grid.out_of_range must lie in [0, 1), got {}", g.out_of_range));
        }
        let needs_n = !matches!(self.experiment, Experiment::McRate);
        if needs_n && r.n == 0 {
            return bad("run.n must be positive".into());
        }
        let models = self.models()?;
        for (model, eps) in &models {
            if model.param_dims() > r.order.len() {
                return bad(format!(
                    "run.order has {} entries but the {} model uses {} random dimensions",
                    r.order.len(),
                    model.name(),
                    model.param_dims()
                ));
            }
            self.collision(*eps, self.seed).validate()?;
            if self.experiment != Experiment::Bounds {
                check_law(&r.initial, model)?;
            }
        }
        if r.rescale {
            if self.experiment != Experiment::Test2 && self.experiment != Experiment::Test3 {
                return bad("run.rescale is supported by test2 and test3".into());
            }
            if r.nodes != NodeRule::Interpolatory {
                return bad("run.rescale requires run.nodes = \"interpolatory\" (rescaling is exact only there)".into());
            }
        }
        let single_eps = matches!(self.experiment, Experiment::Spectral | Experiment::McRate | Experiment::Bounds);
        if single_eps && r.eps.len() != 1 {
            return bad(format!("run.eps must hold exactly one value for {:?}", self.experiment));
        }
        match self.experiment {
            Experiment::Spectral => {
                let s = self.study()?;
                if s.orders.is_empty() || s.orders.iter().any(|&m| m > s.reference_order) {
                    return bad("study.orders must be nonempty and not exceed study.reference_order".into());
                }
            }
            Experiment::McRate => {
                let s = self.study()?;
                if s.sizes.len() < 2 || s.reps < 2 {
                    return bad("study.sizes needs two or more sizes and study.reps two or more".into());
                }
            }
            Experiment::Bounds => {
                let s = self.study()?;
                if s.alphas.iter().any(|&a| a != 1.0 && a != 2.0) {
                    return bad("study.alphas: bounds are known for alpha = 1 and 2 only".into());
                }
                if s.mus.is_empty() {
                    return bad("study.mus must not be empty".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Every model instance the experiment will build, with its ε.
    fn models(&self) -> Result<Vec<(ModelSpec, f64)>, CliError> {
        let mut out = Vec::new();
        match self.experiment {
            Experiment::Test1 => out.push((self.gambling_model()?, 1.0)),
            Experiment::Test2 | Experiment::McRate => {
                for &e in &self.run.eps {
                    out.push((self.wealth_model(e)?, e));
                }
            }
            Experiment::Test3 => {
                for &rho in self.rhos()? {
                    for &e in &self.run.eps {
                        out.push((self.traffic_model(rho, e)?, e));
                    }
                }
            }
            Experiment::Spectral => {
                for &e in &self.run.eps {
                    let m = match self.study()?.model {
                        StudyModel::Wealth => self.wealth_model(e)?,
                        StudyModel::Traffic => self.traffic_model(self.rhos()?[0], e)?,
                    };
                    out.push((m, e));
                }
            }
            Experiment::Bounds => {
                let s = self.study()?;
                for &rho in self.rhos()? {
                    for &mu in &s.mus {
                        for &alpha in &s.alphas {
                            for &e in &self.run.eps {
                                out.push((self.bound_model(rho, mu, alpha, e)?, e));
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn bound_model(&self, rho: f64, mu: f64, alpha: f64, eps: f64) -> Result<ModelSpec, CliError> {
        let mut p = self.traffic_params(rho)?;
        p.mu = ParamFn::constant(mu);
        p.alpha = ParamFn::constant(alpha);
        Ok(traffic_model(p, eps)?)
    }
}

fn check_law(law: &InitialLaw, model: &ModelSpec) -> Result<(), CliError> {
    let (lo, hi) = model.domain();
    let (a, b) = match *law {
        InitialLaw::Uniform { a, b } => {
            if b.is_nan() || a.is_nan() || b <= a {
                return Err(CliError::Config(format!("run.initial: uniform law needs a < b, got [{a}, {b}]")));
            }
            (a, b)
        }
        InitialLaw::Point { v } => (v, v),
    };
    if a < lo || b > hi {
        return Err(CliError::Config(format!(
            "run.initial: support [{a}, {b}] leaves the {} state space [{lo}, {hi}]",
            model.name()
        )));
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
