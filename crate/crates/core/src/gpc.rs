//! Generalized polynomial chaos on tensor-product parameter boxes.
//!
//! Uniform parameters use shifted Legendre polynomials normalized against the
//! uniform probability density, so `E[Φ_h Φ_k] = δ_hk`. Quadrature weights
//! absorb the density: every expectation is a plain weighted sum over nodes.
//!
//! Multi-dimensional bases are full tensor products ordered lexicographically
//! (last dimension fastest). Evaluation and projection use sum factorization,
//! one dimension at a time, so their cost grows like `K·Q^{1/d}·Q` instead of
//! `K·Q`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marginal law of one random parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ParamDistribution {
    Uniform { a: f64, b: f64 },
}

impl ParamDistribution {
    pub fn support(&self) -> (f64, f64) {
        match *self {
            ParamDistribution::Uniform { a, b } => (a, b),
        }
    }

    pub fn density(&self, z: f64) -> f64 {
        match *self {
            ParamDistribution::Uniform { a, b } => {
                if (a..=b).contains(&z) {
                    1.0 / (b - a)
                } else {
                    0.0
                }
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            ParamDistribution::Uniform { a, b } => 0.5 * (a + b),
        }
    }
}

/// Joint law of the independent random parameters `z`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomParamSpec {
    dists: Vec<ParamDistribution>,
}

impl RandomParamSpec {
    pub fn new(dists: Vec<ParamDistribution>) -> Result<Self> {
        if dists.is_empty() {
            return Err(Error::config("random parameter spec needs at least one dimension"));
        }
        for (d, dist) in dists.iter().enumerate() {
            let (a, b) = dist.support();
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(Error::config(format!(
                    "parameter z{} must have a finite nonempty support, got [{a}, {b}]",
                    d + 1
                )));
            }
        }
        Ok(RandomParamSpec { dists })
    }

    pub fn uniform(a: f64, b: f64) -> Result<Self> {
        Self::new(vec![ParamDistribution::Uniform { a, b }])
    }

    pub fn unit_cube(dims: usize) -> Result<Self> {
        Self::new(vec![ParamDistribution::Uniform { a: 0.0, b: 1.0 }; dims])
    }

    pub fn dims(&self) -> usize {
        self.dists.len()
    }

    pub fn distributions(&self) -> &[ParamDistribution] {
        &self.dists
    }

    pub fn contains(&self, z: &[f64]) -> bool {
        z.len() == self.dims()
            && z.iter().zip(&self.dists).all(|(&zi, d)| {
                let (a, b) = d.support();
                zi >= a && zi <= b
            })
    }

    /// Product density `p(z)`.
    pub fn density(&self, z: &[f64]) -> f64 {
        z.iter().zip(&self.dists).map(|(&zi, d)| d.density(zi)).product()
    }
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`, ascending.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n > 0, "gauss_legendre needs at least one node");
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let nf = n as f64;
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess, then Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (p, d) = legendre_with_derivative(n, x);
            dp = d;
            let dx = p / d;
            x -= dx;
            if dx.abs() <= 1e-16 * x.abs().max(1.0) {
                let (_, d) = legendre_with_derivative(n, x);
                dp = d;
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Orthonormal polynomials `Φ_0..=Φ_order` of one parameter, written into `out`.
fn orthonormal_1d(dist: &ParamDistribution, order: usize, z: f64, out: &mut [f64]) {
    match *dist {
        ParamDistribution::Uniform { a, b } => {
            let x = 2.0 * (z - a) / (b - a) - 1.0;
            out[0] = 1.0;
            if order >= 1 {
                out[1] = x;
            }
            for k in 2..=order {
                let kf = k as f64;
                out[k] = ((2.0 * kf - 1.0) * x * out[k - 1] - (kf - 1.0) * out[k - 2]) / kf;
            }
            for (k, v) in out.iter_mut().enumerate().take(order + 1) {
                *v *= (2.0 * k as f64 + 1.0).sqrt();
            }
        }
    }
}

/// Gauss rule for one parameter, mapped to its support, weights summing to one.
fn gauss_rule(dist: &ParamDistribution, n: usize) -> (Vec<f64>, Vec<f64>) {
    match *dist {
        ParamDistribution::Uniform { a, b } => {
            let (x, w) = gauss_legendre(n);
            let nodes = x.iter().map(|&x| a + 0.5 * (b - a) * (x + 1.0)).collect();
            let weights = w.iter().map(|&w| 0.5 * w).collect();
            (nodes, weights)
        }
    }
}

/// Row-major dense matrix used for one-dimensional factors.
#[derive(Clone, Debug)]
struct Factor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Separable linear map `⊗_d A_d` acting on row-major tensors.
#[derive(Clone, Debug)]
pub struct TensorMap {
    factors: Vec<Factor>,
}

/// Scratch buffers for [`TensorMap::apply`]; reuse one per thread.
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl TensorMap {
    pub fn input_len(&self) -> usize {
        self.factors.iter().map(|f| f.cols).product()
    }

    pub fn output_len(&self) -> usize {
        self.factors.iter().map(|f| f.rows).product()
    }

    /// `out = (⊗ A_d) input`.
    pub fn apply(&self, input: &[f64], out: &mut [f64], ws: &mut Workspace) {
        debug_assert_eq!(input.len(), self.input_len());
        debug_assert_eq!(out.len(), self.output_len());
        if self.factors.len() == 1 {
            let f = &self.factors[0];
            for (r, o) in out.iter_mut().enumerate() {
                let row = &f.data[r * f.cols..(r + 1) * f.cols];
                *o = row.iter().zip(input).map(|(a, b)| a * b).sum();
            }
            return;
        }
        let mut shape: Vec<usize> = self.factors.iter().map(|f| f.cols).collect();
        let last = self.factors.len() - 1;
        ws.a.clear();
        ws.a.extend_from_slice(input);
        for (axis, f) in self.factors.iter().enumerate() {
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let next_len = outer * f.rows * inner;
            let (src, dst): (&[f64], &mut [f64]) = if axis == last {
                (&ws.a, &mut out[..])
            } else {
                ws.b.clear();
                ws.b.resize(next_len, 0.0);
                (&ws.a, &mut ws.b[..])
            };
            dst.fill(0.0);
            for o in 0..outer {
                for r in 0..f.rows {
                    let row = &f.data[r * f.cols..(r + 1) * f.cols];
                    let d = &mut dst[(o * f.rows + r) * inner..(o * f.rows + r + 1) * inner];
                    for (k, &m) in row.iter().enumerate() {
                        if m == 0.0 {
                            continue;
                        }
                        let s = &src[(o * f.cols + k) * inner..(o * f.cols + k + 1) * inner];
                        for (x, &y) in d.iter_mut().zip(s) {
                            *x += m * y;
                        }
                    }
                }
            }
            shape[axis] = f.rows;
            if axis != last {
                std::mem::swap(&mut ws.a, &mut ws.b);
            }
        }
    }
}

/// Tensor-product point set with weights, e.g. a quadrature rule or an
/// observation grid.
#[derive(Clone, Debug)]
pub struct TensorGrid {
    axes: Vec<(Vec<f64>, Vec<f64>)>,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl TensorGrid {
    pub fn new(axes: Vec<(Vec<f64>, Vec<f64>)>) -> Self {
        let dims = axes.len();
        let total: usize = axes.iter().map(|(p, _)| p.len()).product();
        let mut points = Vec::with_capacity(total * dims);
        let mut weights = Vec::with_capacity(total);
        let mut idx = vec![0usize; dims];
        for _ in 0..total {
            let mut w = 1.0;
            for (d, (p, wt)) in axes.iter().enumerate() {
                points.push(p[idx[d]]);
                w *= wt[idx[d]];
            }
            weights.push(w);
            for d in (0..dims).rev() {
                idx[d] += 1;
                if idx[d] < axes[d].0.len() {
                    break;
                }
                idx[d] = 0;
            }
        }
        TensorGrid {
            axes,
            points,
            weights,
        }
    }

    /// Gauss rule with `nq[d]` nodes per dimension for the given law.
    pub fn gauss(spec: &RandomParamSpec, nq: &[usize]) -> Self {
        let axes = spec
            .distributions()
            .iter()
            .zip(nq)
            .map(|(d, &n)| gauss_rule(d, n))
            .collect();
        Self::new(axes)
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, q: usize) -> &[f64] {
        let d = self.dims();
        &self.points[q * d..(q + 1) * d]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn axis(&self, d: usize) -> (&[f64], &[f64]) {
        (&self.axes[d].0, &self.axes[d].1)
    }
}

/// Orthonormal tensor-product polynomial chaos basis with its quadrature rule.
#[derive(Clone, Debug)]
pub struct GpcBasis {
    spec: RandomParamSpec,
    orders: Vec<usize>,
    quad: TensorGrid,
    to_nodes: TensorMap,
    from_nodes: TensorMap,
    len: usize,
}

impl GpcBasis {
    /// Builds the basis with `nq[d]` Gauss nodes in dimension `d`.
    pub fn new(spec: RandomParamSpec, orders: &[usize], nq: &[usize]) -> Result<Self> {
        let dims = spec.dims();
        if orders.len() != dims {
            return Err(Error::config(format!(
                "expected {dims} polynomial orders, got {}",
                orders.len()
            )));
        }
        if nq.len() != dims {
            return Err(Error::config(format!(
                "expected {dims} quadrature node counts, got {}",
                nq.len()
            )));
        }
        for d in 0..dims {
            if nq[d] < orders[d] + 1 {
                return Err(Error::config(format!(
                    "dimension {}: {} quadrature nodes cannot resolve order {} (need at least {})",
                    d + 1,
                    nq[d],
                    orders[d],
                    orders[d] + 1
                )));
            }
        }
        let quad = TensorGrid::gauss(&spec, nq);
        let to_nodes = Self::eval_map(&spec, orders, &quad);
        let from_nodes = TensorMap {
            factors: to_nodes
                .factors
                .iter()
                .enumerate()
                .map(|(d, f)| {
                    let (_, w) = quad.axis(d);
                    let mut data = vec![0.0; f.rows * f.cols];
                    for q in 0..f.rows {
                        for k in 0..f.cols {
                            data[k * f.rows + q] = f.data[q * f.cols + k] * w[q];
                        }
                    }
                    Factor {
                        rows: f.cols,
                        cols: f.rows,
                        data,
                    }
                })
                .collect(),
        };
        let len = orders.iter().map(|m| m + 1).product();
        Ok(GpcBasis {
            spec,
            orders: orders.to_vec(),
            quad,
            to_nodes,
            from_nodes,
            len,
        })
    }

    /// Builds the basis with the default `2M+2` nodes per dimension.
    pub fn with_default_nodes(spec: RandomParamSpec, orders: &[usize]) -> Result<Self> {
        let nq: Vec<usize> = orders.iter().map(|&m| default_nodes(m)).collect();
        Self::new(spec, orders, &nq)
    }

    fn eval_map(spec: &RandomParamSpec, orders: &[usize], grid: &TensorGrid) -> TensorMap {
        let factors = spec
            .distributions()
            .iter()
            .zip(orders)
            .enumerate()
            .map(|(d, (dist, &m))| {
                let (pts, _) = grid.axis(d);
                let mut data = vec![0.0; pts.len() * (m + 1)];
                for (q, &z) in pts.iter().enumerate() {
                    orthonormal_1d(dist, m, z, &mut data[q * (m + 1)..(q + 1) * (m + 1)]);
                }
                Factor {
                    rows: pts.len(),
                    cols: m + 1,
                    data,
                }
            })
            .collect();
        TensorMap { factors }
    }

    pub fn spec(&self) -> &RandomParamSpec {
        &self.spec
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn dims(&self) -> usize {
        self.spec.dims()
    }

    /// Number of basis functions `K = ∏(M_d + 1)`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn quadrature(&self) -> &TensorGrid {
        &self.quad
    }

    pub fn num_nodes(&self) -> usize {
        self.quad.len()
    }

    pub fn node(&self, q: usize) -> &[f64] {
        self.quad.point(q)
    }

    pub fn weights(&self) -> &[f64] {
        self.quad.weights()
    }

    /// Quadrature nodes per dimension.
    pub fn nodes_per_dim(&self) -> Vec<usize> {
        (0..self.dims()).map(|d| self.quad.axis(d).0.len()).collect()
    }

    /// Flat index of the multi-index `(h_1, .., h_d)`.
    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi
            .iter()
            .zip(&self.orders)
            .fold(0, |acc, (&h, &m)| acc * (m + 1) + h)
    }

    pub fn multi_index(&self, mut flat: usize) -> Vec<usize> {
        let mut out = vec![0; self.dims()];
        for d in (0..self.dims()).rev() {
            let n = self.orders[d] + 1;
            out[d] = flat % n;
            flat /= n;
        }
        out
    }

    /// `(Φ_h(z))_h` in flat order.
    pub fn eval_basis(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dims() {
            return Err(Error::shape("eval_basis point", self.dims(), z.len()));
        }
        if !self.spec.contains(z) {
            return Err(Error::Domain(format!("point {z:?} lies outside the parameter support")));
        }
        let mut out = vec![1.0];
        for (d, (dist, &m)) in self.spec.distributions().iter().zip(&self.orders).enumerate() {
            let mut phi = vec![0.0; m + 1];
            orthonormal_1d(dist, m, z[d], &mut phi);
            out = out
                .iter()
                .flat_map(|&a| phi.iter().map(move |&b| a * b))
                .collect();
        }
        Ok(out)
    }

    /// `Σ_h c_h Φ_h(z)`.
    pub fn evaluate(&self, coeffs: &[f64], z: &[f64]) -> Result<f64> {
        if coeffs.len() != self.len {
            return Err(Error::shape("gPC coefficients", self.len, coeffs.len()));
        }
        let phi = self.eval_basis(z)?;
        Ok(coeffs.iter().zip(&phi).map(|(c, p)| c * p).sum())
    }

    /// Quadrature projection `c_h = Σ_q w_q g(z_q) Φ_h(z_q)`.
    pub fn project(&self, values_at_nodes: &[f64]) -> Result<GpcCoefficients> {
        if values_at_nodes.len() != self.num_nodes() {
            return Err(Error::shape("node values", self.num_nodes(), values_at_nodes.len()));
        }
        let mut out = vec![0.0; self.len];
        self.project_into(values_at_nodes, &mut out, &mut Workspace::default());
        Ok(GpcCoefficients(out))
    }

    /// Projects an arbitrary function of `z` sampled at the quadrature nodes.
    pub fn project_fn(&self, f: impl Fn(&[f64]) -> f64) -> GpcCoefficients {
        let values: Vec<f64> = (0..self.num_nodes()).map(|q| f(self.node(q))).collect();
        let mut out = vec![0.0; self.len];
        self.project_into(&values, &mut out, &mut Workspace::default());
        GpcCoefficients(out)
    }

    /// Unchecked projection into a caller buffer.
    #[inline]
    pub fn project_into(&self, values_at_nodes: &[f64], out: &mut [f64], ws: &mut Workspace) {
        self.from_nodes.apply(values_at_nodes, out, ws);
    }

    /// Unchecked evaluation of an expansion at every quadrature node.
    #[inline]
    pub fn evaluate_at_nodes(&self, coeffs: &[f64], out: &mut [f64], ws: &mut Workspace) {
        self.to_nodes.apply(coeffs, out, ws);
    }

    /// Separable evaluation map from coefficients to the points of `grid`.
    pub fn evaluator(&self, grid: &TensorGrid) -> Result<TensorMap> {
        if grid.dims() != self.dims() {
            return Err(Error::shape("observation grid dimensions", self.dims(), grid.dims()));
        }
        Ok(Self::eval_map(&self.spec, &self.orders, grid))
    }

    /// Quadrature expectation `Σ_q w_q g(z_q)`.
    pub fn quad_expectation(&self, values_at_nodes: &[f64]) -> Result<f64> {
        if values_at_nodes.len() != self.num_nodes() {
            return Err(Error::shape("node values", self.num_nodes(), values_at_nodes.len()));
        }
        Ok(weighted_mean(self.weights(), values_at_nodes))
    }

    /// Quadrature variance, clamped at zero.
    pub fn quad_variance(&self, values_at_nodes: &[f64]) -> Result<f64> {
        if values_at_nodes.len() != self.num_nodes() {
            return Err(Error::shape("node values", self.num_nodes(), values_at_nodes.len()));
        }
        Ok(weighted_variance(self.weights(), values_at_nodes))
    }
}

pub fn default_nodes(order: usize) -> usize {
    2 * order + 2
}

pub(crate) fn weighted_mean(weights: &[f64], values: &[f64]) -> f64 {
    weights.iter().zip(values).map(|(w, v)| w * v).sum()
}

pub(crate) fn weighted_variance(weights: &[f64], values: &[f64]) -> f64 {
    let m = weighted_mean(weights, values);
    let m2: f64 = weights.iter().zip(values).map(|(w, v)| w * v * v).sum();
    (m2 - m * m).max(0.0)
}

/// Coefficients of one gPC expansion in the basis' flat ordering.
#[derive(Clone, Debug, PartialEq)]
pub struct GpcCoefficients(pub Vec<f64>);

impl GpcCoefficients {
    pub fn constant(value: f64, basis: &GpcBasis) -> Self {
        let mut c = vec![0.0; basis.len()];
        c[0] = value;
        GpcCoefficients(c)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Deref for GpcCoefficients {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}
