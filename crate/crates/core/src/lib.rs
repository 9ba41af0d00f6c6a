//! Stochastic-Galerkin DSMC for kinetic models with uncertain parameters.
//!
//! Particles carry polynomial chaos expansions of their state in the random
//! parameter `z`. Binary collisions are projected onto the chaos basis, which
//! lets one Monte Carlo run describe the whole parameter family at once. A
//! deterministic Fokker-Planck solver provides the quasi-invariant limit used
//! for moment rescaling and validation.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod gpc;
pub mod models;
pub mod rng;
pub mod dsmc;
pub mod fokker_planck;
pub mod analysis;

pub use error::{Error, Result};
pub use gpc::{GpcBasis, GpcCoefficients, ParamDistribution, RandomParamSpec, TensorGrid};
pub use models::{ModelKind, ModelSpec, NodeParams, PairDraw, ParamFn};
