//! Prefix-tuning and prompt-tuning viewed as mixtures of experts.
//!
//! * [`attention`]: multi-head self-attention with prompts or prefixes, and the
//!   exact decomposition of each head into gates and experts.
//! * [`model`]: the prefix-MoE regression model, its three prompt
//!   parameterizations and synthetic data generation.
//! * [`estimation`]: least-squares fitting of mixing measures.
//! * [`voronoi`]: Voronoi cells and the Voronoi losses between measures.
//! * [`experiments`]: sample-size sweeps, rate fits and the slow-rate witness.

pub mod attention;
pub mod estimation;
pub mod experiments;
pub mod model;
pub mod seed;
pub mod voronoi;

mod error;

pub use error::{Error, Result};
