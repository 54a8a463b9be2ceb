//! Landscape analysis for low-rank (LoRA-style) adaptation of linearized models.
//!
//! The crate trains factored rank-`r` updates `Δ = uvᵀ` on synthetic (or
//! loaded) feature operators under squared-error and cross-entropy losses,
//! classifies the converged points with exact Hessian machinery, and runs the
//! rank-threshold sweeps built on top of that.

pub mod error;
pub mod experiments;
pub mod landscape;
pub mod model;
pub mod optimizer;
pub mod rng;
pub mod stats;
pub mod synthetic;
pub mod theory;

pub use error::{Error, Result};
pub use model::{LoraPoint, LossReport};
pub use synthetic::{FeatureOperator, LossKind, ProblemInstance};
