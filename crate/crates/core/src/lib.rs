//! Causal machine learning estimation library.
//!
//! Three method families around a shared data layer and learner stack:
//!
//! - **Debiased estimation** of average treatment effects in partially
//!   linear models, with cross-fitting and repeated sample splits
//!   ([`dml`]).
//! - **Honest causal forests** for per-unit effect estimation with
//!   out-of-bag inference ([`causal_forest`]).
//! - **Group-level heterogeneity analysis** via proxy predictors: best
//!   linear predictor of the effect, sorted group effects, and group
//!   characteristics ([`generic_ml`]).
//!
//! The [`learners`] module supplies the regression stack (lasso, trees,
//! random forests, boosting, a small neural net, and ensembles) used for
//! nuisance estimation, and [`dataset`] handles ingestion, fold plans, and
//! synthetic benchmark generators.

pub mod dataset;
pub mod causal_forest;
pub mod dml;
pub mod generic_ml;
pub mod error;
pub mod learners;
pub mod linalg;
pub mod report;
pub mod stats;

pub use error::{Error, Result};

/// Crate version, for run manifests.
pub fn version() -> &'static str {
    env!("CARGO_PKG_VERSION")
}
