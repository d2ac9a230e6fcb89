//! Debiased, model-agnostic learning of conditional distributional treatment
//! effects (CDTEs).
//!
//! A CDTE is the difference, between the treated and control arms, of some
//! distributional statistic of the outcome conditional on covariates: the mean
//! (CATE), a quantile (CQTE), a superquantile / CVaR (CSQTE) or the
//! KL-entropic risk / EVaR (CKLRTE). The estimator builds a debiased
//! pseudo-outcome with cross-fitted nuisances and regresses it on covariates
//! with any regression learner; with an OLS final stage it also gives
//! heteroskedasticity-robust inference on the best linear projection.
//!
//! Module map:
//! - [`dataset`]: observations, CSV ingestion, fold assignment.
//! - [`statistics`]: moment functions and weighted empirical estimators.
//! - [`optim`]: golden-section scalar minimization used by the EVaR solver.
//! - [`learners`]: OLS, logistic regression, random forests, kernel weights
//!   and the conditional quantile / superquantile / EVaR / density learners.
//! - [`pseudo`]: the debiased pseudo-outcome and its closed forms.
//! - [`crossfit`]: the cross-fitted learner and the plug-in baseline.
//! - [`inference`]: OLS projection with HC1 sandwich covariance.
//! - [`sim`]: the lognormal simulation design, analytic truth, benchmark
//!   harness and risk profiles.
//! - [`diagnostics`]: counters and run reports.
//! - [`cli`]: configuration and command implementations behind the binary.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod crossfit;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod inference;
pub mod learners;
pub mod optim;
pub mod pseudo;
pub mod rng;
pub mod sim;
pub mod statistics;

mod linalg;
mod util;

pub use crossfit::{cdte_learn, plugin_learn, FinalStage, FittedCdte, NuisanceConfig};
pub use dataset::{assign_folds, load_csv, split, Dataset, FoldAssignment, Observation};
pub use error::{CdteError, Result};
pub use inference::{ols_project, FeatureMap, ProjectionResult};
pub use statistics::StatisticSpec;
