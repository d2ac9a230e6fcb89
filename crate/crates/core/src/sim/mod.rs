//! The simulation study: data generation, analytic truth, the Monte Carlo
//! benchmark and the risk-measure profile.

mod benchmark;
mod dgp;
mod risk_profile;
mod truth;

pub use benchmark::{
    run_benchmark, BenchmarkConfig, BenchmarkResult, EstimatorSummary, RepRecord, StageKind, DEFAULT_EVAL_SEED, X1_COEF,
};
pub use dgp::{sample_dgp, Dgp, TruePropensity};
pub use risk_profile::{profile_csv, risk_profile, tau_grid, RiskProfileConfig, RiskRow};
pub use truth::{true_cdte, true_multiplier, true_nuisances, OracleFitter, StandardLaw};
