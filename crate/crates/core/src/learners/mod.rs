//! Regression and classification building blocks for nuisance and final-stage
//! fits.
//!
//! Models are fit once and are then immutable; every `predict` is `&self` and
//! the traits require `Send + Sync` so fitted models can be shared across fold
//! workers.

mod conditional;
mod forest;
mod kernel;
mod logistic;
mod ols;

pub use conditional::{
    density_at_quantile, fit_linear_quantile, fit_quantile_model, fit_regressor, kernel_evar, qrf_quantile,
    sqrf_superquantile, two_stage_superquantile, ArmSplit, DensityModel, LinearQuantileModel, LocalQuantile,
    LocalStatistic, QuantileMethod, RegressorKind, DENSITY_FLOOR,
};
pub use forest::{fit_forest, forest_weights, Forest, ForestClassifier, ForestParams, ForestTask};
pub use kernel::{kernel_weights, silverman_bandwidths, BandwidthRule, KernelWeights};
pub(crate) use logistic::sigmoid;
pub use logistic::{fit_logistic, LogisticModel};
pub use ols::{fit_ols, LinearModel};

use crate::error::{CdteError, Result};

/// Propensity predictions are clipped to `[PROPENSITY_CLIP, 1 - PROPENSITY_CLIP]`.
pub const PROPENSITY_CLIP: f64 = 0.01;

pub trait Regressor: Send + Sync {
    fn predict(&self, x: &[f64]) -> f64;
    fn n_features(&self) -> usize;
    fn n_train(&self) -> usize;

    fn predict_many(&self, xs: &[Vec<f64>]) -> Vec<f64> {
        xs.iter().map(|x| self.predict(x)).collect()
    }
}

pub trait Classifier: Send + Sync {
    /// Unclipped estimate of `P(A = 1 | x)`.
    fn predict_raw(&self, x: &[f64]) -> f64;

    fn predict_proba(&self, x: &[f64]) -> f64 {
        clip_propensity(self.predict_raw(x)).0
    }
}

/// Clip to the overlap band; the flag reports whether clipping was active.
pub fn clip_propensity(p: f64) -> (f64, bool) {
    let c = p.clamp(PROPENSITY_CLIP, 1.0 - PROPENSITY_CLIP);
    (c, c != p)
}

/// A fitted source of locality weights over its training rows.
pub trait WeightSource: Send + Sync {
    fn weights(&self, x: &[f64]) -> LocalityWeights;
    fn n_train(&self) -> usize;
}

/// Nonnegative weights over training indices summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalityWeights(Vec<f64>);

impl LocalityWeights {
    /// Normalizes `raw`; fails if it has negative entries or no mass.
    pub fn from_raw(mut raw: Vec<f64>) -> Result<Self> {
        let total: f64 = raw.iter().sum();
        if raw.iter().any(|w| !(*w >= 0.0)) || !(total > 0.0) || !total.is_finite() {
            return Err(CdteError::domain(
                "locality weights must be nonnegative with positive mass",
            ));
        }
        raw.iter_mut().for_each(|w| *w /= total);
        Ok(LocalityWeights(raw))
    }

    pub fn uniform(n: usize) -> Self {
        LocalityWeights(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Known propensity, as in a randomized experiment.
#[derive(Debug, Clone, Copy)]
pub struct ConstantPropensity(pub f64);

impl Classifier for ConstantPropensity {
    fn predict_raw(&self, _x: &[f64]) -> f64 {
        self.0
    }
}

/// Predicts a constant; used for intercept-only fits and tests.
#[derive(Debug, Clone, Copy)]
pub struct ConstantRegressor {
    pub value: f64,
    pub d: usize,
    pub n: usize,
}

impl Regressor for ConstantRegressor {
    fn predict(&self, _x: &[f64]) -> f64 {
        self.value
    }
    fn n_features(&self) -> usize {
        self.d
    }
    fn n_train(&self) -> usize {
        self.n
    }
}

/// Uniform weights over `n` rows.
#[derive(Debug, Clone, Copy)]
pub struct UniformWeights(pub usize);

impl WeightSource for UniformWeights {
    fn weights(&self, _x: &[f64]) -> LocalityWeights {
        LocalityWeights::uniform(self.0)
    }
    fn n_train(&self) -> usize {
        self.0
    }
}

pub(crate) fn check_xy(x: &[Vec<f64>], n_y: usize) -> Result<usize> {
    if x.len() != n_y {
        return Err(CdteError::Precondition(format!(
            "{} feature rows but {} targets",
            x.len(),
            n_y
        )));
    }
    let d = x.first().map_or(0, |r| r.len());
    if x.iter().any(|r| r.len() != d) {
        return Err(CdteError::Precondition("feature rows have unequal length".into()));
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clipping() {
        assert_eq!(clip_propensity(0.5), (0.5, false));
        assert_eq!(clip_propensity(0.0), (0.01, true));
        assert_eq!(clip_propensity(1.0), (0.99, true));
        assert_eq!(ConstantPropensity(0.999).predict_proba(&[0.0]), 0.99);
    }

    #[test]
    fn locality_weights_normalize() {
        let w = LocalityWeights::from_raw(vec![1.0, 3.0]).unwrap();
        assert_eq!(w.as_slice(), &[0.25, 0.75]);
        assert!(LocalityWeights::from_raw(vec![0.0, 0.0]).is_err());
        assert!(LocalityWeights::from_raw(vec![-1.0, 2.0]).is_err());
    }
}
