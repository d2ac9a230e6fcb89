//! The cross-fitted CDTE learner and the plug-in baseline.
//!
//! Rows are split into `K` folds. For each fold the nuisances are fit on the
//! other folds and the pseudo-outcomes (and plug-in differences) of the fold's
//! own rows are computed from them. A final-stage regression of all
//! pseudo-outcomes on the covariates gives the estimate.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{assign_folds, split, Dataset};
use crate::diagnostics::{log_loss, pinball_loss, summarize, Counters, FoldReport, RunReport};
use crate::error::{CdteError, Result};
use crate::inference::{ols_project_values, FeatureMap, ProjectionResult};
use crate::learners::{
    density_at_quantile, fit_forest, fit_linear_quantile, fit_logistic, fit_quantile_model, fit_regressor,
    two_stage_superquantile, ArmSplit, BandwidthRule, Classifier, ConstantPropensity, DensityModel, ForestClassifier,
    ForestParams, ForestTask, KernelWeights, LocalStatistic, QuantileMethod, Regressor, RegressorKind, WeightSource,
};
use crate::pseudo::{pseudo_outcome, ArmNuisance, NuisanceSet, PseudoOutcomes};
use crate::rng::derive_seed;
use crate::statistics::{alpha_vector, AlphaVector, NuisanceValues, StatisticSpec};

/// Confidence level used for the projection attached to OLS final stages.
pub const DEFAULT_LEVEL: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum PropensityModel {
    /// Known propensity, as in an experiment.
    Constant {
        p: f64,
    },
    Logistic,
    Forest,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SuperquantileMethod {
    /// Forest weights plugged into the weighted superquantile.
    Sqrf,
    /// OLS of `(1 - tau)^-1 Y I[Y >= q(X)]` on `X` (misspecified on purpose).
    TwoStageOls,
    /// Gaussian-kernel weights with Silverman bandwidths.
    Kernel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvarMethod {
    ForestWeights,
    KernelWeights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeanMethod {
    Ols,
    Forest,
    Kernel,
}

/// Density-at-quantile learner for the quantile effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityConfig {
    pub bandwidth: f64,
    pub final_stage: RegressorKind,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            bandwidth: 1.0,
            final_stage: RegressorKind::Forest,
        }
    }
}

/// Named learner bundles used by the simulation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Flexible,
    Misspecified,
    Slow,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Flexible => "flexible",
            Variant::Misspecified => "misspecified",
            Variant::Slow => "slow",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NuisanceConfig {
    pub propensity: PropensityModel,
    pub quantile: QuantileMethod,
    pub superquantile: SuperquantileMethod,
    pub evar: EvarMethod,
    pub mean: MeanMethod,
    /// Required for the quantile effect.
    pub density: Option<DensityConfig>,
    pub arm_split: ArmSplit,
}

impl Default for NuisanceConfig {
    fn default() -> Self {
        NuisanceConfig {
            propensity: PropensityModel::Logistic,
            quantile: QuantileMethod::Forest,
            superquantile: SuperquantileMethod::Sqrf,
            evar: EvarMethod::ForestWeights,
            mean: MeanMethod::Forest,
            density: Some(DensityConfig::default()),
            arm_split: ArmSplit::EvenOdd,
        }
    }
}

impl NuisanceConfig {
    /// The learner bundle of a simulation variant for `spec`.
    pub fn variant(spec: &StatisticSpec, variant: Variant) -> Result<Self> {
        let base = NuisanceConfig::default();
        Ok(match (spec, variant) {
            (_, Variant::Flexible) => base,
            (StatisticSpec::Quantile { .. }, Variant::Misspecified) => NuisanceConfig {
                quantile: QuantileMethod::Linear,
                ..base
            },
            (StatisticSpec::Quantile { .. }, Variant::Slow) => NuisanceConfig {
                quantile: QuantileMethod::Kernel,
                ..base
            },
            (StatisticSpec::SuperQuantile { .. }, Variant::Misspecified) => NuisanceConfig {
                superquantile: SuperquantileMethod::TwoStageOls,
                ..base
            },
            (StatisticSpec::SuperQuantile { .. }, Variant::Slow) => NuisanceConfig {
                superquantile: SuperquantileMethod::Kernel,
                ..base
            },
            (StatisticSpec::KlRisk { .. }, Variant::Slow) => NuisanceConfig {
                evar: EvarMethod::KernelWeights,
                ..base
            },
            (StatisticSpec::Mean, Variant::Misspecified) => NuisanceConfig {
                mean: MeanMethod::Ols,
                ..base
            },
            (StatisticSpec::Mean, Variant::Slow) => NuisanceConfig {
                mean: MeanMethod::Kernel,
                ..base
            },
            (StatisticSpec::KlRisk { .. }, Variant::Misspecified) => {
                return Err(CdteError::config("the KL-risk effect has no misspecified variant"))
            }
        })
    }

    pub fn validate(&self, spec: &StatisticSpec) -> Result<()> {
        spec.validate()?;
        if let PropensityModel::Constant { p } = self.propensity {
            if !(p > 0.0 && p < 1.0) {
                return Err(CdteError::config(format!(
                    "constant propensity must lie in (0, 1), got {p}"
                )));
            }
        }
        if let StatisticSpec::Quantile { .. } = spec {
            match self.density {
                None => {
                    return Err(CdteError::config(
                        "the quantile effect needs a density learner (set the density section)",
                    ))
                }
                Some(d) if !(d.bandwidth > 0.0 && d.bandwidth.is_finite()) => {
                    return Err(CdteError::config(format!(
                        "density bandwidth must be positive, got {}",
                        d.bandwidth
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Produces the nuisance set for one fold from its training rows.
pub trait NuisanceFitter: Sync {
    fn spec(&self) -> StatisticSpec;
    fn fit(&self, train: &Dataset, fold: usize, seed: u64) -> Result<NuisanceSet>;
}

/// Fits nuisances with the learners selected by a [`NuisanceConfig`].
pub struct ConfiguredFitter {
    pub spec: StatisticSpec,
    pub config: NuisanceConfig,
}

impl NuisanceFitter for ConfiguredFitter {
    fn spec(&self) -> StatisticSpec {
        self.spec
    }

    fn fit(&self, train: &Dataset, fold: usize, seed: u64) -> Result<NuisanceSet> {
        let mut set = fit_nuisances(train, &self.spec, &self.config, seed)?;
        set.fold = Some(fold);
        Ok(set)
    }
}

/// Seed streams used inside `fit_nuisances`.
mod stream {
    pub const PROPENSITY: u64 = 0;
    pub const ARM: u64 = 1;
    pub const QUANTILE: u64 = 0;
    pub const SECOND: u64 = 1;
    pub const DENSITY: u64 = 2;
    pub const FOLD: u64 = 7;
    pub const FINAL: u64 = 8;
}

/// Fit `e`, `nu_a` and `alpha_a` on `train`.
pub fn fit_nuisances(train: &Dataset, spec: &StatisticSpec, config: &NuisanceConfig, seed: u64) -> Result<NuisanceSet> {
    config.validate(spec)?;
    let x = train.features();
    let a = train.treatments();
    let propensity: Arc<dyn Classifier> = match config.propensity {
        PropensityModel::Constant { p } => Arc::new(ConstantPropensity(p)),
        PropensityModel::Logistic => Arc::new(fit_logistic(&x, &a, 100, 1e-8)?),
        PropensityModel::Forest => {
            let params = ForestParams::defaults(
                x.len(),
                train.d(),
                ForestTask::Classification,
                derive_seed(seed, &[stream::PROPENSITY]),
            );
            Arc::new(ForestClassifier::fit(&x, &a, &params)?)
        }
    };
    let arm0 = fit_arm(train, 0, spec, config, derive_seed(seed, &[stream::ARM, 0]))?;
    let arm1 = fit_arm(train, 1, spec, config, derive_seed(seed, &[stream::ARM, 1]))?;
    Ok(NuisanceSet {
        propensity,
        arms: [arm0, arm1],
        spec: *spec,
        fold: None,
    })
}

fn forest_source(x: &[Vec<f64>], y: &[f64], seed: u64) -> Result<Arc<dyn WeightSource>> {
    let d = x.first().map_or(0, |r| r.len());
    Ok(Arc::new(fit_forest(
        x,
        y,
        &ForestParams::defaults(y.len(), d, ForestTask::Regression, seed),
    )?))
}

fn kernel_source(x: &[Vec<f64>]) -> Result<Arc<dyn WeightSource>> {
    Ok(Arc::new(KernelWeights::fit(x, BandwidthRule::Silverman)?))
}

fn fit_arm(
    train: &Dataset,
    arm: u8,
    spec: &StatisticSpec,
    config: &NuisanceConfig,
    seed: u64,
) -> Result<Arc<dyn ArmNuisance>> {
    let sub = train.arm(arm);
    let (x, y) = (sub.features(), sub.outcomes());
    let q_seed = derive_seed(seed, &[stream::QUANTILE]);
    let s_seed = derive_seed(seed, &[stream::SECOND]);
    Ok(match *spec {
        StatisticSpec::Mean => {
            let model: Arc<dyn Regressor> = match config.mean {
                MeanMethod::Ols => fit_regressor(RegressorKind::Ols, &x, &y, q_seed)?,
                MeanMethod::Forest => fit_regressor(RegressorKind::Forest, &x, &y, q_seed)?,
                MeanMethod::Kernel => Arc::new(WeightedMean {
                    source: kernel_source(&x)?,
                    y: y.clone(),
                }),
            };
            Arc::new(MeanArm { model })
        }
        StatisticSpec::Quantile { tau } => {
            let density_cfg = config.density.expect("validated above");
            let q = fit_quantile_model(config.quantile, &x, &y, tau, q_seed)?;
            // density: quantile on the first half, kernel targets on the second
            let (h1, _) = config.arm_split.halves(y.len());
            let xh: Vec<Vec<f64>> = h1.iter().map(|&i| x[i].clone()).collect();
            let yh: Vec<f64> = h1.iter().map(|&i| y[i]).collect();
            let q_half = match config.quantile {
                QuantileMethod::Linear => Arc::new(fit_linear_quantile(&xh, &yh, tau)?) as Arc<dyn Regressor>,
                m => fit_quantile_model(m, &xh, &yh, tau, derive_seed(seed, &[stream::DENSITY, 0]))?,
            };
            let density = density_at_quantile(
                &sub,
                arm,
                q_half.as_ref(),
                density_cfg.bandwidth,
                density_cfg.final_stage,
                config.arm_split,
                derive_seed(seed, &[stream::DENSITY, 1]),
            )?;
            Arc::new(QuantileArm {
                q,
                density,
                spec: *spec,
            })
        }
        StatisticSpec::SuperQuantile { tau } => {
            let source = match config.superquantile {
                SuperquantileMethod::Sqrf => {
                    // one forest serves both the quantile and the superquantile
                    let stat = Arc::new(LocalStatistic::new(forest_source(&x, &y, q_seed)?, &y)?);
                    if config.quantile == QuantileMethod::Forest {
                        SqSource::Joint(stat)
                    } else {
                        SqSource::Separate {
                            q: fit_quantile_model(config.quantile, &x, &y, tau, q_seed)?,
                            mu: MuModel::Local(stat),
                        }
                    }
                }
                SuperquantileMethod::Kernel => SqSource::Separate {
                    q: fit_quantile_model(config.quantile, &x, &y, tau, q_seed)?,
                    mu: MuModel::Local(Arc::new(LocalStatistic::new(kernel_source(&x)?, &y)?)),
                },
                SuperquantileMethod::TwoStageOls => SqSource::Separate {
                    q: fit_quantile_model(config.quantile, &x, &y, tau, q_seed)?,
                    mu: MuModel::Regression(two_stage_superquantile(
                        &sub,
                        arm,
                        tau,
                        config.quantile,
                        RegressorKind::Ols,
                        config.arm_split,
                        s_seed,
                    )?),
                },
            };
            Arc::new(SuperquantileArm {
                source,
                tau,
                spec: *spec,
            })
        }
        StatisticSpec::KlRisk { delta } => {
            let source = match config.evar {
                EvarMethod::ForestWeights => forest_source(&x, &y, q_seed)?,
                EvarMethod::KernelWeights => kernel_source(&x)?,
            };
            Arc::new(KlArm {
                stat: Arc::new(LocalStatistic::new(source, &y)?),
                delta,
            })
        }
    })
}

struct WeightedMean {
    source: Arc<dyn WeightSource>,
    y: Vec<f64>,
}

impl Regressor for WeightedMean {
    fn predict(&self, x: &[f64]) -> f64 {
        let w = self.source.weights(x);
        w.as_slice().iter().zip(&self.y).map(|(w, y)| w * y).sum()
    }
    fn n_features(&self) -> usize {
        0
    }
    fn n_train(&self) -> usize {
        self.y.len()
    }
}

struct MeanArm {
    model: Arc<dyn Regressor>,
}

impl ArmNuisance for MeanArm {
    fn nu(&self, x: &[f64]) -> Result<NuisanceValues> {
        Ok(NuisanceValues::mean(self.model.predict(x)))
    }
    fn alpha(&self, _x: &[f64], _nu: &NuisanceValues, _c: &Counters) -> Result<AlphaVector> {
        Ok(AlphaVector(vec![-1.0]))
    }
}

struct QuantileArm {
    q: Arc<dyn Regressor>,
    density: DensityModel,
    spec: StatisticSpec,
}

impl ArmNuisance for QuantileArm {
    fn nu(&self, x: &[f64]) -> Result<NuisanceValues> {
        Ok(NuisanceValues::quantile(self.q.predict(x)))
    }
    fn alpha(&self, x: &[f64], nu: &NuisanceValues, counters: &Counters) -> Result<AlphaVector> {
        let (f, floored) = self.density.predict_checked(x);
        if floored {
            counters.density_floor();
        }
        alpha_vector(&self.spec, nu, Some(f))
    }
    fn quantile(&self, _x: &[f64], nu: &NuisanceValues) -> Option<f64> {
        Some(nu.kappa)
    }
}

enum MuModel {
    Local(Arc<LocalStatistic>),
    Regression(Arc<dyn Regressor>),
}

enum SqSource {
    Joint(Arc<LocalStatistic>),
    Separate { q: Arc<dyn Regressor>, mu: MuModel },
}

struct SuperquantileArm {
    source: SqSource,
    tau: f64,
    spec: StatisticSpec,
}

impl ArmNuisance for SuperquantileArm {
    fn nu(&self, x: &[f64]) -> Result<NuisanceValues> {
        Ok(match &self.source {
            SqSource::Joint(stat) => {
                let s = stat.superquantile(x, self.tau);
                NuisanceValues::superquantile(s.mu, s.q)
            }
            SqSource::Separate { q, mu } => {
                let mu = match mu {
                    MuModel::Local(stat) => stat.superquantile(x, self.tau).mu,
                    MuModel::Regression(r) => r.predict(x),
                };
                NuisanceValues::superquantile(mu, q.predict(x))
            }
        })
    }
    fn alpha(&self, _x: &[f64], nu: &NuisanceValues, _c: &Counters) -> Result<AlphaVector> {
        alpha_vector(&self.spec, nu, None)
    }
    fn quantile(&self, _x: &[f64], nu: &NuisanceValues) -> Option<f64> {
        nu.h.first().copied()
    }
}

struct KlArm {
    stat: Arc<LocalStatistic>,
    delta: f64,
}

impl ArmNuisance for KlArm {
    fn nu(&self, x: &[f64]) -> Result<NuisanceValues> {
        let e = self.stat.evar(x, self.delta)?;
        Ok(NuisanceValues::kl_risk(e.risk, e.beta, e.lambda))
    }
    fn alpha(&self, _x: &[f64], _nu: &NuisanceValues, _c: &Counters) -> Result<AlphaVector> {
        Ok(AlphaVector(vec![-1.0, 0.0, 0.0]))
    }
}

/// Everything produced by the cross-fitting loop.
#[derive(Clone)]
pub struct CrossFit {
    pub pseudo: PseudoOutcomes,
    /// `kappa_1 - kappa_0` at each row from the nuisances of its fold.
    pub plugin: Vec<f64>,
    /// Nuisance set of fold `k` at index `k - 1`.
    pub nuisances: Vec<NuisanceSet>,
    pub report: RunReport,
}

/// Row indices, pseudo-outcomes, plug-in differences, nuisances and report
/// of one fold.
type FoldOutput = (Vec<usize>, Vec<f64>, Vec<f64>, NuisanceSet, FoldReport);

/// Run the per-fold loop. Folds are processed in parallel; fold `k` uses the
/// seed `derive_seed(seed, [FOLD, k])`.
pub fn cross_fit(data: &Dataset, k: usize, fitter: &dyn NuisanceFitter, seed: u64) -> Result<CrossFit> {
    if data.len() < 2 * k {
        return Err(CdteError::config(format!(
            "cross-fitting with K = {k} needs n >= 2K, got n = {}",
            data.len()
        )));
    }
    let folds = assign_folds(data.len(), k)?;
    let spec = fitter.spec();
    let per_fold: Vec<FoldOutput> = (1..=k)
        .into_par_iter()
        .map(|fold| -> Result<_> {
            let run = || -> Result<_> {
                let (train, eval) = split(data, &folds, fold)?;
                let nuis = fitter.fit(&train, fold, derive_seed(seed, &[stream::FOLD, fold as u64]))?;
                let counters = Counters::new();
                let rows: Vec<(f64, f64, f64, Option<f64>)> = eval
                    .rows()
                    .par_iter()
                    .map(|z| -> Result<_> {
                        let psi = pseudo_outcome(z, &nuis, &counters)?;
                        let plugin = nuis.plugin(&z.x)?;
                        let e = nuis.propensity.predict_proba(&z.x);
                        let nu_a = nuis.nu(z.a, &z.x)?;
                        let pinball = match spec {
                            StatisticSpec::Quantile { tau } | StatisticSpec::SuperQuantile { tau } => nuis.arms
                                [usize::from(z.a)]
                            .quantile(&z.x, &nu_a)
                            .map(|q| pinball_loss(z.y, q, tau)),
                            _ => None,
                        };
                        Ok((psi, plugin, log_loss(e, z.a), pinball))
                    })
                    .collect::<Result<_>>()?;
                let n_eval = rows.len() as f64;
                let pinballs: Vec<f64> = rows.iter().filter_map(|r| r.3).collect();
                let report = FoldReport {
                    fold,
                    n_train: train.len(),
                    n_eval: rows.len(),
                    propensity_log_loss: rows.iter().map(|r| r.2).sum::<f64>() / n_eval,
                    quantile_pinball_loss: (!pinballs.is_empty())
                        .then(|| pinballs.iter().sum::<f64>() / pinballs.len() as f64),
                    counters: counters.snapshot(),
                };
                Ok((
                    folds.members(fold),
                    rows.iter().map(|r| r.0).collect(),
                    rows.iter().map(|r| r.1).collect(),
                    nuis,
                    report,
                ))
            };
            run().map_err(|e| e.in_fold(fold))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<_>>()?;

    let n = data.len();
    let mut values = vec![0.0; n];
    let mut fold_of = vec![0; n];
    let mut plugin = vec![0.0; n];
    let mut nuisances = Vec::with_capacity(k);
    let mut reports = Vec::with_capacity(k);
    for (fold, (members, psi, plug, nuis, report)) in per_fold.into_iter().enumerate() {
        for ((i, p), q) in members.into_iter().zip(psi).zip(plug) {
            values[i] = p;
            plugin[i] = q;
            fold_of[i] = fold + 1;
        }
        nuisances.push(nuis);
        reports.push(report);
    }
    Ok(CrossFit {
        pseudo: PseudoOutcomes { values, fold_of },
        plugin,
        nuisances,
        report: summarize(&reports, &[]),
    })
}

/// Final-stage regression of the cross-fitted targets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "features", rename_all = "lowercase")]
pub enum FinalStage {
    /// OLS on `phi(X)`; also yields projection inference.
    Ols(FeatureMap),
    /// Random forest on the raw covariates.
    Forest,
}

#[derive(Clone)]
pub enum FinalModel {
    /// `coef' phi(x)`.
    Linear {
        coef: Vec<f64>,
        feature_map: FeatureMap,
    },
    Regression(Arc<dyn Regressor>),
    /// Mean over folds of `kappa_1 - kappa_0`: the unsmoothed plug-in.
    FoldAverage(Vec<NuisanceSet>),
}

impl std::fmt::Debug for FinalModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FinalModel::Linear { coef, feature_map } => f
                .debug_struct("Linear")
                .field("coef", coef)
                .field("feature_map", feature_map)
                .finish(),
            FinalModel::Regression(m) => write!(f, "Regression(n_train = {})", m.n_train()),
            FinalModel::FoldAverage(sets) => write!(f, "FoldAverage({} folds)", sets.len()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct FittedCdte {
    pub spec: StatisticSpec,
    pub k: usize,
    pub final_model: FinalModel,
    /// The regression targets: pseudo-outcomes for the learner, plug-in
    /// differences for the plug-in baseline.
    pub targets: PseudoOutcomes,
    /// Present for OLS final stages.
    pub projection: Option<ProjectionResult>,
    pub diagnostics: RunReport,
}

impl FittedCdte {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        match &self.final_model {
            FinalModel::Linear { coef, feature_map } => {
                Ok(coef.iter().zip(feature_map.apply(x)).map(|(c, f)| c * f).sum())
            }
            FinalModel::Regression(model) => Ok(model.predict(x)),
            FinalModel::FoldAverage(sets) => {
                let mut total = 0.0;
                for s in sets {
                    total += s.plugin(x)?;
                }
                Ok(total / sets.len() as f64)
            }
        }
    }

    pub fn predict_many(&self, xs: &[Vec<f64>]) -> Result<Vec<f64>> {
        xs.par_iter().map(|x| self.predict(x)).collect()
    }

    /// OLS projection of this fit's targets on `phi(X)`.
    pub fn project(&self, data: &Dataset, feature_map: &FeatureMap, level: f64) -> Result<ProjectionResult> {
        feature_map.validate(data.d())?;
        let phi: Vec<Vec<f64>> = data.rows().iter().map(|z| feature_map.apply(&z.x)).collect();
        ols_project_values(
            &self.targets.values,
            &phi,
            Some(&feature_map.names(data.feature_names())),
            level,
        )
    }
}

/// Seed of the final-stage regression for a root seed.
pub fn final_stage_seed(seed: u64) -> u64 {
    derive_seed(seed, &[stream::FINAL])
}

/// Fit the final stage on `targets`.
pub fn fit_final_stage(
    data: &Dataset,
    targets: &[f64],
    stage: &FinalStage,
    seed: u64,
) -> Result<(FinalModel, Option<ProjectionResult>)> {
    match stage {
        FinalStage::Ols(fm) => {
            fm.validate(data.d())?;
            let phi: Vec<Vec<f64>> = data.rows().iter().map(|z| fm.apply(&z.x)).collect();
            let proj = ols_project_values(targets, &phi, Some(&fm.names(data.feature_names())), DEFAULT_LEVEL)?;
            Ok((
                FinalModel::Linear {
                    coef: proj.coef.clone(),
                    feature_map: fm.clone(),
                },
                Some(proj),
            ))
        }
        FinalStage::Forest => Ok((
            FinalModel::Regression(fit_regressor(
                RegressorKind::Forest,
                &data.features(),
                targets,
                final_stage_seed(seed),
            )?),
            None,
        )),
    }
}

fn finish(
    spec: StatisticSpec,
    k: usize,
    data: &Dataset,
    targets: PseudoOutcomes,
    stage: &FinalStage,
    seed: u64,
    report: RunReport,
) -> Result<FittedCdte> {
    let (final_model, projection) = fit_final_stage(data, &targets.values, stage, seed)?;
    Ok(FittedCdte {
        spec,
        k,
        final_model,
        targets,
        projection,
        diagnostics: report,
    })
}

/// The CDTE learner with learners chosen by `config`.
pub fn cdte_learn(
    data: &Dataset,
    k: usize,
    spec: &StatisticSpec,
    config: &NuisanceConfig,
    final_stage: &FinalStage,
    seed: u64,
) -> Result<FittedCdte> {
    config.validate(spec)?;
    let fitter = ConfiguredFitter {
        spec: *spec,
        config: config.clone(),
    };
    cdte_learn_with(data, k, &fitter, final_stage, seed)
}

/// The CDTE learner with any nuisance fitter (e.g. analytic truth).
pub fn cdte_learn_with(
    data: &Dataset,
    k: usize,
    fitter: &dyn NuisanceFitter,
    final_stage: &FinalStage,
    seed: u64,
) -> Result<FittedCdte> {
    let cf = cross_fit(data, k, fitter, seed)?;
    finish(fitter.spec(), k, data, cf.pseudo, final_stage, seed, cf.report)
}

/// Learner and plug-in fits sharing one cross-fitting pass.
pub fn fits_from_cross_fit(
    data: &Dataset,
    k: usize,
    spec: StatisticSpec,
    cf: &CrossFit,
    stage: &FinalStage,
    seed: u64,
) -> Result<(FittedCdte, FittedCdte)> {
    let learner = finish(spec, k, data, cf.pseudo.clone(), stage, seed, cf.report.clone())?;
    let plugin = finish(spec, k, data, plugin_targets(cf), stage, seed, cf.report.clone())?;
    Ok((learner, plugin))
}

fn plugin_targets(cf: &CrossFit) -> PseudoOutcomes {
    PseudoOutcomes {
        values: cf.plugin.clone(),
        fold_of: cf.pseudo.fold_of.clone(),
    }
}

/// The unsmoothed plug-in from a cross-fitting pass.
pub fn raw_plugin(spec: StatisticSpec, k: usize, cf: &CrossFit) -> FittedCdte {
    FittedCdte {
        spec,
        k,
        final_model: FinalModel::FoldAverage(cf.nuisances.clone()),
        targets: plugin_targets(cf),
        projection: None,
        diagnostics: cf.report.clone(),
    }
}

/// The plug-in `kappa_1 - kappa_0`, optionally smoothed by a final-stage
/// regression of the cross-fitted differences on the covariates.
pub fn plugin_learn(
    data: &Dataset,
    k: usize,
    spec: &StatisticSpec,
    config: &NuisanceConfig,
    smoother: Option<&FinalStage>,
    seed: u64,
) -> Result<FittedCdte> {
    config.validate(spec)?;
    let fitter = ConfiguredFitter {
        spec: *spec,
        config: config.clone(),
    };
    let cf = cross_fit(data, k, &fitter, seed)?;
    match smoother {
        None => Ok(raw_plugin(*spec, k, &cf)),
        Some(stage) => finish(*spec, k, data, plugin_targets(&cf), stage, seed, cf.report),
    }
}
