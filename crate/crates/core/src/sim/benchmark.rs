//! Monte Carlo comparison of the CDTE learner against plug-in baselines on
//! the simulation design.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dgp::{sample_dgp, Dgp};
use super::truth::true_multiplier;
use crate::crossfit::{
    cross_fit, fits_from_cross_fit, raw_plugin, ConfiguredFitter, FinalStage, NuisanceConfig, Variant,
};
use crate::diagnostics::{summarize, Failure, RunReport};
use crate::error::{CdteError, Result};
use crate::inference::{true_projection_coef, FeatureMap};
use crate::rng::{child_rng, derive_seed, rng_from_seed};
use crate::statistics::StatisticSpec;
use crate::util::{fmt_f64, mean, sample_variance};

/// Index of the `x1` coefficient in the linear projection `(1, x0, x1, ...)`.
pub const X1_COEF: usize = 2;

/// Eval points are drawn from this seed unless configured otherwise, so the
/// evaluation set stays fixed across root seeds.
pub const DEFAULT_EVAL_SEED: u64 = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageKind {
    Ols,
    Forest,
}

impl StageKind {
    pub fn label(self) -> &'static str {
        match self {
            StageKind::Ols => "ols",
            StageKind::Forest => "rf",
        }
    }

    pub fn final_stage(self) -> FinalStage {
        match self {
            StageKind::Ols => FinalStage::Ols(FeatureMap::Linear),
            StageKind::Forest => FinalStage::Forest,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub spec: StatisticSpec,
    pub dgp: Dgp,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub eval_points: usize,
    pub variant: Variant,
    /// Final stages run for both the learner and the smoothed plug-in.
    pub final_stages: Vec<StageKind>,
    pub folds: usize,
    pub seed: u64,
    pub eval_seed: u64,
    /// Covariate draws for the true projection coefficient.
    pub projection_draws: usize,
}

impl BenchmarkConfig {
    /// Desk-scale defaults for `spec`; KL risk gets the capped design.
    pub fn desk(spec: StatisticSpec) -> Self {
        let dgp = match spec {
            StatisticSpec::KlRisk { .. } => Dgp::capped(),
            _ => Dgp::default(),
        };
        BenchmarkConfig {
            spec,
            dgp,
            n_grid: vec![200, 800, 3200],
            reps: 20,
            eval_points: 500,
            variant: Variant::Flexible,
            final_stages: vec![StageKind::Ols, StageKind::Forest],
            folds: 5,
            seed: 0,
            eval_seed: DEFAULT_EVAL_SEED,
            projection_draws: 1_000_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.dgp.validate()?;
        NuisanceConfig::variant(&self.spec, self.variant)?;
        if self.reps == 0 {
            return Err(CdteError::config("reps must be at least 1"));
        }
        if self.eval_points == 0 {
            return Err(CdteError::config("eval_points must be at least 1"));
        }
        if self.n_grid.is_empty() {
            return Err(CdteError::config("n_grid must not be empty"));
        }
        if self.folds < 2 {
            return Err(CdteError::config(format!(
                "folds must be at least 2, got {}",
                self.folds
            )));
        }
        if let Some(&n) = self.n_grid.iter().find(|&&n| n < 2 * self.folds) {
            return Err(CdteError::config(format!(
                "n_grid entry {n} is below 2 * folds = {}",
                2 * self.folds
            )));
        }
        if self.projection_draws == 0 {
            return Err(CdteError::config("projection_draws must be at least 1"));
        }
        Ok(())
    }

    /// Estimator labels in output order.
    pub fn estimators(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .final_stages
            .iter()
            .map(|s| format!("cdte+{}", s.label()))
            .collect();
        out.push("plugin".into());
        out.extend(self.final_stages.iter().map(|s| format!("plugin+{}", s.label())));
        out
    }
}

/// One estimator's error in one replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepRecord {
    pub estimator: String,
    pub n: usize,
    pub rep: usize,
    pub mse: f64,
    /// Whether the `x1` interval covered the true projection coefficient;
    /// OLS final stages only.
    pub covered: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: String,
    pub n: usize,
    pub reps: usize,
    pub mean_mse: f64,
    /// Standard error of `mean_mse` across replications.
    pub se_mse: f64,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkResult {
    pub config: BenchmarkConfig,
    /// `M` in the true effect `M (exp(x0 + x1) - exp(x0))`.
    pub multiplier: f64,
    /// True `x1` coefficient of the linear projection of the effect.
    pub true_x1_coef: f64,
    pub records: Vec<RepRecord>,
    pub summary: Vec<EstimatorSummary>,
    pub report: RunReport,
}

impl BenchmarkResult {
    pub fn summary_for(&self, estimator: &str, n: usize) -> Option<&EstimatorSummary> {
        self.summary.iter().find(|s| s.estimator == estimator && s.n == n)
    }

    /// Fraction of replications at `n` in which `a` had lower MSE than `b`.
    pub fn paired_win_rate(&self, a: &str, b: &str, n: usize) -> Option<f64> {
        let mses = |e: &str| -> Vec<(usize, f64)> {
            self.records
                .iter()
                .filter(|r| r.estimator == e && r.n == n)
                .map(|r| (r.rep, r.mse))
                .collect()
        };
        let (ra, rb) = (mses(a), mses(b));
        let pairs: Vec<bool> = ra
            .iter()
            .filter_map(|(rep, ma)| rb.iter().find(|(r, _)| r == rep).map(|(_, mb)| ma < mb))
            .collect();
        (!pairs.is_empty()).then(|| pairs.iter().filter(|&&w| w).count() as f64 / pairs.len() as f64)
    }

    /// Spearman correlation between `n` and mean MSE over the grid.
    pub fn mse_trend(&self, estimator: &str) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .summary
            .iter()
            .filter(|s| s.estimator == estimator)
            .map(|s| (s.n as f64, s.mean_mse))
            .collect();
        (pts.len() >= 2).then(|| spearman(&pts))
    }

    /// Long-format CSV: `estimator,n,rep,mse`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("estimator,n,rep,mse\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{},{}\n", r.estimator, r.n, r.rep, fmt_f64(r.mse)));
        }
        out
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(pts: &[(f64, f64)]) -> f64 {
    let a = ranks(&pts.iter().map(|p| p.0).collect::<Vec<_>>());
    let b = ranks(&pts.iter().map(|p| p.1).collect::<Vec<_>>());
    let (ma, mb) = (mean(&a), mean(&b));
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Seed streams under the root seed.
mod stream {
    pub const REP: u64 = 0;
    pub const DATA: u64 = 1;
    pub const PROJECTION: u64 = 2;
}

struct Setup {
    eval_x: Vec<Vec<f64>>,
    truth: Vec<f64>,
    true_x1: f64,
}

fn mse(pred: &[f64], truth: &[f64]) -> f64 {
    pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / truth.len() as f64
}

fn run_rep(
    cfg: &BenchmarkConfig,
    nuisance: &NuisanceConfig,
    setup: &Setup,
    n: usize,
    rep: usize,
) -> Result<(Vec<RepRecord>, RunReport)> {
    let seed = derive_seed(cfg.seed, &[stream::REP, n as u64, rep as u64]);
    let data = sample_dgp(&cfg.dgp, n, &mut child_rng(seed, &[stream::DATA]));
    let fitter = ConfiguredFitter {
        spec: cfg.spec,
        config: nuisance.clone(),
    };
    let cf = cross_fit(&data, cfg.folds, &fitter, seed)?;
    let record = |estimator: String, pred: Vec<f64>, covered: Option<bool>| RepRecord {
        estimator,
        n,
        rep,
        mse: mse(&pred, &setup.truth),
        covered,
    };
    let mut learners = Vec::new();
    let mut smoothed = Vec::new();
    for stage in &cfg.final_stages {
        let (learner, plugin) = fits_from_cross_fit(&data, cfg.folds, cfg.spec, &cf, &stage.final_stage(), seed)?;
        let cover =
            |fit: &crate::crossfit::FittedCdte| fit.projection.as_ref().map(|p| p.covers(X1_COEF, setup.true_x1));
        learners.push(record(
            format!("cdte+{}", stage.label()),
            learner.predict_many(&setup.eval_x)?,
            cover(&learner),
        ));
        smoothed.push(record(
            format!("plugin+{}", stage.label()),
            plugin.predict_many(&setup.eval_x)?,
            cover(&plugin),
        ));
    }
    let raw = raw_plugin(cfg.spec, cfg.folds, &cf);
    learners.push(record("plugin".into(), raw.predict_many(&setup.eval_x)?, None));
    learners.extend(smoothed);
    Ok((learners, cf.report))
}

/// Run every `(n, rep)` cell. Replications run in parallel; a failed
/// replication is logged, recorded in the report and left out of the
/// summaries.
pub fn run_benchmark(cfg: &BenchmarkConfig) -> Result<BenchmarkResult> {
    cfg.validate()?;
    let nuisance = NuisanceConfig::variant(&cfg.spec, cfg.variant)?;
    let multiplier = true_multiplier(&cfg.dgp, &cfg.spec)?;
    let dgp = cfg.dgp;
    let truth_at = |x: &[f64]| multiplier * (dgp.location(x, 1).exp() - dgp.location(x, 0).exp());

    let mut eval_rng = rng_from_seed(cfg.eval_seed);
    let eval_x: Vec<Vec<f64>> = (0..cfg.eval_points).map(|_| dgp.sample_x(&mut eval_rng)).collect();
    let truth: Vec<f64> = eval_x.iter().map(|x| truth_at(x)).collect();
    let coef = true_projection_coef(
        truth_at,
        &FeatureMap::Linear,
        |rng| dgp.sample_x(rng),
        cfg.projection_draws,
        derive_seed(cfg.eval_seed, &[stream::PROJECTION]),
    )?;
    let setup = Setup {
        eval_x,
        truth,
        true_x1: coef[X1_COEF],
    };

    let cells: Vec<(usize, usize)> = cfg
        .n_grid
        .iter()
        .flat_map(|&n| (0..cfg.reps).map(move |rep| (n, rep)))
        .collect();
    let outcomes: Vec<Result<(Vec<RepRecord>, RunReport)>> = cells
        .par_iter()
        .map(|&(n, rep)| run_rep(cfg, &nuisance, &setup, n, rep))
        .collect();

    let mut records = Vec::new();
    let mut folds = Vec::new();
    let mut failures = Vec::new();
    for ((n, rep), outcome) in cells.iter().zip(outcomes) {
        match outcome {
            Ok((recs, report)) => {
                records.extend(recs);
                folds.extend(report.folds);
            }
            Err(e) => {
                warn!("replication {rep} at n = {n} failed and is excluded: {e}");
                failures.push(Failure {
                    rep: *rep,
                    error: format!("n = {n}: {e}"),
                });
            }
        }
    }

    let mut summary = Vec::new();
    for &n in &cfg.n_grid {
        for est in cfg.estimators() {
            let rows: Vec<&RepRecord> = records.iter().filter(|r| r.n == n && r.estimator == est).collect();
            if rows.is_empty() {
                continue;
            }
            let mses: Vec<f64> = rows.iter().map(|r| r.mse).collect();
            let covers: Vec<bool> = rows.iter().filter_map(|r| r.covered).collect();
            summary.push(EstimatorSummary {
                estimator: est,
                n,
                reps: rows.len(),
                mean_mse: mean(&mses),
                se_mse: if mses.len() > 1 {
                    (sample_variance(&mses) / mses.len() as f64).sqrt()
                } else {
                    0.0
                },
                coverage: (!covers.is_empty())
                    .then(|| covers.iter().filter(|&&c| c).count() as f64 / covers.len() as f64),
            });
        }
    }

    Ok(BenchmarkResult {
        config: cfg.clone(),
        multiplier,
        true_x1_coef: setup.true_x1,
        records,
        summary,
        report: summarize(&folds, &failures),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke_config() -> BenchmarkConfig {
        BenchmarkConfig {
            n_grid: vec![200],
            reps: 1,
            eval_points: 50,
            projection_draws: 20_000,
            seed: 3,
            ..BenchmarkConfig::desk(StatisticSpec::SuperQuantile { tau: 0.75 })
        }
    }

    #[test]
    fn smoke_run_is_finite_and_complete() {
        let r = run_benchmark(&smoke_config()).unwrap();
        assert!(r.report.failures.is_empty());
        assert_eq!(r.records.len(), 5);
        assert!(r.records.iter().all(|x| x.mse.is_finite() && x.mse >= 0.0));
        let est: Vec<&str> = r.records.iter().map(|x| x.estimator.as_str()).collect();
        assert_eq!(est, ["cdte+ols", "cdte+rf", "plugin", "plugin+ols", "plugin+rf"]);
        assert!(r.summary_for("cdte+ols", 200).unwrap().coverage.is_some());
        assert!(r.summary_for("plugin", 200).unwrap().coverage.is_none());
        assert!(r.to_csv().starts_with("estimator,n,rep,mse\n"));
    }

    #[test]
    fn true_propensity_never_clips() {
        use crate::sim::{sample_dgp, OracleFitter};
        let dgp = Dgp::default();
        let data = sample_dgp(&dgp, 2000, &mut rng_from_seed(8));
        let fitter = OracleFitter {
            dgp,
            spec: StatisticSpec::SuperQuantile { tau: 0.75 },
        };
        let cf = cross_fit(&data, 5, &fitter, 1).unwrap();
        assert_eq!(cf.report.counters.propensity_clips, 0);
        assert_eq!(cf.report.folds.len(), 5);
    }

    #[test]
    fn reproducible() {
        let a = run_benchmark(&smoke_config()).unwrap();
        let b = run_benchmark(&smoke_config()).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn failed_replications_are_recorded() {
        // with K = 5 and n = 10 some training split ends up with under two
        // rows of an arm
        let cfg = BenchmarkConfig {
            n_grid: vec![10],
            reps: 6,
            ..smoke_config()
        };
        let r = run_benchmark(&cfg).unwrap();
        assert!(!r.report.failures.is_empty());
        for f in &r.report.failures {
            assert!(f.error.starts_with("n = 10"));
        }
        let ok = r.summary_for("plugin", 10).map_or(0, |s| s.reps);
        assert_eq!(ok + r.report.failures.len(), 6);
    }

    #[test]
    fn invalid_configs() {
        let mut c = smoke_config();
        c.reps = 0;
        assert!(run_benchmark(&c).is_err());
        let mut c = smoke_config();
        c.n_grid = vec![5];
        assert!(run_benchmark(&c).is_err());
        let mut c = smoke_config();
        c.spec = StatisticSpec::KlRisk { delta: 1.0 };
        c.variant = Variant::Misspecified;
        assert!(run_benchmark(&c).is_err());
    }

    #[test]
    fn spearman_of_monotone_sequences() {
        assert!((spearman(&[(1.0, 3.0), (2.0, 2.0), (3.0, 1.0)]) + 1.0).abs() < 1e-12);
        assert!((spearman(&[(1.0, 1.0), (2.0, 5.0), (3.0, 9.0)]) - 1.0).abs() < 1e-12);
    }
}
