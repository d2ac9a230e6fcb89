//! TOML run configuration for `cdte simulate`.
//!
//! Unknown keys are rejected and every value is validated before any
//! computation; messages name the offending field, e.g. `statistic.tau`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::crossfit::Variant;
use crate::error::{CdteError, Result};
use crate::sim::{tau_grid, BenchmarkConfig, Dgp, RiskProfileConfig, StageKind, DEFAULT_EVAL_SEED};
use crate::statistics::StatisticSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatisticKind {
    Mean,
    Quantile,
    Superquantile,
    Klrisk,
}

/// `[statistic]`. The KL risk takes either `delta` or a level `tau`, which
/// maps to `delta = -ln(1 - tau)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatisticSection {
    pub kind: StatisticKind,
    pub tau: Option<f64>,
    pub delta: Option<f64>,
}

fn field(name: &str, msg: impl std::fmt::Display) -> CdteError {
    CdteError::Config(format!("`{name}` {msg}"))
}

/// Build a spec from a kind and optional level / radius; `prefix` is used in
/// error messages (`statistic.` for config files, `--` for flags).
pub fn spec_from_parts(
    kind: StatisticKind,
    tau: Option<f64>,
    delta: Option<f64>,
    prefix: &str,
) -> Result<StatisticSpec> {
    let tau_name = format!("{prefix}tau");
    let delta_name = format!("{prefix}delta");
    let check_tau = |t: f64| {
        if t > 0.0 && t < 1.0 {
            Ok(t)
        } else {
            Err(field(&tau_name, format!("must lie in (0, 1), got {t}")))
        }
    };
    let need_tau = || tau.ok_or_else(|| field(&tau_name, "is required for this statistic"));
    match kind {
        StatisticKind::Mean => {
            if tau.is_some() || delta.is_some() {
                return Err(field(&tau_name, "and delta do not apply to the mean"));
            }
            Ok(StatisticSpec::Mean)
        }
        StatisticKind::Quantile => Ok(StatisticSpec::Quantile {
            tau: check_tau(need_tau()?)?,
        }),
        StatisticKind::Superquantile => Ok(StatisticSpec::SuperQuantile {
            tau: check_tau(need_tau()?)?,
        }),
        StatisticKind::Klrisk => match (tau, delta) {
            (Some(_), Some(_)) => Err(field(
                &delta_name,
                format!("conflicts with {tau_name}; give one of them"),
            )),
            (None, None) => Err(field(&delta_name, "is required for klrisk (or give tau)")),
            (Some(t), None) => Ok(StatisticSpec::KlRisk {
                delta: -(1.0 - check_tau(t)?).ln(),
            }),
            (None, Some(d)) => {
                if d >= 0.0 && d.is_finite() {
                    Ok(StatisticSpec::KlRisk { delta: d })
                } else {
                    Err(field(&delta_name, format!("must be finite and >= 0, got {d}")))
                }
            }
        },
    }
}

impl StatisticSection {
    pub fn spec(&self) -> Result<StatisticSpec> {
        spec_from_parts(self.kind, self.tau, self.delta, "statistic.")
    }
}

/// `[benchmark]`; omitted keys take the desk-scale defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkSection {
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub eval_points: usize,
    pub variant: Variant,
    pub final_stages: Vec<StageKind>,
    pub folds: usize,
    pub eval_seed: u64,
    pub projection_draws: usize,
}

impl Default for BenchmarkSection {
    fn default() -> Self {
        let d = BenchmarkConfig::desk(StatisticSpec::Mean);
        BenchmarkSection {
            n_grid: d.n_grid,
            reps: d.reps,
            eval_points: d.eval_points,
            variant: d.variant,
            final_stages: d.final_stages,
            folds: d.folds,
            eval_seed: DEFAULT_EVAL_SEED,
            projection_draws: d.projection_draws,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauGrid {
    pub start: f64,
    pub end: f64,
    pub count: usize,
}

/// `[risk_profile]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskProfileSection {
    pub mu: f64,
    pub sigma: f64,
    pub cap: f64,
    /// Explicit levels; overrides `grid`.
    pub taus: Option<Vec<f64>>,
    pub grid: TauGrid,
    pub samples: usize,
}

impl Default for RiskProfileSection {
    fn default() -> Self {
        let d = RiskProfileConfig::default();
        RiskProfileSection {
            mu: d.mu,
            sigma: d.sigma,
            cap: d.cap,
            taus: None,
            grid: TauGrid {
                start: 0.01,
                end: 0.99,
                count: 50,
            },
            samples: d.samples,
        }
    }
}

/// `[output]`: files are written under `dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
}

/// An acceptance check evaluated after the run; `[[checks]]` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Check {
    /// Mean MSE of `estimator` strictly below that of `baseline` at `n`.
    MseBelow {
        estimator: String,
        baseline: String,
        n: usize,
    },
    CoverageAtLeast {
        estimator: String,
        n: usize,
        min: f64,
    },
    CoverageAtMost {
        estimator: String,
        n: usize,
        max: f64,
    },
    /// Spearman correlation of mean MSE with `n` is negative.
    MseDecreasing {
        estimator: String,
    },
    /// quantile <= superquantile <= EVaR at every level.
    Ordering,
    /// Each column is nondecreasing in the level and bounded by the cap.
    MonotoneToCap,
    /// The quantile at level 0.5 lies within `tol` of `target`.
    MedianNear {
        target: f64,
        tol: f64,
    },
}

impl Check {
    fn for_benchmark(&self) -> bool {
        matches!(
            self,
            Check::MseBelow { .. }
                | Check::CoverageAtLeast { .. }
                | Check::CoverageAtMost { .. }
                | Check::MseDecreasing { .. }
        )
    }
}

/// A parsed `cdte simulate` configuration. Exactly one of `benchmark` and
/// `risk_profile` is present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub seed: u64,
    pub statistic: Option<StatisticSection>,
    pub benchmark: Option<BenchmarkSection>,
    pub dgp: Option<Dgp>,
    pub risk_profile: Option<RiskProfileSection>,
    pub output: OutputSection,
    #[serde(default)]
    pub checks: Vec<Check>,
}

/// What a validated configuration asks for.
#[derive(Debug, Clone, PartialEq)]
pub enum Job {
    Benchmark(BenchmarkConfig),
    RiskProfile(RiskProfileConfig),
}

impl SimulateConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CdteError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CdteError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CdteError::Config(format!("{}: {e}", path.display())))
    }

    /// Validate every section and resolve the job.
    pub fn job(&self) -> Result<Job> {
        match (&self.benchmark, &self.risk_profile) {
            (Some(b), None) => {
                let spec = self
                    .statistic
                    .as_ref()
                    .ok_or_else(|| field("statistic", "section is required for a benchmark"))?
                    .spec()?;
                let mut cfg = BenchmarkConfig::desk(spec);
                if let Some(dgp) = self.dgp {
                    cfg.dgp = dgp;
                }
                cfg.n_grid = b.n_grid.clone();
                cfg.reps = b.reps;
                cfg.eval_points = b.eval_points;
                cfg.variant = b.variant;
                cfg.final_stages = b.final_stages.clone();
                cfg.folds = b.folds;
                cfg.seed = self.seed;
                cfg.eval_seed = b.eval_seed;
                cfg.projection_draws = b.projection_draws;
                self.check_benchmark(&cfg)?;
                cfg.validate()?;
                if let Some(c) = self.checks.iter().find(|c| !c.for_benchmark()) {
                    return Err(field("checks", format!("entry {c:?} does not apply to a benchmark")));
                }
                let names = cfg.estimators();
                for c in &self.checks {
                    self.check_estimators(c, &names, &cfg.n_grid)?;
                }
                Ok(Job::Benchmark(cfg))
            }
            (None, Some(r)) => {
                if self.statistic.is_some() || self.dgp.is_some() {
                    return Err(field("statistic", "and dgp do not apply to a risk profile"));
                }
                if let Some(c) = self.checks.iter().find(|c| c.for_benchmark()) {
                    return Err(field("checks", format!("entry {c:?} does not apply to a risk profile")));
                }
                let taus = match &r.taus {
                    Some(t) => t.clone(),
                    None => {
                        let g = r.grid;
                        if g.count == 0 || !(g.start > 0.0 && g.end < 1.0 && g.start <= g.end) {
                            return Err(field(
                                "risk_profile.grid",
                                format!("needs 0 < start <= end < 1 and count >= 1, got {g:?}"),
                            ));
                        }
                        tau_grid(g.start, g.end, g.count)
                    }
                };
                if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
                    return Err(field("risk_profile.taus", format!("must lie in (0, 1), got {t}")));
                }
                let cfg = RiskProfileConfig {
                    mu: r.mu,
                    sigma: r.sigma,
                    cap: r.cap,
                    taus,
                    samples: r.samples,
                    seed: self.seed,
                };
                cfg.validate().map_err(|e| {
                    field(
                        "risk_profile",
                        e.to_string().trim_start_matches("configuration error: "),
                    )
                })?;
                Ok(Job::RiskProfile(cfg))
            }
            (Some(_), Some(_)) => Err(field("benchmark", "and risk_profile are mutually exclusive")),
            (None, None) => Err(field("benchmark", "or risk_profile section is required")),
        }
    }

    fn check_benchmark(&self, cfg: &BenchmarkConfig) -> Result<()> {
        let b = "benchmark.";
        if cfg.reps == 0 {
            return Err(field(&format!("{b}reps"), "must be at least 1"));
        }
        if cfg.eval_points == 0 {
            return Err(field(&format!("{b}eval_points"), "must be at least 1"));
        }
        if cfg.folds < 2 {
            return Err(field(
                &format!("{b}folds"),
                format!("must be at least 2, got {}", cfg.folds),
            ));
        }
        if cfg.n_grid.is_empty() {
            return Err(field(&format!("{b}n_grid"), "must not be empty"));
        }
        if let Some(n) = cfg.n_grid.iter().find(|&&n| n < 2 * cfg.folds) {
            return Err(field(
                &format!("{b}n_grid"),
                format!("entry {n} is below 2 * folds = {}", 2 * cfg.folds),
            ));
        }
        if cfg.final_stages.is_empty() {
            return Err(field(&format!("{b}final_stages"), "must not be empty"));
        }
        Ok(())
    }

    fn check_estimators(&self, c: &Check, names: &[String], grid: &[usize]) -> Result<()> {
        let known = |e: &str| -> Result<()> {
            if names.iter().any(|n| n == e) {
                Ok(())
            } else {
                Err(field(
                    "checks",
                    format!("unknown estimator `{e}`; expected one of {names:?}"),
                ))
            }
        };
        let in_grid = |n: usize| -> Result<()> {
            if grid.contains(&n) {
                Ok(())
            } else {
                Err(field("checks", format!("n = {n} is not in benchmark.n_grid")))
            }
        };
        match c {
            Check::MseBelow { estimator, baseline, n } => {
                known(estimator)?;
                known(baseline)?;
                in_grid(*n)
            }
            Check::CoverageAtLeast { estimator, n, .. } | Check::CoverageAtMost { estimator, n, .. } => {
                if !estimator.ends_with("+ols") {
                    return Err(field(
                        "checks",
                        format!("coverage is only recorded for OLS stages, not `{estimator}`"),
                    ));
                }
                known(estimator)?;
                in_grid(*n)
            }
            Check::MseDecreasing { estimator } => known(estimator),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BENCH: &str = r#"
seed = 7
[statistic]
kind = "superquantile"
tau = 0.75
[benchmark]
n_grid = [200]
reps = 2
[output]
dir = "out"
[[checks]]
kind = "mse_below"
estimator = "cdte+rf"
baseline = "plugin"
n = 200
"#;

    #[test]
    fn benchmark_config_resolves_with_defaults() {
        let c = SimulateConfig::parse(BENCH).unwrap();
        let Job::Benchmark(b) = c.job().unwrap() else { panic!() };
        assert_eq!(b.spec, StatisticSpec::SuperQuantile { tau: 0.75 });
        assert_eq!(b.reps, 2);
        assert_eq!(b.eval_points, 500);
        assert_eq!(b.folds, 5);
        assert_eq!(b.seed, 7);
        assert_eq!(c.checks.len(), 1);
    }

    #[test]
    fn bad_tau_names_the_field() {
        let c = SimulateConfig::parse(&BENCH.replace("tau = 0.75", "tau = 1.5")).unwrap();
        let e = c.job().unwrap_err().to_string();
        assert!(e.contains("statistic.tau"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = SimulateConfig::parse(&BENCH.replace("reps = 2", "reps = 2\nrepz = 3")).unwrap_err();
        assert!(e.to_string().contains("repz"), "{e}");
        let e = SimulateConfig::parse(&format!("{BENCH}\n[extra]\na = 1\n")).unwrap_err();
        assert!(e.to_string().contains("extra"), "{e}");
    }

    #[test]
    fn checks_must_name_known_estimators_and_sizes() {
        let c = SimulateConfig::parse(&BENCH.replace("baseline = \"plugin\"", "baseline = \"oracle\"")).unwrap();
        assert!(c.job().unwrap_err().to_string().contains("oracle"));
        let c = SimulateConfig::parse(&BENCH.replace("n = 200", "n = 300")).unwrap();
        assert!(c.job().unwrap_err().to_string().contains("300"));
    }

    #[test]
    fn klrisk_accepts_level_or_radius() {
        let s = spec_from_parts(StatisticKind::Klrisk, Some(0.75), None, "").unwrap();
        assert_eq!(s, StatisticSpec::KlRisk { delta: -(0.25f64).ln() });
        assert!(spec_from_parts(StatisticKind::Klrisk, Some(0.75), Some(1.0), "").is_err());
        assert!(spec_from_parts(StatisticKind::Klrisk, None, Some(-1.0), "--")
            .unwrap_err()
            .to_string()
            .contains("--delta"));
        assert!(spec_from_parts(StatisticKind::Quantile, None, None, "").is_err());
    }

    #[test]
    fn risk_profile_config() {
        let text = r#"
seed = 3
[risk_profile]
samples = 1000
[output]
dir = "out"
[[checks]]
kind = "ordering"
"#;
        let c = SimulateConfig::parse(text).unwrap();
        let Job::RiskProfile(r) = c.job().unwrap() else {
            panic!()
        };
        assert_eq!(r.taus.len(), 50);
        assert_eq!(r.cap, 6.0);
        assert_eq!(r.seed, 3);
        let bad = text.replace(
            "kind = \"ordering\"",
            "kind = \"mse_decreasing\"\nestimator = \"plugin\"",
        );
        assert!(SimulateConfig::parse(&bad).unwrap().job().is_err());
        let bad = text.replace("samples = 1000", "samples = 1000\ntaus = [0.5, 1.2]");
        let e = SimulateConfig::parse(&bad).unwrap().job().unwrap_err().to_string();
        assert!(e.contains("risk_profile.taus"), "{e}");
    }

    #[test]
    fn exactly_one_job() {
        let both = format!("{BENCH}\n[risk_profile]\n");
        assert!(SimulateConfig::parse(&both).unwrap().job().is_err());
        let none = "[output]\ndir = \"o\"\n";
        assert!(SimulateConfig::parse(none).unwrap().job().is_err());
    }

    #[test]
    fn bundled_configs_validate() {
        let files = [
            include_str!("../../configs/csqte_desk.toml"),
            include_str!("../../configs/cqte_flexible.toml"),
            include_str!("../../configs/cqte_misspecified.toml"),
            include_str!("../../configs/cqte_slow.toml"),
            include_str!("../../configs/cklrte_flexible.toml"),
            include_str!("../../configs/cklrte_slow.toml"),
            include_str!("../../configs/figure1.toml"),
        ];
        for text in files {
            SimulateConfig::parse(text).unwrap().job().unwrap();
        }
    }
}
