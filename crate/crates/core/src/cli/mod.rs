//! Command-line interface: argument definitions and the three commands.
//!
//! Every command writes its outputs atomically and a diagnostics JSON file
//! next to them. [`run`] returns `Ok(false)` when a configured check failed or
//! a replication errored, which the binary maps to exit status 1.

pub mod config;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::crossfit::{
    cdte_learn, DensityConfig, EvarMethod, FinalStage, MeanMethod, NuisanceConfig, PropensityModel,
    SuperquantileMethod, DEFAULT_LEVEL,
};
use crate::dataset::{load_csv, Dataset};
use crate::diagnostics::RunReport;
use crate::error::{CdteError, Result};
use crate::inference::FeatureMap;
use crate::learners::{QuantileMethod, RegressorKind};
use crate::rng::rng_from_seed;
use crate::sim::{profile_csv, risk_profile, run_benchmark, tau_grid, BenchmarkResult, RiskProfileConfig, RiskRow};
use crate::statistics::StatisticSpec;
use crate::util::{fmt_f64, write_atomic};

use config::{spec_from_parts, Check, Job, SimulateConfig, StatisticKind};

#[derive(Debug, Parser)]
#[command(name = "cdte", version, about = "Conditional distributional treatment effects")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a benchmark or risk profile described by a TOML file.
    Simulate(SimulateArgs),
    /// Fit the learner on a CSV dataset.
    Fit(FitArgs),
    /// Quantile, superquantile and EVaR of a capped lognormal across levels.
    RiskProfile(RiskProfileArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `output.dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the top-level `seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PropensityArg {
    Logistic,
    Forest,
    Constant,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StageArg {
    Ols,
    Forest,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum QuantileArg {
    Forest,
    Linear,
    Kernel,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SuperquantileArg {
    Sqrf,
    TwoStageOls,
    Kernel,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EvarArg {
    ForestWeights,
    KernelWeights,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MeanArg {
    Ols,
    Forest,
    Kernel,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum StatisticArg {
    Mean,
    Quantile,
    Superquantile,
    Klrisk,
}

impl From<StatisticArg> for StatisticKind {
    fn from(s: StatisticArg) -> Self {
        match s {
            StatisticArg::Mean => StatisticKind::Mean,
            StatisticArg::Quantile => StatisticKind::Quantile,
            StatisticArg::Superquantile => StatisticKind::Superquantile,
            StatisticArg::Klrisk => StatisticKind::Klrisk,
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub outcome: String,
    #[arg(long)]
    pub treatment: String,
    /// Comma-separated covariate columns (default: every other column).
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    #[arg(long, value_enum)]
    pub statistic: StatisticArg,
    #[arg(long)]
    pub tau: Option<f64>,
    /// KL radius; for `klrisk` give this or `--tau` (`delta = -ln(1 - tau)`).
    #[arg(long)]
    pub delta: Option<f64>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for predictions.csv, projection.json and
    /// diagnostics.json.
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated covariates for the linear projection (default: all).
    #[arg(long, value_delimiter = ',')]
    pub project: Option<Vec<String>>,
    /// Confidence level of the projection intervals.
    #[arg(long, default_value_t = DEFAULT_LEVEL)]
    pub level: f64,
    #[arg(long, value_enum, default_value = "forest")]
    pub final_stage: StageArg,
    #[arg(long, value_enum, default_value = "logistic")]
    pub propensity: PropensityArg,
    /// Known propensity for `--propensity constant`.
    #[arg(long)]
    pub propensity_value: Option<f64>,
    #[arg(long, value_enum, default_value = "forest")]
    pub quantile: QuantileArg,
    #[arg(long, value_enum, default_value = "sqrf")]
    pub superquantile: SuperquantileArg,
    #[arg(long, value_enum, default_value = "forest-weights")]
    pub evar: EvarArg,
    #[arg(long, value_enum, default_value = "forest")]
    pub mean: MeanArg,
    /// Bandwidth multiplier of the density-at-quantile learner.
    #[arg(long, default_value_t = 1.0)]
    pub density_bandwidth: f64,
    /// Shuffle rows with the seed before assigning folds.
    #[arg(long)]
    pub shuffle: bool,
}

#[derive(Debug, Args)]
pub struct RiskProfileArgs {
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    pub mu: f64,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 6.0)]
    pub cap: f64,
    /// `start:end:count` or a comma-separated list.
    #[arg(long, default_value = "0.01:0.99:50")]
    pub taus: String,
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// CSV path; the diagnostics JSON goes next to it.
    #[arg(long)]
    pub out: PathBuf,
}

/// Outcome of one configured check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Verdict {
    pub label: String,
    pub pass: bool,
    pub detail: String,
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.label, if self.pass { "PASS" } else { "FAIL" })
    }
}

/// Run a parsed command line. `Ok(true)` means every check passed.
pub fn run(cli: Cli) -> Result<bool> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CdteError::config("`--threads` must be at least 1"));
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            warn!("thread pool already initialized: {e}");
        }
    }
    match cli.command {
        Command::Simulate(a) => simulate(&a),
        Command::Fit(a) => fit(&a).map(|()| true),
        Command::RiskProfile(a) => profile(&a).map(|()| true),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

/// `profile.csv` -> `profile.diagnostics.json`.
fn diagnostics_path(out: &Path) -> PathBuf {
    let stem = out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    out.with_file_name(format!("{stem}.diagnostics.json"))
}

pub fn simulate(args: &SimulateArgs) -> Result<bool> {
    let mut cfg = SimulateConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let dir = args.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    match cfg.job()? {
        Job::Benchmark(b) => {
            info!(
                "benchmark: {} ({}), n = {:?}, {} reps",
                b.spec.name(),
                b.variant,
                b.n_grid,
                b.reps
            );
            let result = run_benchmark(&b)?;
            let verdicts: Vec<Verdict> = cfg.checks.iter().map(|c| benchmark_check(c, &result)).collect();
            print_summary(&result);
            for v in &verdicts {
                println!("{v}");
            }
            let failures = result.report.failures.len();
            if failures > 0 {
                println!("failed replications: {failures}");
            }
            write_atomic(&dir.join("results.csv"), result.to_csv().as_bytes())?;
            write_json(
                &dir.join("summary.json"),
                &serde_json::json!({
                    "config": result.config,
                    "multiplier": result.multiplier,
                    "true_x1_coef": result.true_x1_coef,
                    "summary": result.summary,
                    "checks": verdicts,
                    "failed_replications": failures,
                }),
            )?;
            write_json(&dir.join("diagnostics.json"), &result.report)?;
            Ok(failures == 0 && verdicts.iter().all(|v| v.pass))
        }
        Job::RiskProfile(r) => {
            let rows = risk_profile(&r)?;
            let verdicts: Vec<Verdict> = cfg.checks.iter().map(|c| profile_check(c, &r, &rows)).collect();
            for v in &verdicts {
                println!("{v}");
            }
            write_atomic(&dir.join("profile.csv"), profile_csv(&rows).as_bytes())?;
            write_json(
                &dir.join("summary.json"),
                &serde_json::json!({ "config": r, "checks": verdicts }),
            )?;
            write_json(&dir.join("diagnostics.json"), &RunReport::default())?;
            Ok(verdicts.iter().all(|v| v.pass))
        }
    }
}

fn print_summary(result: &BenchmarkResult) {
    println!(
        "{:<12} {:>6} {:>5} {:>12} {:>12} {:>9}",
        "estimator", "n", "reps", "mean_mse", "se", "coverage"
    );
    for s in &result.summary {
        let cov = s.coverage.map(|c| format!("{c:.3}")).unwrap_or_else(|| "-".into());
        println!(
            "{:<12} {:>6} {:>5} {:>12.5} {:>12.5} {:>9}",
            s.estimator, s.n, s.reps, s.mean_mse, s.se_mse, cov
        );
    }
}

fn benchmark_check(check: &Check, r: &BenchmarkResult) -> Verdict {
    let missing = |label: String| Verdict {
        label,
        pass: false,
        detail: "no successful replications".into(),
    };
    match check {
        Check::MseBelow { estimator, baseline, n } => {
            let label = format!("{estimator}_mse < {baseline}_mse at n={n}");
            match (r.summary_for(estimator, *n), r.summary_for(baseline, *n)) {
                (Some(a), Some(b)) => Verdict {
                    label,
                    pass: a.mean_mse < b.mean_mse,
                    detail: format!("{} vs {}", a.mean_mse, b.mean_mse),
                },
                _ => missing(label),
            }
        }
        Check::CoverageAtLeast { estimator, n, min } => {
            let label = format!("{estimator}_coverage >= {min} at n={n}");
            match r.summary_for(estimator, *n).and_then(|s| s.coverage) {
                Some(c) => Verdict {
                    label,
                    pass: c >= *min,
                    detail: format!("{c}"),
                },
                None => missing(label),
            }
        }
        Check::CoverageAtMost { estimator, n, max } => {
            let label = format!("{estimator}_coverage <= {max} at n={n}");
            match r.summary_for(estimator, *n).and_then(|s| s.coverage) {
                Some(c) => Verdict {
                    label,
                    pass: c <= *max,
                    detail: format!("{c}"),
                },
                None => missing(label),
            }
        }
        Check::MseDecreasing { estimator } => {
            let label = format!("{estimator}_mse decreasing in n");
            match r.mse_trend(estimator) {
                Some(rho) => Verdict {
                    label,
                    pass: rho < 0.0,
                    detail: format!("spearman {rho}"),
                },
                None => missing(label),
            }
        }
        other => Verdict {
            label: format!("{other:?}"),
            pass: false,
            detail: "not a benchmark check".into(),
        },
    }
}

fn profile_check(check: &Check, cfg: &RiskProfileConfig, rows: &[RiskRow]) -> Verdict {
    match check {
        Check::Ordering => {
            let bad = rows
                .iter()
                .find(|r| !(r.quantile <= r.superquantile && r.superquantile <= r.evar));
            Verdict {
                label: "quantile <= superquantile <= evar at every tau".into(),
                pass: bad.is_none(),
                detail: bad.map(|r| format!("violated at tau = {}", r.tau)).unwrap_or_default(),
            }
        }
        Check::MonotoneToCap => {
            let mut sorted = rows.to_vec();
            sorted.sort_by(|a, b| a.tau.total_cmp(&b.tau));
            let cols = |r: &RiskRow| [r.quantile, r.superquantile, r.evar];
            let nondecreasing = sorted
                .windows(2)
                .all(|w| cols(&w[0]).iter().zip(cols(&w[1])).all(|(a, b)| *a <= b));
            let bounded = rows.iter().all(|r| cols(r).iter().all(|v| *v <= cfg.cap));
            Verdict {
                label: format!("nondecreasing in tau and bounded by cap {}", cfg.cap),
                pass: nondecreasing && bounded,
                detail: format!("nondecreasing = {nondecreasing}, bounded = {bounded}"),
            }
        }
        Check::MedianNear { target, tol } => {
            let label = format!("|median - {target}| <= {tol}");
            match rows.iter().find(|r| (r.tau - 0.5).abs() < 1e-12) {
                Some(r) => Verdict {
                    label,
                    pass: (r.quantile - target).abs() <= *tol,
                    detail: format!("median {}", r.quantile),
                },
                None => Verdict {
                    label,
                    pass: false,
                    detail: "tau = 0.5 is not in the grid".into(),
                },
            }
        }
        other => Verdict {
            label: format!("{other:?}"),
            pass: false,
            detail: "not a risk-profile check".into(),
        },
    }
}

/// Parse `start:end:count` or a comma-separated list of levels.
pub fn parse_taus(s: &str) -> Result<Vec<f64>> {
    let bad = |m: String| CdteError::config(format!("`--taus` {m}"));
    let num = |t: &str| -> Result<f64> {
        t.trim()
            .parse::<f64>()
            .map_err(|_| bad(format!("has a non-numeric entry `{t}`")))
    };
    let parts: Vec<&str> = s.split(':').collect();
    let taus = match parts.as_slice() {
        [start, end, count] => {
            let count: usize = count
                .trim()
                .parse()
                .map_err(|_| bad(format!("has a bad count `{count}`")))?;
            tau_grid(num(start)?, num(end)?, count)
        }
        [list] => list.split(',').map(num).collect::<Result<_>>()?,
        _ => return Err(bad(format!("must be start:end:count or a list, got `{s}`"))),
    };
    if taus.is_empty() {
        return Err(bad("is empty".into()));
    }
    if let Some(t) = taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
        return Err(bad(format!("must lie in (0, 1), got {t}")));
    }
    Ok(taus)
}

pub fn profile(args: &RiskProfileArgs) -> Result<()> {
    let cfg = RiskProfileConfig {
        mu: args.mu,
        sigma: args.sigma,
        cap: args.cap,
        taus: parse_taus(&args.taus)?,
        samples: args.samples,
        seed: args.seed,
    };
    let rows = risk_profile(&cfg)?;
    write_atomic(&args.out, profile_csv(&rows).as_bytes())?;
    write_json(
        &diagnostics_path(&args.out),
        &serde_json::json!({ "config": cfg, "report": RunReport::default() }),
    )
}

fn nuisance_config(args: &FitArgs) -> Result<NuisanceConfig> {
    let propensity = match (args.propensity, args.propensity_value) {
        (PropensityArg::Constant, Some(p)) => PropensityModel::Constant { p },
        (PropensityArg::Constant, None) => {
            return Err(CdteError::config(
                "`--propensity-value` is required with `--propensity constant`",
            ))
        }
        (_, Some(_)) => {
            return Err(CdteError::config(
                "`--propensity-value` only applies to `--propensity constant`",
            ))
        }
        (PropensityArg::Logistic, None) => PropensityModel::Logistic,
        (PropensityArg::Forest, None) => PropensityModel::Forest,
    };
    if !(args.density_bandwidth > 0.0 && args.density_bandwidth.is_finite()) {
        return Err(CdteError::config(format!(
            "`--density-bandwidth` must be positive, got {}",
            args.density_bandwidth
        )));
    }
    Ok(NuisanceConfig {
        propensity,
        quantile: match args.quantile {
            QuantileArg::Forest => QuantileMethod::Forest,
            QuantileArg::Linear => QuantileMethod::Linear,
            QuantileArg::Kernel => QuantileMethod::Kernel,
        },
        superquantile: match args.superquantile {
            SuperquantileArg::Sqrf => SuperquantileMethod::Sqrf,
            SuperquantileArg::TwoStageOls => SuperquantileMethod::TwoStageOls,
            SuperquantileArg::Kernel => SuperquantileMethod::Kernel,
        },
        evar: match args.evar {
            EvarArg::ForestWeights => EvarMethod::ForestWeights,
            EvarArg::KernelWeights => EvarMethod::KernelWeights,
        },
        mean: match args.mean {
            MeanArg::Ols => MeanMethod::Ols,
            MeanArg::Forest => MeanMethod::Forest,
            MeanArg::Kernel => MeanMethod::Kernel,
        },
        density: Some(DensityConfig {
            bandwidth: args.density_bandwidth,
            final_stage: RegressorKind::Forest,
        }),
        ..NuisanceConfig::default()
    })
}

fn csv_headers(path: &Path) -> Result<Vec<String>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    Ok(r.headers()?.iter().map(str::to_string).collect())
}

#[derive(Debug, Serialize)]
struct FitDiagnostics<'a> {
    statistic: StatisticSpec,
    n: usize,
    d: usize,
    folds: usize,
    seed: u64,
    shuffled: bool,
    nuisances: &'a NuisanceConfig,
    final_stage: &'a FinalStage,
    report: &'a RunReport,
}

pub fn fit(args: &FitArgs) -> Result<()> {
    let spec = spec_from_parts(args.statistic.into(), args.tau, args.delta, "--")?;
    if args.folds < 2 {
        return Err(CdteError::config(format!(
            "`--folds` must be at least 2, got {}",
            args.folds
        )));
    }
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(CdteError::config(format!(
            "`--level` must lie in (0, 1), got {}",
            args.level
        )));
    }
    let config = nuisance_config(args)?;
    let features = match &args.features {
        Some(f) => f.clone(),
        None => csv_headers(&args.data)?
            .into_iter()
            .filter(|h| *h != args.outcome && *h != args.treatment)
            .collect(),
    };
    if features.is_empty() {
        return Err(CdteError::config("no covariate columns; pass `--features`"));
    }
    let loaded = load_csv(&args.data, &args.outcome, &args.treatment, &features)?;
    // order[j] is the file row behind working row j
    let mut order: Vec<usize> = (0..loaded.len()).collect();
    if args.shuffle {
        order.shuffle(&mut rng_from_seed(args.seed));
    }
    let data: Dataset = if args.shuffle { loaded.subset(&order) } else { loaded };

    let final_stage = match args.final_stage {
        StageArg::Ols => FinalStage::Ols(FeatureMap::Linear),
        StageArg::Forest => FinalStage::Forest,
    };
    info!(
        "fitting {} on n = {}, d = {}, K = {}",
        spec.name(),
        data.len(),
        data.d(),
        args.folds
    );
    let fitted = cdte_learn(&data, args.folds, &spec, &config, &final_stage, args.seed)?;

    let map = match &args.project {
        Some(cols) => FeatureMap::Columns(data.feature_indices(cols)?),
        None => FeatureMap::Linear,
    };
    let projection = fitted.project(&data, &map, args.level)?;
    let preds = fitted.predict_many(&data.features())?;

    let mut by_row: Vec<(usize, f64, usize, f64)> = (0..data.len())
        .map(|j| {
            (
                order[j] + 1,
                fitted.targets.values[j],
                fitted.targets.fold_of[j],
                preds[j],
            )
        })
        .collect();
    by_row.sort_by_key(|r| r.0);
    let mut csv = String::from("row,fold,pseudo_outcome,cdte\n");
    for (row, psi, fold, pred) in by_row {
        csv.push_str(&format!("{row},{fold},{},{}\n", fmt_f64(psi), fmt_f64(pred)));
    }
    write_atomic(&args.out.join("predictions.csv"), csv.as_bytes())?;
    write_json(&args.out.join("projection.json"), &projection)?;
    write_json(
        &args.out.join("diagnostics.json"),
        &FitDiagnostics {
            statistic: spec,
            n: data.len(),
            d: data.d(),
            folds: args.folds,
            seed: args.seed,
            shuffled: args.shuffle,
            nuisances: &config,
            final_stage: &final_stage,
            report: &fitted.diagnostics,
        },
    )?;
    for (name, (c, s)) in projection
        .names
        .iter()
        .zip(projection.coef.iter().zip(&projection.stderr))
    {
        println!("{name:<16} {c:>12.6} ({s:.6})");
    }
    Ok(())
}
