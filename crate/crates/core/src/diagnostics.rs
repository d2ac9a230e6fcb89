//! Run diagnostics: numerical guard counters, per-fold nuisance quality and
//! failure records.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

/// Thread-safe counters of numerical guards that fired during a run.
#[derive(Debug, Default)]
pub struct Counters {
    propensity_clips: AtomicU64,
    density_floors: AtomicU64,
    exponent_clamps: AtomicU64,
}

impl Counters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn propensity_clip(&self) {
        self.propensity_clips.fetch_add(1, Ordering::Relaxed);
    }

    pub fn density_floor(&self) {
        self.density_floors.fetch_add(1, Ordering::Relaxed);
    }

    pub fn exponent_clamp(&self) {
        self.exponent_clamps.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            propensity_clips: self.propensity_clips.load(Ordering::Relaxed),
            density_floors: self.density_floors.load(Ordering::Relaxed),
            exponent_clamps: self.exponent_clamps.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CounterSnapshot {
    pub propensity_clips: u64,
    pub density_floors: u64,
    pub exponent_clamps: u64,
}

impl std::ops::Add for CounterSnapshot {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        CounterSnapshot {
            propensity_clips: self.propensity_clips + o.propensity_clips,
            density_floors: self.density_floors + o.density_floors,
            exponent_clamps: self.exponent_clamps + o.exponent_clamps,
        }
    }
}

/// Nuisance quality for one fold, measured on that fold's held-out rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub n_train: usize,
    pub n_eval: usize,
    /// Mean binary log-loss of the clipped propensity.
    pub propensity_log_loss: f64,
    /// Mean check loss of the arm quantile at the statistic's level, when the
    /// statistic has a quantile nuisance.
    pub quantile_pinball_loss: Option<f64>,
    pub counters: CounterSnapshot,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub rep: usize,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub folds: Vec<FoldReport>,
    pub counters: CounterSnapshot,
    pub failures: Vec<Failure>,
}

/// Aggregate fold reports and failures. Totals are recomputed from the fold
/// counters, so summarizing a report's own parts again gives the same report.
pub fn summarize(folds: &[FoldReport], failures: &[Failure]) -> RunReport {
    let counters = folds.iter().fold(CounterSnapshot::default(), |acc, f| acc + f.counters);
    RunReport {
        folds: folds.to_vec(),
        counters,
        failures: failures.to_vec(),
    }
}

pub fn log_loss(p: f64, a: u8) -> f64 {
    if a == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

pub fn pinball_loss(y: f64, q: f64, tau: f64) -> f64 {
    let r = y - q;
    if r >= 0.0 {
        tau * r
    } else {
        (tau - 1.0) * r
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fold(k: usize, c: CounterSnapshot) -> FoldReport {
        FoldReport {
            fold: k,
            n_train: 8,
            n_eval: 2,
            propensity_log_loss: 0.6,
            quantile_pinball_loss: Some(0.2),
            counters: c,
        }
    }

    #[test]
    fn clean_run() {
        let r = summarize(&[fold(1, CounterSnapshot::default())], &[]);
        assert_eq!(r.counters, CounterSnapshot::default());
        assert!(r.failures.is_empty());
    }

    #[test]
    fn failure_recorded() {
        let f = Failure {
            rep: 3,
            error: "boom".into(),
        };
        let r = summarize(&[], &[f]);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].rep, 3);
    }

    #[test]
    fn summarize_is_idempotent_and_round_trips() {
        let c = Counters::new();
        c.density_floor();
        c.density_floor();
        c.exponent_clamp();
        let r = summarize(&[fold(1, c.snapshot()), fold(2, c.snapshot())], &[]);
        assert_eq!(r.counters.density_floors, 4);
        assert_eq!(summarize(&r.folds, &r.failures), r);
        let json = serde_json::to_string(&r).unwrap();
        let back: RunReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn losses() {
        assert!((log_loss(0.5, 1) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(pinball_loss(3.0, 1.0, 0.75), 1.5);
        assert_eq!(pinball_loss(1.0, 3.0, 0.75), 0.5);
    }
}
