//! Quantile, superquantile and EVaR across levels for a capped lognormal,
//! estimated from one large sample.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CdteError, Result};
use crate::rng::rng_from_seed;
use crate::statistics::{evar_of_atoms, quantile_of_atoms, sorted_atoms, superquantile_of_atoms};
use crate::util::fmt_f64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskProfileConfig {
    /// Log-scale location.
    pub mu: f64,
    /// Log-scale spread.
    pub sigma: f64,
    /// Draws above this are set to it.
    pub cap: f64,
    pub taus: Vec<f64>,
    pub samples: usize,
    pub seed: u64,
}

impl Default for RiskProfileConfig {
    fn default() -> Self {
        RiskProfileConfig {
            mu: 0.0,
            sigma: 0.5,
            cap: 6.0,
            taus: tau_grid(0.01, 0.99, 50),
            samples: 1_000_000,
            seed: 1,
        }
    }
}

impl RiskProfileConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.mu.is_finite() {
            return Err(CdteError::config(format!("mu must be finite, got {}", self.mu)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(CdteError::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if !(self.cap > 0.0) {
            return Err(CdteError::config(format!("cap must be positive, got {}", self.cap)));
        }
        if self.taus.is_empty() {
            return Err(CdteError::config("taus must not be empty"));
        }
        if let Some(t) = self.taus.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(CdteError::config(format!("tau must lie in (0, 1), got {t}")));
        }
        if self.samples == 0 {
            return Err(CdteError::config("samples must be at least 1"));
        }
        Ok(())
    }
}

/// `count` evenly spaced levels from `start` to `end` inclusive.
pub fn tau_grid(start: f64, end: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..count)
            .map(|i| start + (end - start) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub tau: f64,
    pub quantile: f64,
    pub superquantile: f64,
    /// EVaR at `delta = -ln(1 - tau)`.
    pub evar: f64,
}

pub fn risk_profile(cfg: &RiskProfileConfig) -> Result<Vec<RiskRow>> {
    cfg.validate()?;
    let mut rng = rng_from_seed(cfg.seed);
    let values: Vec<f64> = (0..cfg.samples)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            (cfg.mu + cfg.sigma * z).exp().min(cfg.cap)
        })
        .collect();
    let atoms = sorted_atoms(&values, &vec![1.0; values.len()])?;
    cfg.taus
        .par_iter()
        .map(|&tau| {
            Ok(RiskRow {
                tau,
                quantile: quantile_of_atoms(&atoms, tau),
                superquantile: superquantile_of_atoms(&atoms, tau).mu,
                evar: evar_of_atoms(&atoms, -(1.0 - tau).ln())?.risk,
            })
        })
        .collect()
}

/// CSV with header `tau,quantile,superquantile,evar`.
pub fn profile_csv(rows: &[RiskRow]) -> String {
    let mut out = String::from("tau,quantile,superquantile,evar\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_f64(r.tau),
            fmt_f64(r.quantile),
            fmt_f64(r.superquantile),
            fmt_f64(r.evar)
        ));
    }
    out
}
