use log::warn;
use serde::{Deserialize, Serialize};

use super::{LocalityWeights, WeightSource};
use crate::error::{CdteError, Result};
use crate::util::sample_variance;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "lowercase")]
pub enum BandwidthRule {
    /// Per-dimension normal-reference bandwidth.
    Silverman,
    /// The same bandwidth in every dimension.
    Fixed { h: f64 },
}

/// `h_j = (4/(d+2))^(1/(d+4)) n^(-1/(d+4)) sd_j`. Dimensions with zero spread
/// get `None` and are ignored by the kernel.
pub fn silverman_bandwidths(x: &[Vec<f64>]) -> Vec<Option<f64>> {
    let n = x.len();
    let d = x.first().map_or(0, |r| r.len());
    let df = d as f64;
    let factor = (4.0 / (df + 2.0)).powf(1.0 / (df + 4.0)) * (n as f64).powf(-1.0 / (df + 4.0));
    (0..d)
        .map(|j| {
            let col: Vec<f64> = x.iter().map(|r| r[j]).collect();
            let sd = sample_variance(&col).sqrt();
            if sd > 0.0 && sd.is_finite() {
                Some(factor * sd)
            } else {
                warn!("kernel weights: feature {j} has zero variance and is skipped");
                None
            }
        })
        .collect()
}

/// Gaussian product-kernel weights over a training design.
#[derive(Debug, Clone)]
pub struct KernelWeights {
    train: Vec<Vec<f64>>,
    bandwidths: Vec<Option<f64>>,
}

impl KernelWeights {
    pub fn fit(x: &[Vec<f64>], rule: BandwidthRule) -> Result<Self> {
        if x.len() < 2 {
            return Err(CdteError::Precondition(
                "kernel weights need at least 2 training rows".into(),
            ));
        }
        let d = x[0].len();
        let bandwidths = match rule {
            BandwidthRule::Silverman => silverman_bandwidths(x),
            BandwidthRule::Fixed { h } => {
                if !(h > 0.0 && h.is_finite()) {
                    return Err(CdteError::config(format!("bandwidth must be positive, got {h}")));
                }
                vec![Some(h); d]
            }
        };
        Ok(KernelWeights {
            train: x.to_vec(),
            bandwidths,
        })
    }

    pub fn bandwidths(&self) -> &[Option<f64>] {
        &self.bandwidths
    }
}

impl WeightSource for KernelWeights {
    fn weights(&self, x: &[f64]) -> LocalityWeights {
        // log-weights, shifted by their maximum before exponentiation
        let logw: Vec<f64> = self
            .train
            .iter()
            .map(|r| {
                r.iter()
                    .zip(x)
                    .zip(&self.bandwidths)
                    .filter_map(|((a, b), h)| h.map(|h| -((a - b) / h).powi(2) / 2.0))
                    .sum()
            })
            .collect();
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let raw = logw.iter().map(|l| (l - top).exp()).collect();
        LocalityWeights::from_raw(raw).expect("max-shifted kernel weights have positive mass")
    }
    fn n_train(&self) -> usize {
        self.train.len()
    }
}

pub fn kernel_weights(x_train: &[Vec<f64>], x: &[f64], rule: BandwidthRule) -> Result<LocalityWeights> {
    Ok(KernelWeights::fit(x_train, rule)?.weights(x))
}
