//! The simulation design: `X ~ U[0,1]^d`, `A ~ Bernoulli(sigmoid(6 x0 - 3))`,
//! `Y | X, A ~ Lognormal(x0 + A x1, sigma)`, optionally capped at a
//! conditional quantile.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::dataset::{Dataset, Observation};
use crate::error::{CdteError, Result};
use crate::learners::{sigmoid, Classifier};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dgp {
    pub d: usize,
    /// Log-scale standard deviation of the outcome.
    pub sigma: f64,
    /// When set, each outcome is capped at this quantile of its own
    /// conditional law.
    pub cap_quantile: Option<f64>,
}

impl Default for Dgp {
    fn default() -> Self {
        Dgp {
            d: 10,
            sigma: 0.2,
            cap_quantile: None,
        }
    }
}

impl Dgp {
    /// The capped design used for the KL-risk effect.
    pub fn capped() -> Self {
        Dgp {
            cap_quantile: Some(0.99),
            ..Dgp::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d < 2 {
            return Err(CdteError::config(format!("dgp.d must be at least 2, got {}", self.d)));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(CdteError::config(format!(
                "dgp.sigma must be positive, got {}",
                self.sigma
            )));
        }
        if let Some(p) = self.cap_quantile {
            if !(p > 0.0 && p < 1.0) {
                return Err(CdteError::config(format!(
                    "dgp.cap_quantile must lie in (0, 1), got {p}"
                )));
            }
        }
        Ok(())
    }

    pub fn propensity(&self, x: &[f64]) -> f64 {
        TruePropensity.predict_raw(x)
    }

    /// Mean of `log Y` given `(x, a)`.
    pub fn location(&self, x: &[f64], a: u8) -> f64 {
        x[0] + f64::from(a) * x[1]
    }

    /// Standard-normal quantile of the cap, if any.
    pub fn cap_z(&self) -> Option<f64> {
        self.cap_quantile.map(|p| Normal::standard().inverse_cdf(p))
    }

    /// The cap on `Y` given `(x, a)`.
    pub fn cap(&self, x: &[f64], a: u8) -> Option<f64> {
        self.cap_z().map(|z| (self.location(x, a) + self.sigma * z).exp())
    }

    pub fn sample_x(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.d).map(|_| rng.random::<f64>()).collect()
    }

    fn outcome(&self, x: &[f64], a: u8, z: f64, cap_z: Option<f64>) -> f64 {
        let m = self.location(x, a);
        let y = (m + self.sigma * z).exp();
        match cap_z {
            Some(c) => y.min((m + self.sigma * c).exp()),
            None => y,
        }
    }

    pub fn sample_outcome(&self, x: &[f64], a: u8, rng: &mut Rng) -> f64 {
        let z: f64 = StandardNormal.sample(rng);
        self.outcome(x, a, z, self.cap_z())
    }
}

/// `n` i.i.d. draws from `dgp`.
pub fn sample_dgp(dgp: &Dgp, n: usize, rng: &mut Rng) -> Dataset {
    let cap_z = dgp.cap_z();
    let rows = (0..n)
        .map(|_| {
            let x = dgp.sample_x(rng);
            let a = u8::from(rng.random::<f64>() < dgp.propensity(&x));
            let z: f64 = StandardNormal.sample(rng);
            let y = dgp.outcome(&x, a, z, cap_z);
            Observation::new(x, a, y)
        })
        .collect();
    Dataset::new(rows).expect("simulated rows are finite and well formed")
}

/// The true propensity as a classifier.
#[derive(Debug, Clone, Copy)]
pub struct TruePropensity;

impl Classifier for TruePropensity {
    fn predict_raw(&self, x: &[f64]) -> f64 {
        sigmoid(6.0 * x[0] - 3.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn treatment_rate_near_center() {
        let dgp = Dgp::default();
        let data = sample_dgp(&dgp, 100_000, &mut rng_from_seed(1));
        let near: Vec<_> = data.rows().iter().filter(|z| (z.x[0] - 0.5).abs() < 0.02).collect();
        let rate = near.iter().filter(|z| z.a == 1).count() as f64 / near.len() as f64;
        // about 4000 rows in the bin: the standard error is 0.008 and the
        // propensity varies by +-0.03 across it
        assert!((rate - 0.5).abs() < 0.03, "{rate} over {}", near.len());
        let all = data.treatments().iter().filter(|&&a| a == 1).count() as f64 / 1e5;
        assert!((all - 0.5).abs() < 0.01);
    }

    #[test]
    fn log_outcome_mean_in_a_bin() {
        let dgp = Dgp::default();
        let mut rng = rng_from_seed(2);
        let x = vec![0.3, 0.6, 0.1, 0.9, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5];
        for a in [0u8, 1] {
            let m: f64 = (0..100_000)
                .map(|_| dgp.sample_outcome(&x, a, &mut rng).ln())
                .sum::<f64>()
                / 1e5;
            // standard error 0.2 / sqrt(1e5) = 6e-4
            assert!((m - dgp.location(&x, a)).abs() < 0.01, "arm {a}: {m}");
        }
    }

    #[test]
    fn capped_outcomes_respect_the_cap() {
        let dgp = Dgp::capped();
        let data = sample_dgp(&dgp, 20_000, &mut rng_from_seed(3));
        let mut at_cap = 0;
        for z in data.rows() {
            let c = dgp.cap(&z.x, z.a).unwrap();
            assert!(z.y <= c);
            if z.y == c {
                at_cap += 1;
            }
        }
        let frac = at_cap as f64 / 20_000.0;
        assert!((frac - 0.01).abs() < 0.003, "{frac}");
    }

    #[test]
    fn propensity_stays_in_band() {
        let dgp = Dgp::default();
        for x0 in [0.0, 0.25, 0.5, 1.0] {
            let e = TruePropensity.predict_raw(&[x0, 0.0]);
            assert!((e - dgp.propensity(&[x0])).abs() < 1e-15);
            assert!((0.04..=0.96).contains(&e));
        }
    }

    #[test]
    fn seeded_sampling_is_reproducible() {
        let a = sample_dgp(&Dgp::default(), 50, &mut rng_from_seed(4));
        let b = sample_dgp(&Dgp::default(), 50, &mut rng_from_seed(4));
        assert_eq!(a.rows(), b.rows());
    }
}
