//! Analytic truth for the simulation design.
//!
//! Given `(x, a)` the outcome is `exp(x0 + a x1)` times a draw from the
//! standardized law `min(exp(sigma Z), exp(sigma z_p))`. Every statistic here
//! is positively homogeneous, so each arm's truth is that scale factor times
//! the statistic of the standardized law, and the true effect is
//! `M (exp(x0 + x1) - exp(x0))` for a constant `M`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use statrs::distribution::{Continuous, ContinuousCDF, Normal};

use super::dgp::{Dgp, TruePropensity};
use crate::crossfit::NuisanceFitter;
use crate::dataset::Dataset;
use crate::diagnostics::Counters;
use crate::error::{CdteError, Result};
use crate::optim::{minimize_scalar, Boundary, ScalarConvexProblem};
use crate::pseudo::{ArmNuisance, NuisanceSet};
use crate::statistics::{alpha_vector, AlphaVector, Evar, NuisanceValues, StatisticSpec};

/// Simpson panels for the KL-risk integral.
const PANELS: usize = 8000;
/// Lower integration limit in standard-normal units.
const Z_LOW: f64 = -12.0;

fn std_normal() -> Normal {
    Normal::standard()
}

/// The standardized outcome law `min(exp(sigma Z), exp(sigma cap_z))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StandardLaw {
    pub sigma: f64,
    pub cap_z: Option<f64>,
}

impl StandardLaw {
    pub fn of(dgp: &Dgp) -> Self {
        StandardLaw {
            sigma: dgp.sigma,
            cap_z: dgp.cap_z(),
        }
    }

    pub fn cap(&self) -> Option<f64> {
        self.cap_z.map(|z| (self.sigma * z).exp())
    }

    pub fn mean(&self) -> f64 {
        let s = self.sigma;
        let n = std_normal();
        let m = (s * s / 2.0).exp();
        match self.cap_z {
            None => m,
            Some(zc) => m * n.cdf(zc - s) + (s * zc).exp() * (1.0 - n.cdf(zc)),
        }
    }

    /// Left-continuous `tau`-quantile.
    pub fn quantile(&self, tau: f64) -> f64 {
        let q = (self.sigma * std_normal().inverse_cdf(tau)).exp();
        match self.cap() {
            Some(c) => q.min(c),
            None => q,
        }
    }

    /// Density at `y`; undefined on the atom at the cap.
    pub fn density(&self, y: f64) -> Result<f64> {
        if let Some(c) = self.cap() {
            if y >= c {
                return Err(CdteError::domain(format!(
                    "the capped law has an atom at {c}; no density at {y}"
                )));
            }
        }
        if !(y > 0.0) {
            return Ok(0.0);
        }
        Ok(std_normal().pdf(y.ln() / self.sigma) / (y * self.sigma))
    }

    /// `(mu, q)` at level `tau`.
    pub fn superquantile(&self, tau: f64) -> (f64, f64) {
        let s = self.sigma;
        let n = std_normal();
        let zt = n.inverse_cdf(tau);
        let q = self.quantile(tau);
        let m = (s * s / 2.0).exp();
        let mu = match self.cap_z {
            None => m * n.cdf(s - zt) / (1.0 - tau),
            Some(zc) => {
                let p = n.cdf(zc);
                if tau >= p {
                    q
                } else {
                    let c = (s * zc).exp();
                    // E[(Y - q)+] split into the continuous part below the
                    // cap and the atom at it
                    let excess = m * (n.cdf(zc - s) - n.cdf(zt - s)) - q * (p - tau) + (1.0 - p) * (c - q);
                    q + excess / (1.0 - tau)
                }
            }
        };
        (mu, q)
    }

    /// `ln E[exp((Y - c) / beta)]` for the capped law, by Simpson's rule
    /// below the cap plus the atom at it.
    fn log_mgf_shifted(&self, zc: f64, beta: f64) -> f64 {
        let s = self.sigma;
        let c = (s * zc).exp();
        let n = std_normal();
        let h = (zc - Z_LOW) / PANELS as f64;
        let f = |z: f64| ((((s * z).exp() - c) / beta).exp()) * n.pdf(z);
        let mut acc = f(Z_LOW) + f(zc);
        for i in 1..PANELS {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(Z_LOW + i as f64 * h);
        }
        (acc * h / 3.0 + (1.0 - n.cdf(zc))).ln()
    }

    /// The dual objective `beta (ln E[exp(Y / beta)] + delta)`.
    pub fn kl_dual(&self, beta: f64, delta: f64) -> Result<f64> {
        let zc = self.require_cap()?;
        let c = (self.sigma * zc).exp();
        Ok(c + beta * (self.log_mgf_shifted(zc, beta) + delta))
    }

    fn require_cap(&self) -> Result<f64> {
        self.cap_z
            .ok_or_else(|| CdteError::domain("the KL risk of an uncapped lognormal is infinite; set a cap quantile"))
    }

    /// KL risk at radius `delta`, with the minimizing `beta` and
    /// `lambda = R - beta (delta + 1)`. Results are cached per law and radius.
    pub fn kl_risk(&self, delta: f64) -> Result<Evar> {
        let zc = self.require_cap()?;
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(CdteError::domain(format!("delta must be finite and >= 0, got {delta}")));
        }
        static CACHE: OnceLock<Mutex<HashMap<[u64; 3], Evar>>> = OnceLock::new();
        let key = [self.sigma.to_bits(), zc.to_bits(), delta.to_bits()];
        let cache = CACHE.get_or_init(Default::default);
        if let Some(hit) = cache.lock().expect("oracle cache poisoned").get(&key) {
            return Ok(*hit);
        }
        let c = (self.sigma * zc).exp();
        let (lo, hi) = (c / 1e3, c * 1e3);
        let finish = |risk: f64, beta: f64, boundary| Evar {
            risk,
            beta,
            lambda: risk - beta * (delta + 1.0),
            boundary,
        };
        let out = if delta == 0.0 {
            finish(self.mean(), hi, Some(Boundary::Upper))
        } else {
            let m = minimize_scalar(&ScalarConvexProblem::new(
                |b| c + b * (self.log_mgf_shifted(zc, b) + delta),
                lo,
                hi,
            ))?;
            if m.min_value > c {
                finish(c, lo, Some(Boundary::Lower))
            } else {
                finish(m.min_value, m.argmin, m.boundary)
            }
        };
        cache.lock().expect("oracle cache poisoned").insert(key, out);
        Ok(out)
    }

    /// `(kappa, h)` and, for the quantile, the density at `q`, all for the
    /// standardized law.
    fn nuisances(&self, spec: &StatisticSpec) -> Result<(NuisanceValues, Option<f64>)> {
        spec.validate()?;
        Ok(match *spec {
            StatisticSpec::Mean => (NuisanceValues::mean(self.mean()), None),
            StatisticSpec::Quantile { tau } => {
                let q = self.quantile(tau);
                (NuisanceValues::quantile(q), Some(self.density(q)?))
            }
            StatisticSpec::SuperQuantile { tau } => {
                let (mu, q) = self.superquantile(tau);
                (NuisanceValues::superquantile(mu, q), None)
            }
            StatisticSpec::KlRisk { delta } => {
                let e = self.kl_risk(delta)?;
                (NuisanceValues::kl_risk(e.risk, e.beta, e.lambda), None)
            }
        })
    }
}

/// The constant `M` with true effect `M (exp(x0 + x1) - exp(x0))`.
pub fn true_multiplier(dgp: &Dgp, spec: &StatisticSpec) -> Result<f64> {
    Ok(StandardLaw::of(dgp).nuisances(spec)?.0.kappa)
}

/// The true conditional effect at `x`.
pub fn true_cdte(dgp: &Dgp, spec: &StatisticSpec, x: &[f64]) -> Result<f64> {
    let m = true_multiplier(dgp, spec)?;
    Ok(m * (dgp.location(x, 1).exp() - dgp.location(x, 0).exp()))
}

/// Oracle nuisances of one arm.
struct OracleArm {
    dgp: Dgp,
    arm: u8,
    spec: StatisticSpec,
    standard: NuisanceValues,
    density: Option<f64>,
}

impl OracleArm {
    fn scale(&self, x: &[f64]) -> f64 {
        self.dgp.location(x, self.arm).exp()
    }
}

impl ArmNuisance for OracleArm {
    fn nu(&self, x: &[f64]) -> Result<NuisanceValues> {
        let s = self.scale(x);
        Ok(NuisanceValues {
            kappa: s * self.standard.kappa,
            h: self.standard.h.iter().map(|v| s * v).collect(),
        })
    }

    fn alpha(&self, x: &[f64], nu: &NuisanceValues, _counters: &Counters) -> Result<AlphaVector> {
        // the density of s * W at s * q is f_W(q) / s
        let f = self.density.map(|f| f / self.scale(x));
        alpha_vector(&self.spec, nu, f)
    }

    fn quantile(&self, _x: &[f64], nu: &NuisanceValues) -> Option<f64> {
        match self.spec {
            StatisticSpec::Quantile { .. } => Some(nu.kappa),
            StatisticSpec::SuperQuantile { .. } => Some(nu.h[0]),
            _ => None,
        }
    }
}

/// The true propensity and arm nuisances.
pub fn true_nuisances(dgp: &Dgp, spec: &StatisticSpec) -> Result<NuisanceSet> {
    dgp.validate()?;
    let (standard, density) = StandardLaw::of(dgp).nuisances(spec)?;
    let arm = |a: u8| -> Arc<dyn ArmNuisance> {
        Arc::new(OracleArm {
            dgp: *dgp,
            arm: a,
            spec: *spec,
            standard: standard.clone(),
            density,
        })
    };
    Ok(NuisanceSet {
        propensity: Arc::new(TruePropensity),
        arms: [arm(0), arm(1)],
        spec: *spec,
        fold: None,
    })
}

/// A nuisance fitter that ignores its training data and returns the truth;
/// running the learner with it gives the oracle regression.
#[derive(Debug, Clone, Copy)]
pub struct OracleFitter {
    pub dgp: Dgp,
    pub spec: StatisticSpec,
}

impl NuisanceFitter for OracleFitter {
    fn spec(&self) -> StatisticSpec {
        self.spec
    }

    fn fit(&self, _train: &Dataset, fold: usize, _seed: u64) -> Result<NuisanceSet> {
        let mut set = true_nuisances(&self.dgp, &self.spec)?;
        set.fold = Some(fold);
        Ok(set)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand_distr::{Distribution, StandardNormal};

    const Z75: f64 = 0.674_489_750_196_081_7;

    #[test]
    fn closed_form_multipliers() {
        let dgp = Dgp::default();
        let sq = true_multiplier(&dgp, &StatisticSpec::SuperQuantile { tau: 0.75 }).unwrap();
        let q = true_multiplier(&dgp, &StatisticSpec::Quantile { tau: 0.75 }).unwrap();
        assert!((q - (0.2 * Z75).exp()).abs() < 1e-12);
        assert!((q - 1.14442).abs() < 1e-5);
        assert!((sq - 1.29596).abs() < 1e-5, "{sq}");
    }

    #[test]
    fn arms_agree_when_x1_is_zero() {
        for (dgp, spec) in [
            (Dgp::default(), StatisticSpec::Mean),
            (Dgp::default(), StatisticSpec::Quantile { tau: 0.3 }),
            (Dgp::default(), StatisticSpec::SuperQuantile { tau: 0.9 }),
            (Dgp::capped(), StatisticSpec::KlRisk { delta: 1.0 }),
        ] {
            let mut x = vec![0.4; 10];
            x[1] = 0.0;
            assert_eq!(true_cdte(&dgp, &spec, &x).unwrap(), 0.0);
        }
    }

    #[test]
    fn mean_effect_is_lognormal_mean_difference() {
        let dgp = Dgp::default();
        let x = [0.3, 0.7, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let want = 0.3f64.exp() * 0.02f64.exp() * (0.7f64.exp() - 1.0);
        assert!((true_cdte(&dgp, &StatisticSpec::Mean, &x).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn superquantile_at_corner() {
        let x = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let v = true_cdte(&Dgp::default(), &StatisticSpec::SuperQuantile { tau: 0.75 }, &x).unwrap();
        let e = std::f64::consts::E;
        assert!((v - 1.29 * (e * e - e)).abs() < 0.03);
        assert!((v - 1.29596 * (e * e - e)).abs() < 1e-4);
    }

    /// Monte Carlo statistics of the standardized law, for comparison with
    /// the closed forms.
    fn mc_sample(law: &StandardLaw, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = rng_from_seed(seed);
        let cap = law.cap().unwrap_or(f64::INFINITY);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (law.sigma * z).exp().min(cap)
            })
            .collect()
    }

    #[test]
    fn capped_closed_forms_match_monte_carlo() {
        let law = StandardLaw::of(&Dgp::capped());
        let ys = mc_sample(&law, 400_000, 5);
        let w = vec![1.0; ys.len()];
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        assert!((mean - law.mean()).abs() < 1e-3, "{mean} vs {}", law.mean());
        let sq = crate::statistics::weighted_superquantile(&ys, &w, 0.9).unwrap();
        let (mu, q) = law.superquantile(0.9);
        assert!(
            (sq.q - q).abs() < 3e-3 && (sq.mu - mu).abs() < 3e-3,
            "{sq:?} vs {mu} {q}"
        );
        // above the cap level everything sits on the atom
        assert_eq!(law.superquantile(0.995).0, law.cap().unwrap());
        assert!(law.density(law.cap().unwrap()).is_err());
    }

    #[test]
    fn kl_risk_matches_grid_and_sample_evar() {
        let law = StandardLaw::of(&Dgp::capped());
        let delta = -(0.25f64).ln();
        let e = law.kl_risk(delta).unwrap();
        // dense log grid over the bracket
        let c = law.cap().unwrap();
        let grid_min = (0..4000)
            .map(|i| {
                let b = c / 1e3 * (1e6f64).powf(i as f64 / 3999.0);
                law.kl_dual(b, delta).unwrap()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(
            e.risk <= grid_min + 1e-9 && grid_min - e.risk < 1e-5,
            "{} vs {grid_min}",
            e.risk
        );
        assert!((e.lambda - (e.risk - e.beta * (delta + 1.0))).abs() < 1e-12);
        // the empirical EVaR of a large sample agrees to Monte Carlo accuracy
        let ys = mc_sample(&law, 200_000, 6);
        let emp = crate::statistics::weighted_evar(&ys, &vec![1.0; ys.len()], delta).unwrap();
        assert!((emp.risk - e.risk).abs() < 5e-3, "{} vs {}", emp.risk, e.risk);
        assert!((e.risk - 1.38078).abs() < 1e-4, "{}", e.risk);
    }

    #[test]
    fn kl_risk_needs_a_cap() {
        let r = true_nuisances(&Dgp::default(), &StatisticSpec::KlRisk { delta: 1.0 });
        assert!(matches!(r, Err(CdteError::Domain(_))));
    }

    #[test]
    fn kl_risk_at_zero_radius_is_the_mean() {
        let law = StandardLaw::of(&Dgp::capped());
        assert_eq!(law.kl_risk(0.0).unwrap().risk, law.mean());
    }

    #[test]
    fn oracle_arms_scale_with_location() {
        let dgp = Dgp::default();
        let spec = StatisticSpec::Quantile { tau: 0.75 };
        let set = true_nuisances(&dgp, &spec).unwrap();
        let x = [0.2, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let nu = set.nu(1, &x).unwrap();
        assert!((nu.kappa - (0.7 + 0.2 * Z75).exp()).abs() < 1e-12);
        let alpha = set.arms[1].alpha(&x, &nu, &Counters::new()).unwrap();
        // lognormal density at the quantile
        let f = (-Z75 * Z75 / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() / (nu.kappa * 0.2);
        assert!((alpha.0[0] + 1.0 / f).abs() < 1e-9);
    }
}
