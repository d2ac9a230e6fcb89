//! The debiased pseudo-outcome
//! `psi = k1(x) - k0(x) - (A - e(x)) / (e(x)(1 - e(x))) * alpha_A(x)' rho(Y, nu_A(x))`
//! and its closed forms for the quantile, superquantile and KL-risk effects.

use std::sync::Arc;

use crate::dataset::Observation;
use crate::diagnostics::Counters;
use crate::error::{CdteError, Result};
use crate::learners::{clip_propensity, Classifier};
use crate::statistics::{dual_objective_kl_checked, rho, AlphaVector, NuisanceValues, StatisticSpec};

/// Fitted nuisances of one arm: `nu_a(x) = (kappa_a(x), h_a(x))` and
/// `alpha_a(x)`.
pub trait ArmNuisance: Send + Sync {
    fn nu(&self, x: &[f64]) -> Result<NuisanceValues>;

    fn alpha(&self, x: &[f64], nu: &NuisanceValues, counters: &Counters) -> Result<AlphaVector>;

    /// The arm's conditional quantile when the statistic carries one.
    fn quantile(&self, _x: &[f64], _nu: &NuisanceValues) -> Option<f64> {
        None
    }
}

/// Everything needed to evaluate the pseudo-outcome at a row.
#[derive(Clone)]
pub struct NuisanceSet {
    pub propensity: Arc<dyn Classifier>,
    /// Indexed by arm.
    pub arms: [Arc<dyn ArmNuisance>; 2],
    pub spec: StatisticSpec,
    /// Fold whose complement the nuisances were fit on, if any.
    pub fold: Option<usize>,
}

impl NuisanceSet {
    /// Clipped propensity; clipping events are counted.
    pub fn propensity_at(&self, x: &[f64], counters: &Counters) -> f64 {
        let (p, clipped) = clip_propensity(self.propensity.predict_raw(x));
        if clipped {
            counters.propensity_clip();
        }
        p
    }

    pub fn nu(&self, arm: u8, x: &[f64]) -> Result<NuisanceValues> {
        self.arms[usize::from(arm)].nu(x)
    }

    /// `kappa_1(x) - kappa_0(x)`.
    pub fn plugin(&self, x: &[f64]) -> Result<f64> {
        let k1 = self.nu(1, x)?.kappa;
        let k0 = self.nu(0, x)?.kappa;
        finite("kappa_1", k1)?;
        finite("kappa_0", k0)?;
        Ok(k1 - k0)
    }
}

/// Pseudo-outcomes of the evaluation rows, tagged with the fold whose
/// nuisances produced each value.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoOutcomes {
    pub values: Vec<f64>,
    pub fold_of: Vec<usize>,
}

impl PseudoOutcomes {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CdteError::NonFiniteNuisance(format!("{name} evaluated to {v}")))
    }
}

fn finite_all(name: &str, vs: &[f64]) -> Result<()> {
    for (j, v) in vs.iter().enumerate() {
        finite(&format!("{name}[{j}]"), *v)?;
    }
    Ok(())
}

fn ipw_coefficient(a: u8, e: f64) -> f64 {
    (f64::from(a) - e) / (e * (1.0 - e))
}

/// The pseudo-outcome from already-evaluated nuisances.
pub fn pseudo_outcome_from_parts(
    spec: &StatisticSpec,
    a: u8,
    y: f64,
    e: f64,
    nu0: &NuisanceValues,
    nu1: &NuisanceValues,
    alpha_a: &AlphaVector,
) -> Result<f64> {
    finite("propensity", e)?;
    if !(e > 0.0 && e < 1.0) {
        return Err(CdteError::domain(format!("propensity must lie in (0, 1), got {e}")));
    }
    finite("kappa_0", nu0.kappa)?;
    finite("kappa_1", nu1.kappa)?;
    finite_all("h_0", &nu0.h)?;
    finite_all("h_1", &nu1.h)?;
    finite_all("alpha", &alpha_a.0)?;
    let nu_a = if a == 1 { nu1 } else { nu0 };
    let r = rho(spec, y, nu_a)?;
    if r.len() != alpha_a.0.len() {
        return Err(CdteError::domain(format!(
            "alpha has length {} but rho has length {}",
            alpha_a.0.len(),
            r.len()
        )));
    }
    Ok(nu1.kappa - nu0.kappa - ipw_coefficient(a, e) * alpha_a.dot(&r))
}

/// Evaluate the pseudo-outcome of one observation.
pub fn pseudo_outcome(z: &Observation, nuis: &NuisanceSet, counters: &Counters) -> Result<f64> {
    let e = nuis.propensity_at(&z.x, counters);
    let nu0 = nuis.nu(0, &z.x)?;
    let nu1 = nuis.nu(1, &z.x)?;
    let nu_a = if z.a == 1 { &nu1 } else { &nu0 };
    let alpha = nuis.arms[usize::from(z.a)].alpha(&z.x, nu_a, counters)?;
    if let StatisticSpec::KlRisk { delta } = nuis.spec {
        if nu_a.h.len() == 2 && nu_a.h[0] > 0.0 {
            let (_, clamped) = dual_objective_kl_checked(z.y, nu_a.h[0], nu_a.h[1], delta)?;
            if clamped {
                counters.exponent_clamp();
            }
        }
    }
    pseudo_outcome_from_parts(&nuis.spec, z.a, z.y, e, &nu0, &nu1, &alpha)
}

/// Closed form for the quantile effect, with `f_a` the arm densities at their
/// quantiles.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_cqte(z: &Observation, e: f64, q0: f64, q1: f64, f0: f64, f1: f64, tau: f64) -> Result<f64> {
    if !(f0 > 0.0 && f1 > 0.0) {
        return Err(CdteError::domain(format!(
            "densities must be positive, got f0 = {f0}, f1 = {f1}"
        )));
    }
    let (q, f) = if z.a == 1 { (q1, f1) } else { (q0, f0) };
    let ind = if z.y <= q { 1.0 } else { 0.0 };
    Ok(q1 - q0 + ipw_coefficient(z.a, e) * (tau - ind) / f)
}

/// Closed form for the superquantile effect; needs no density.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_csqte(z: &Observation, e: f64, mu0: f64, mu1: f64, q0: f64, q1: f64, tau: f64) -> Result<f64> {
    let (q, mu) = if z.a == 1 { (q1, mu1) } else { (q0, mu0) };
    let tail = if z.y >= q { (z.y - q) / (1.0 - tau) } else { 0.0 };
    Ok(mu1 - mu0 + ipw_coefficient(z.a, e) * (q + tail - mu))
}

/// Closed form for the KL-risk effect.
#[allow(clippy::too_many_arguments)]
pub fn pseudo_cklrte(
    z: &Observation,
    e: f64,
    r0: f64,
    r1: f64,
    beta0: f64,
    beta1: f64,
    lambda0: f64,
    lambda1: f64,
    delta: f64,
) -> Result<f64> {
    let (r, beta, lambda) = if z.a == 1 {
        (r1, beta1, lambda1)
    } else {
        (r0, beta0, lambda0)
    };
    let (m, _) = dual_objective_kl_checked(z.y, beta, lambda, delta)?;
    Ok(r1 - r0 + ipw_coefficient(z.a, e) * (m - r))
}

/// The augmented inverse-propensity-weighted pseudo-outcome for the mean.
pub fn pseudo_aipw(z: &Observation, e: f64, k0: f64, k1: f64) -> f64 {
    let k = if z.a == 1 { k1 } else { k0 };
    k1 - k0 + ipw_coefficient(z.a, e) * (z.y - k)
}
