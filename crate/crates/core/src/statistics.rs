//! Moment-defined distributional statistics.
//!
//! Each statistic is the `kappa` component of a root `(kappa, h)` of
//! `E[rho(Y, kappa, h)] = 0`. This module provides `rho`, the debiasing vector
//! `alpha` (first row of the inverse Jacobian of the conditional moment), and
//! weighted empirical estimators of every statistic.

use serde::{Deserialize, Serialize};

use crate::error::{CdteError, Result};
use crate::optim::{minimize_scalar, Boundary, ScalarConvexProblem};

/// Which statistic defines the treatment effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum StatisticSpec {
    Mean,
    Quantile {
        tau: f64,
    },
    #[serde(rename = "superquantile")]
    SuperQuantile {
        tau: f64,
    },
    #[serde(rename = "klrisk")]
    KlRisk {
        delta: f64,
    },
}

impl StatisticSpec {
    pub fn quantile(tau: f64) -> Result<Self> {
        let s = StatisticSpec::Quantile { tau };
        s.validate()?;
        Ok(s)
    }

    pub fn superquantile(tau: f64) -> Result<Self> {
        let s = StatisticSpec::SuperQuantile { tau };
        s.validate()?;
        Ok(s)
    }

    pub fn kl_risk(delta: f64) -> Result<Self> {
        let s = StatisticSpec::KlRisk { delta };
        s.validate()?;
        Ok(s)
    }

    /// KL risk at the level matched to a tail probability: `delta = -ln(1 - tau)`.
    pub fn kl_risk_at_level(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(CdteError::config(format!("tau must lie in (0, 1), got {tau}")));
        }
        Self::kl_risk(-(1.0 - tau).ln())
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            StatisticSpec::Mean => Ok(()),
            StatisticSpec::Quantile { tau } | StatisticSpec::SuperQuantile { tau } => {
                if tau > 0.0 && tau < 1.0 {
                    Ok(())
                } else {
                    Err(CdteError::config(format!("tau must lie in (0, 1), got {tau}")))
                }
            }
            StatisticSpec::KlRisk { delta } => {
                if delta >= 0.0 && delta.is_finite() {
                    Ok(())
                } else {
                    Err(CdteError::config(format!("delta must be finite and >= 0, got {delta}")))
                }
            }
        }
    }

    /// Number of auxiliary components `m` (so `rho` has length `m + 1`).
    pub fn aux_dim(&self) -> usize {
        match self {
            StatisticSpec::Mean | StatisticSpec::Quantile { .. } => 0,
            StatisticSpec::SuperQuantile { .. } => 1,
            StatisticSpec::KlRisk { .. } => 2,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            StatisticSpec::Mean => "mean",
            StatisticSpec::Quantile { .. } => "quantile",
            StatisticSpec::SuperQuantile { .. } => "superquantile",
            StatisticSpec::KlRisk { .. } => "klrisk",
        }
    }
}

/// `(kappa, h)`: the statistic and its auxiliary components.
///
/// Layout of `h`: empty for mean and quantile; `[q]` for the superquantile;
/// `[beta, lambda]` for KL risk.
#[derive(Debug, Clone, PartialEq)]
pub struct NuisanceValues {
    pub kappa: f64,
    pub h: Vec<f64>,
}

impl NuisanceValues {
    pub fn mean(mu: f64) -> Self {
        NuisanceValues {
            kappa: mu,
            h: Vec::new(),
        }
    }

    pub fn quantile(q: f64) -> Self {
        NuisanceValues {
            kappa: q,
            h: Vec::new(),
        }
    }

    pub fn superquantile(mu: f64, q: f64) -> Self {
        NuisanceValues { kappa: mu, h: vec![q] }
    }

    pub fn kl_risk(risk: f64, beta: f64, lambda: f64) -> Self {
        NuisanceValues {
            kappa: risk,
            h: vec![beta, lambda],
        }
    }

    fn check(&self, spec: &StatisticSpec) -> Result<()> {
        if self.h.len() != spec.aux_dim() {
            return Err(CdteError::domain(format!(
                "{} expects {} auxiliary values, got {}",
                spec.name(),
                spec.aux_dim(),
                self.h.len()
            )));
        }
        if let StatisticSpec::KlRisk { .. } = spec {
            if !(self.h[0] > 0.0) {
                return Err(CdteError::domain(format!(
                    "KL dual requires beta > 0, got {}",
                    self.h[0]
                )));
            }
        }
        Ok(())
    }
}

/// Debiasing weights applied to `rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlphaVector(pub Vec<f64>);

impl AlphaVector {
    pub fn dot(&self, rho: &[f64]) -> f64 {
        self.0.iter().zip(rho).map(|(a, r)| a * r).sum()
    }
}

/// Convex conjugate of the generator of an f-divergence; the dual of the
/// f-risk is written in terms of it.
pub trait FDivergence {
    fn conjugate(&self, t: f64) -> f64;
    fn conjugate_derivative(&self, t: f64) -> f64;
}

/// `f(x) = x ln x`, conjugate `f*(t) = exp(t - 1)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct KullbackLeibler;

/// Exponents of the KL conjugate are clamped to this magnitude.
pub const EXP_CLAMP: f64 = 700.0;

impl FDivergence for KullbackLeibler {
    fn conjugate(&self, t: f64) -> f64 {
        (t - 1.0).clamp(-EXP_CLAMP, EXP_CLAMP).exp()
    }

    fn conjugate_derivative(&self, t: f64) -> f64 {
        self.conjugate(t)
    }
}

/// Dual integrand `m(y, beta, lambda; delta) = delta*beta + lambda + beta*f*((y - lambda)/beta)`
/// for a generic divergence.
pub fn dual_objective<D: FDivergence>(div: &D, y: f64, beta: f64, lambda: f64, delta: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(CdteError::domain(format!(
            "dual objective requires beta > 0, got {beta}"
        )));
    }
    Ok(delta * beta + lambda + beta * div.conjugate((y - lambda) / beta))
}

/// KL dual integrand; the flag reports whether the exponent was clamped.
pub fn dual_objective_kl_checked(y: f64, beta: f64, lambda: f64, delta: f64) -> Result<(f64, bool)> {
    if !(beta > 0.0) {
        return Err(CdteError::domain(format!(
            "dual objective requires beta > 0, got {beta}"
        )));
    }
    let expo = (y - lambda) / beta - 1.0;
    let clamped = expo.abs() > EXP_CLAMP;
    let value = delta * beta + lambda + beta * expo.clamp(-EXP_CLAMP, EXP_CLAMP).exp();
    Ok((value, clamped))
}

pub fn dual_objective_kl(y: f64, beta: f64, lambda: f64, delta: f64) -> Result<f64> {
    dual_objective_kl_checked(y, beta, lambda, delta).map(|(v, _)| v)
}

/// The moment function. Indicators are inclusive: `I[y <= q]` and `I[y >= q]`
/// are both 1 at `y == q`.
pub fn rho(spec: &StatisticSpec, y: f64, nu: &NuisanceValues) -> Result<Vec<f64>> {
    nu.check(spec)?;
    Ok(match *spec {
        StatisticSpec::Mean => vec![y - nu.kappa],
        StatisticSpec::Quantile { tau } => vec![tau - indicator(y <= nu.kappa)],
        StatisticSpec::SuperQuantile { tau } => {
            let q = nu.h[0];
            vec![y * indicator(y >= q) / (1.0 - tau) - nu.kappa, tau - indicator(y <= q)]
        }
        StatisticSpec::KlRisk { delta } => {
            let (beta, lambda) = (nu.h[0], nu.h[1]);
            let div = KullbackLeibler;
            let t = (y - lambda) / beta;
            let m = dual_objective(&div, y, beta, lambda, delta)?;
            let fs = div.conjugate(t);
            let dfs = div.conjugate_derivative(t);
            vec![m - nu.kappa, delta + fs - t * dfs, 1.0 - dfs]
        }
    })
}

#[inline]
fn indicator(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

/// First row of the inverse Jacobian of the conditional moment.
///
/// Mean `[-1]`; quantile `[-1/f]` with `f` the density at the quantile;
/// superquantile `[-1, q/(1 - tau)]`; KL risk `[-1, 0, 0]`.
pub fn alpha_vector(spec: &StatisticSpec, nu: &NuisanceValues, density_at_q: Option<f64>) -> Result<AlphaVector> {
    nu.check(spec)?;
    Ok(AlphaVector(match *spec {
        StatisticSpec::Mean => vec![-1.0],
        StatisticSpec::Quantile { .. } => match density_at_q {
            Some(f) if f > 0.0 && f.is_finite() => vec![-1.0 / f],
            other => {
                return Err(CdteError::domain(format!(
                    "quantile debiasing needs a positive density at the quantile, got {other:?}"
                )))
            }
        },
        StatisticSpec::SuperQuantile { tau } => vec![-1.0, nu.h[0] / (1.0 - tau)],
        StatisticSpec::KlRisk { .. } => vec![-1.0, 0.0, 0.0],
    }))
}

fn normalized(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(CdteError::domain("weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(CdteError::domain("weights sum to zero"));
    }
    Ok(weights.iter().map(|w| w / total).collect())
}

fn check_inputs(values: &[f64], weights: &[f64]) -> Result<()> {
    if values.len() != weights.len() {
        return Err(CdteError::domain(format!(
            "{} values but {} weights",
            values.len(),
            weights.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(CdteError::domain("values must be finite"));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        Err(CdteError::domain(format!("tau must lie in (0, 1), got {tau}")))
    }
}

/// Entries `(value, normalized weight)` with positive weight, sorted by value.
pub(crate) fn sorted_atoms(values: &[f64], weights: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_inputs(values, weights)?;
    let w = normalized(weights)?;
    let mut atoms: Vec<(f64, f64)> = values
        .iter()
        .zip(w)
        .filter(|(_, w)| *w > 0.0)
        .map(|(&v, w)| (v, w))
        .collect();
    atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(atoms)
}

// Cumulative weights are compared against tau with this slack so that, e.g.,
// ten weights of 0.1 reach 0.3 after three steps.
const CDF_SLACK: f64 = 1e-12;

/// Left-continuous inverse of the CDF of sorted atoms with normalized weights.
pub(crate) fn quantile_of_atoms(atoms: &[(f64, f64)], tau: f64) -> f64 {
    let mut cum = 0.0;
    for &(v, w) in atoms {
        cum += w;
        if cum >= tau - CDF_SLACK {
            return v;
        }
    }
    atoms.last().map(|a| a.0).unwrap_or(f64::NAN)
}

pub(crate) fn superquantile_of_atoms(atoms: &[(f64, f64)], tau: f64) -> Superquantile {
    let q = quantile_of_atoms(atoms, tau);
    let tail: f64 = atoms.iter().filter(|a| a.0 > q).map(|&(v, w)| w * (v - q)).sum();
    Superquantile {
        mu: q + tail / (1.0 - tau),
        q,
    }
}

/// `inf { v : F_w(v) >= tau }` for the weighted empirical CDF `F_w`.
pub fn weighted_quantile(values: &[f64], weights: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    let atoms = sorted_atoms(values, weights)?;
    Ok(quantile_of_atoms(&atoms, tau))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Superquantile {
    pub mu: f64,
    pub q: f64,
}

/// Weighted superquantile (CVaR): `mu = q + E_w[max(Y - q, 0)] / (1 - tau)`
/// with `q` the weighted quantile, which attains the infimum of
/// `b + E_w[max(Y - b, 0)] / (1 - tau)` over `b`.
pub fn weighted_superquantile(values: &[f64], weights: &[f64], tau: f64) -> Result<Superquantile> {
    check_tau(tau)?;
    let atoms = sorted_atoms(values, weights)?;
    Ok(superquantile_of_atoms(&atoms, tau))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evar {
    /// The KL risk (EVaR) `R`.
    pub risk: f64,
    pub beta: f64,
    /// `lambda = R - beta (delta + 1)`.
    pub lambda: f64,
    /// Set when the optimum sits on an end of the search bracket.
    pub boundary: Option<Boundary>,
}

/// Relative width of the `beta` search bracket around the value range.
const EVAR_BRACKET: f64 = 1e3;
const EVAR_RANGE_FLOOR: f64 = 1e-9;
/// Smallest `beta`, relative to the value range, the search walks down to.
const EVAR_LOWER_FLOOR: f64 = 1e-12;

/// Weighted entropic value-at-risk:
/// `R = min_{beta > 0} beta (ln E_w[exp(Y / beta)] + delta)`.
pub fn weighted_evar(values: &[f64], weights: &[f64], delta: f64) -> Result<Evar> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(CdteError::domain(format!("delta must be finite and >= 0, got {delta}")));
    }
    let atoms = sorted_atoms(values, weights)?;
    evar_of_atoms(&atoms, delta)
}

pub(crate) fn evar_of_atoms(atoms: &[(f64, f64)], delta: f64) -> Result<Evar> {
    let vmin = atoms.first().map(|a| a.0).unwrap_or(f64::NAN);
    let vmax = atoms.last().map(|a| a.0).unwrap_or(f64::NAN);
    let range = (vmax - vmin).max(EVAR_RANGE_FLOOR);
    let (lo, hi) = (range / EVAR_BRACKET, range * EVAR_BRACKET);
    let finish = |risk: f64, beta: f64, boundary| Evar {
        risk,
        beta,
        lambda: risk - beta * (delta + 1.0),
        boundary,
    };

    if vmax == vmin {
        // point mass: R = c for every delta
        return Ok(finish(vmax, lo, Some(Boundary::Lower)));
    }
    let mean: f64 = atoms.iter().map(|&(v, w)| v * w).sum();
    if delta == 0.0 {
        // ball of radius zero; the infimum is approached as beta -> inf
        return Ok(finish(mean, hi, Some(Boundary::Upper)));
    }

    // g(beta) = vmax + beta (ln sum_i w_i exp((v_i - vmax) / beta) + delta)
    let objective = |beta: f64| {
        let s: f64 = atoms.iter().map(|&(v, w)| w * ((v - vmax) / beta).exp()).sum();
        vmax + beta * (s.ln() + delta)
    };
    let mut m = minimize_scalar(&ScalarConvexProblem::new(objective, lo, hi))?;
    // the optimum can sit below the bracket when one atom dominates the
    // upper tail; walk the bracket down until it is interior
    let mut lo = lo;
    let floor = range * EVAR_LOWER_FLOOR;
    while m.boundary == Some(Boundary::Lower) && lo > floor {
        let next = (lo / EVAR_BRACKET).max(floor);
        m = minimize_scalar(&ScalarConvexProblem::new(objective, next, lo * 2.0))?;
        lo = next;
    }
    if !m.converged && m.boundary.is_none() {
        return Err(CdteError::Numerical {
            message: "EVaR search did not converge".into(),
            last_iterate: m.argmin,
        });
    }
    if m.min_value > vmax {
        // optimum lies below the bracket; the infimum is the maximum value
        return Ok(finish(vmax, lo, Some(Boundary::Lower)));
    }
    Ok(finish(m.min_value, m.argmin, m.boundary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn uniform(n: usize) -> Vec<f64> {
        vec![1.0; n]
    }

    #[test]
    fn rho_examples() {
        let q = StatisticSpec::Quantile { tau: 0.75 };
        assert_eq!(rho(&q, 1.0, &NuisanceValues::quantile(2.0)).unwrap(), vec![-0.25]);
        assert_eq!(
            rho(&StatisticSpec::Mean, 3.0, &NuisanceValues::mean(3.0)).unwrap(),
            vec![0.0]
        );
        let sq = StatisticSpec::SuperQuantile { tau: 0.75 };
        assert_eq!(
            rho(&sq, 4.0, &NuisanceValues::superquantile(4.0, 2.0)).unwrap(),
            vec![12.0, 0.75]
        );
    }

    #[test]
    fn rho_kl_partials_match_finite_differences() {
        let delta = 0.4;
        let spec = StatisticSpec::KlRisk { delta };
        let (y, beta, lambda) = (1.3, 0.7, 0.2);
        let r = rho(&spec, y, &NuisanceValues::kl_risk(0.0, beta, lambda)).unwrap();
        let h = 1e-6;
        let m = |b: f64, l: f64| dual_objective_kl(y, b, l, delta).unwrap();
        let d_beta = (m(beta + h, lambda) - m(beta - h, lambda)) / (2.0 * h);
        let d_lambda = (m(beta, lambda + h) - m(beta, lambda - h)) / (2.0 * h);
        assert_abs_diff_eq!(r[0], m(beta, lambda), epsilon = 1e-12);
        assert_abs_diff_eq!(r[1], d_beta, epsilon = 1e-7);
        assert_abs_diff_eq!(r[2], d_lambda, epsilon = 1e-7);
    }

    #[test]
    fn kl_rho_rejects_nonpositive_beta() {
        let spec = StatisticSpec::KlRisk { delta: 0.1 };
        assert!(matches!(
            rho(&spec, 1.0, &NuisanceValues::kl_risk(1.0, 0.0, 0.0)),
            Err(CdteError::Domain(_))
        ));
        assert!(dual_objective_kl(1.0, -1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn dual_objective_examples() {
        let e = (-1.0f64).exp();
        assert_abs_diff_eq!(dual_objective_kl(2.5, 1.0, 2.5, 0.0).unwrap(), 2.5 + e, epsilon = 1e-15);
        assert_abs_diff_eq!(dual_objective_kl(0.0, 1.0, 0.0, 1.0).unwrap(), 1.0 + e, epsilon = 1e-15);
        let mut prev = f64::NEG_INFINITY;
        for i in 0..100 {
            let v = dual_objective_kl(-5.0 + 0.1 * i as f64, 0.8, 0.3, 0.5).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn dual_objective_clamps_huge_exponents() {
        let (v, clamped) = dual_objective_kl_checked(1e6, 1.0, 0.0, 0.0).unwrap();
        assert!(v.is_finite());
        assert!(clamped);
        let (_, clamped) = dual_objective_kl_checked(1.0, 1.0, 0.0, 0.0).unwrap();
        assert!(!clamped);
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(weighted_quantile(&[1.0, 2.0, 3.0, 4.0], &uniform(4), 0.5).unwrap(), 2.0);
        assert_eq!(weighted_quantile(&[5.0], &[1.0], 0.01).unwrap(), 5.0);
        assert_eq!(weighted_quantile(&[5.0], &[1.0], 0.99).unwrap(), 5.0);
        assert_eq!(weighted_quantile(&[1.0, 2.0], &[0.9, 0.1], 0.95).unwrap(), 2.0);
        // order of inputs is irrelevant
        assert_eq!(weighted_quantile(&[4.0, 1.0, 3.0, 2.0], &uniform(4), 0.5).unwrap(), 2.0);
        // zero-weight values are never returned
        assert_eq!(
            weighted_quantile(&[0.0, 7.0, 9.0], &[0.0, 1.0, 1.0], 1e-9).unwrap(),
            7.0
        );
    }

    #[test]
    fn quantile_errors() {
        assert!(matches!(
            weighted_quantile(&[1.0, 2.0], &[0.0, 0.0], 0.5),
            Err(CdteError::Domain(_))
        ));
        assert!(weighted_quantile(&[1.0], &[1.0], 1.0).is_err());
        assert!(weighted_quantile(&[f64::NAN], &[1.0], 0.5).is_err());
        assert!(weighted_quantile(&[1.0], &[-1.0], 0.5).is_err());
    }

    #[test]
    fn superquantile_examples() {
        let s = weighted_superquantile(&[1.0, 2.0, 3.0, 4.0], &uniform(4), 0.5).unwrap();
        assert_eq!(s.q, 2.0);
        assert_abs_diff_eq!(s.mu, 3.5, epsilon = 1e-15);
        let p = weighted_superquantile(&[5.0], &[1.0], 0.9).unwrap();
        assert_eq!(p.mu, 5.0);
    }

    #[test]
    fn alpha_examples() {
        let q = StatisticSpec::Quantile { tau: 0.75 };
        assert_eq!(
            alpha_vector(&q, &NuisanceValues::quantile(1.0), Some(0.5)).unwrap().0,
            vec![-2.0]
        );
        assert!(alpha_vector(&q, &NuisanceValues::quantile(1.0), None).is_err());
        assert!(alpha_vector(&q, &NuisanceValues::quantile(1.0), Some(0.0)).is_err());
        let kl = StatisticSpec::KlRisk { delta: 0.3 };
        assert_eq!(
            alpha_vector(&kl, &NuisanceValues::kl_risk(1.0, 2.0, 3.0), None)
                .unwrap()
                .0,
            vec![-1.0, 0.0, 0.0]
        );
        let sq = StatisticSpec::SuperQuantile { tau: 0.75 };
        assert_eq!(
            alpha_vector(&sq, &NuisanceValues::superquantile(3.0, 2.0), None)
                .unwrap()
                .0,
            vec![-1.0, 8.0]
        );
        assert_eq!(
            alpha_vector(&StatisticSpec::Mean, &NuisanceValues::mean(0.0), None)
                .unwrap()
                .0,
            vec![-1.0]
        );
    }

    #[test]
    fn evar_point_mass_and_zero_radius() {
        for delta in [0.0, 0.1, 2.0, 50.0] {
            let e = weighted_evar(&[3.25, 3.25, 3.25], &[0.2, 0.3, 0.5], delta).unwrap();
            assert_eq!(e.risk, 3.25);
        }
        let vals = [0.3, 1.7, -2.0, 4.1];
        let w = [0.1, 0.4, 0.3, 0.2];
        let mean: f64 = vals.iter().zip(&w).map(|(v, w)| v * w).sum();
        assert_abs_diff_eq!(weighted_evar(&vals, &w, 0.0).unwrap().risk, mean, epsilon = 1e-12);
    }

    #[test]
    fn evar_lambda_relation() {
        let e = weighted_evar(&[0.0, 1.0, 2.0], &[1.0, 1.0, 1.0], 0.5).unwrap();
        assert_abs_diff_eq!(e.lambda, e.risk - e.beta * 1.5, epsilon = 1e-12);
        assert!(e.beta > 0.0);
        assert_eq!(e.boundary, None);
    }

    #[test]
    fn evar_matches_dense_grid_on_two_points() {
        let (vals, w, delta) = ([0.0, 1.0], [0.5, 0.5], 0.2);
        let g = |beta: f64| beta * ((0.5 + 0.5 * (1.0 / beta).exp()).ln() + delta);
        let points = 100_000;
        let (a, b) = (1e-4f64.ln(), 1e4f64.ln());
        let grid = (0..points)
            .map(|i| g((a + (b - a) * i as f64 / (points - 1) as f64).exp()))
            .fold(f64::INFINITY, f64::min);
        let e = weighted_evar(&vals, &w, delta).unwrap();
        assert!((e.risk - grid).abs() < 1e-4, "{} vs {grid}", e.risk);
    }

    #[test]
    fn evar_huge_delta_tends_to_max() {
        let e = weighted_evar(&[0.0, 1.0, 5.0], &[1.0, 1.0, 1.0], 1e4).unwrap();
        assert!(e.risk <= 5.0);
        assert!(e.risk > 4.99);
    }

    #[test]
    fn mean_rho_has_zero_weighted_average_at_mean() {
        let vals = [1.0, 4.0, 2.5, -0.5];
        let w = [0.1, 0.2, 0.3, 0.4];
        let mean: f64 = vals.iter().zip(&w).map(|(v, w)| v * w).sum();
        let avg: f64 = vals
            .iter()
            .zip(&w)
            .map(|(&y, w)| w * rho(&StatisticSpec::Mean, y, &NuisanceValues::mean(mean)).unwrap()[0])
            .sum();
        assert_abs_diff_eq!(avg, 0.0, epsilon = 1e-15);
    }

    fn sample() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..50).prop_flat_map(|n| {
            (
                proptest::collection::vec(-10.0f64..10.0, n),
                proptest::collection::vec(0.01f64..1.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn uniform_weights_give_empirical_quantile(
            vals in proptest::collection::vec(-100.0f64..100.0, 1..60),
            tau in 0.001f64..0.999,
        ) {
            let mut sorted = vals.clone();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            // smallest k with k / n >= tau
            let k = (1..=n).find(|&k| k as f64 / n as f64 >= tau - 1e-12).unwrap();
            let q = weighted_quantile(&vals, &vec![1.0; n], tau).unwrap();
            prop_assert_eq!(q, sorted[k - 1]);
        }

        #[test]
        fn ordering_quantile_superquantile_evar((vals, w) in sample(), tau in 0.01f64..0.99) {
            let q = weighted_quantile(&vals, &w, tau).unwrap();
            let s = weighted_superquantile(&vals, &w, tau).unwrap();
            let e = weighted_evar(&vals, &w, -(1.0 - tau).ln()).unwrap();
            prop_assert!(q <= s.mu + 1e-12);
            prop_assert!(s.mu <= e.risk + 1e-9, "{} > {}", s.mu, e.risk);
            let vmax = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(e.risk <= vmax);
        }

        #[test]
        fn evar_monotone_in_delta((vals, w) in sample(), d1 in 0.0f64..3.0, step in 0.0f64..3.0) {
            let a = weighted_evar(&vals, &w, d1).unwrap().risk;
            let b = weighted_evar(&vals, &w, d1 + step).unwrap().risk;
            prop_assert!(b >= a - 1e-9, "{a} then {b}");
        }

        #[test]
        fn scale_equivariance((vals, w) in sample(), c in 0.1f64..10.0, tau in 0.05f64..0.95) {
            let scaled: Vec<f64> = vals.iter().map(|v| v * c).collect();
            let q0 = weighted_quantile(&vals, &w, tau).unwrap();
            let q1 = weighted_quantile(&scaled, &w, tau).unwrap();
            prop_assert!((q1 - c * q0).abs() <= 1e-12 * (1.0 + q1.abs()));
            let s0 = weighted_superquantile(&vals, &w, tau).unwrap().mu;
            let s1 = weighted_superquantile(&scaled, &w, tau).unwrap().mu;
            prop_assert!((s1 - c * s0).abs() <= 1e-9 * (1.0 + s1.abs()));
            let e0 = weighted_evar(&vals, &w, 0.7).unwrap().risk;
            let e1 = weighted_evar(&scaled, &w, 0.7).unwrap().risk;
            prop_assert!((e1 - c * e0).abs() <= 1e-7 * (1.0 + e1.abs()));
        }
    }
}
