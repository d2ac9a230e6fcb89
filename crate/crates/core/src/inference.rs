//! Best-linear-projection inference: OLS of pseudo-outcomes on a feature map
//! with HC1 sandwich covariance and normal confidence intervals.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{CdteError, Result};
use crate::linalg::least_squares;
use crate::pseudo::PseudoOutcomes;
use crate::rng::{child_rng, Rng};

/// `phi(x)`, always with a leading intercept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "columns", rename_all = "lowercase")]
pub enum FeatureMap {
    /// `(1, x)`.
    Linear,
    /// `(1, x[c0], x[c1], ...)`.
    Columns(Vec<usize>),
}

impl FeatureMap {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim(x.len()));
        out.push(1.0);
        match self {
            FeatureMap::Linear => out.extend_from_slice(x),
            FeatureMap::Columns(cols) => out.extend(cols.iter().map(|&c| x[c])),
        }
        out
    }

    /// Length of `phi(x)` for covariates of dimension `d`.
    pub fn dim(&self, d: usize) -> usize {
        match self {
            FeatureMap::Linear => d + 1,
            FeatureMap::Columns(cols) => cols.len() + 1,
        }
    }

    pub fn names(&self, feature_names: &[String]) -> Vec<String> {
        let mut out = vec!["intercept".to_string()];
        match self {
            FeatureMap::Linear => out.extend(feature_names.iter().cloned()),
            FeatureMap::Columns(cols) => out.extend(cols.iter().map(|&c| feature_names[c].clone())),
        }
        out
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if let FeatureMap::Columns(cols) = self {
            if let Some(&c) = cols.iter().find(|&&c| c >= d) {
                return Err(CdteError::config(format!(
                    "projection column {c} is out of range for d = {d}"
                )));
            }
        }
        Ok(())
    }
}

pub const COV_SCALE_NOTE: &str = "cov is the HC1 covariance of coef itself (already divided by n)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionResult {
    pub names: Vec<String>,
    pub coef: Vec<f64>,
    pub stderr: Vec<f64>,
    pub ci_lower: Vec<f64>,
    pub ci_upper: Vec<f64>,
    pub level: f64,
    pub n: usize,
    pub cov: Vec<Vec<f64>>,
    pub cov_scale: String,
}

impl ProjectionResult {
    pub fn covers(&self, j: usize, value: f64) -> bool {
        self.ci_lower[j] <= value && value <= self.ci_upper[j]
    }
}

/// Two-sided normal critical value at confidence `level`.
pub fn normal_critical_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(CdteError::config(format!(
            "confidence level must lie in (0, 1), got {level}"
        )));
    }
    Ok(Normal::new(0.0, 1.0)
        .expect("standard normal")
        .inverse_cdf(0.5 + level / 2.0))
}

pub fn ols_project(psi: &PseudoOutcomes, phi: &[Vec<f64>], level: f64) -> Result<ProjectionResult> {
    ols_project_values(&psi.values, phi, None, level)
}

/// OLS of `y` on rows `phi` (which include the intercept column) with HC1
/// covariance `(P'P)^-1 (sum e_i^2 p_i p_i') (P'P)^-1 * n / (n - p)`.
pub fn ols_project_values(
    y: &[f64],
    phi: &[Vec<f64>],
    names: Option<&[String]>,
    level: f64,
) -> Result<ProjectionResult> {
    let z = normal_critical_value(level)?;
    let n = y.len();
    if phi.len() != n {
        return Err(CdteError::Precondition(format!(
            "{} feature rows for {n} outcomes",
            phi.len()
        )));
    }
    let p = phi.first().map_or(0, |r| r.len());
    if p == 0 || phi.iter().any(|r| r.len() != p) {
        return Err(CdteError::Precondition(
            "feature rows must share a positive length".into(),
        ));
    }
    if n <= p {
        return Err(CdteError::Precondition(format!(
            "projection needs n > p, got n = {n}, p = {p}"
        )));
    }
    let design = DMatrix::from_fn(n, p, |i, j| phi[i][j]);
    let target = DVector::from_column_slice(y);
    let col_names: Vec<String> = match names {
        Some(nm) => nm.to_vec(),
        None => (0..p)
            .map(|j| if j == 0 { "intercept".into() } else { format!("phi{j}") })
            .collect(),
    };
    // names passed without the intercept convention so column j maps to names[j]
    let ls = least_squares(&design, &target, false, Some(&col_names))?;
    let resid = &target - &design * &ls.coef;
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..n {
        let row = design.row(i);
        meat += resid[i] * resid[i] * row.transpose() * row;
    }
    let scale = n as f64 / (n - p) as f64;
    let cov = &ls.xtx_inv * meat * &ls.xtx_inv * scale;
    let cov = (&cov + cov.transpose()) * 0.5;
    let coef: Vec<f64> = ls.coef.iter().copied().collect();
    let stderr: Vec<f64> = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();
    Ok(ProjectionResult {
        names: col_names,
        ci_lower: coef.iter().zip(&stderr).map(|(c, s)| c - z * s).collect(),
        ci_upper: coef.iter().zip(&stderr).map(|(c, s)| c + z * s).collect(),
        coef,
        stderr,
        level,
        n,
        cov: (0..p).map(|i| (0..p).map(|j| cov[(i, j)]).collect()).collect(),
        cov_scale: COV_SCALE_NOTE.to_string(),
    })
}

const PROJECTION_CHUNK: usize = 50_000;

/// Population projection coefficient of `truth` on `phi`, approximated by OLS
/// over `draws` covariate samples. Normal equations are accumulated in
/// parallel chunks with seeds derived from `seed`, then solved by Cholesky.
pub fn true_projection_coef<T, S>(
    truth: T,
    feature_map: &FeatureMap,
    sample_x: S,
    draws: usize,
    seed: u64,
) -> Result<Vec<f64>>
where
    T: Fn(&[f64]) -> f64 + Sync,
    S: Fn(&mut Rng) -> Vec<f64> + Sync,
{
    let chunks = draws.div_ceil(PROJECTION_CHUNK);
    let partial: Vec<(DMatrix<f64>, DVector<f64>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = child_rng(seed, &[c as u64]);
            let m = PROJECTION_CHUNK.min(draws - c * PROJECTION_CHUNK);
            let mut xtx: Option<DMatrix<f64>> = None;
            let mut xty: Option<DVector<f64>> = None;
            for _ in 0..m {
                let x = sample_x(&mut rng);
                let f = DVector::from_vec(feature_map.apply(&x));
                let t = truth(&x);
                let p = f.len();
                let a = xtx.get_or_insert_with(|| DMatrix::zeros(p, p));
                a.syger(1.0, &f, &f, 1.0);
                *xty.get_or_insert_with(|| DVector::zeros(p)) += &f * t;
            }
            (xtx.expect("chunk is non-empty"), xty.expect("chunk is non-empty"))
        })
        .collect();
    let mut parts = partial.into_iter();
    let (mut xtx, mut xty) = parts
        .next()
        .ok_or_else(|| CdteError::config("projection oracle needs at least one draw"))?;
    for (a, b) in parts {
        xtx += a;
        xty += b;
    }
    // syger fills the lower triangle only
    let p = xtx.nrows();
    for i in 0..p {
        for j in (i + 1)..p {
            xtx[(i, j)] = xtx[(j, i)];
        }
    }
    let chol = xtx.cholesky().ok_or_else(|| CdteError::SingularDesign {
        column: p - 1,
        name: "projection features".into(),
    })?;
    Ok(chol.solve(&xty).iter().copied().collect())
}
