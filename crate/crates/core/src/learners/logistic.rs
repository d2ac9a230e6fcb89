use log::warn;
use nalgebra::{DMatrix, DVector};

use super::{check_xy, Classifier};
use crate::error::{CdteError, Result};

/// Coefficient norm above which the fit is reported as separated.
const SEPARATION_NORM: f64 = 1e3;
/// Mean negative log-likelihood below which the classes are treated as separated.
const SEPARATION_LL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    /// Intercept first.
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub separated: bool,
}

impl Classifier for LogisticModel {
    fn predict_raw(&self, x: &[f64]) -> f64 {
        let eta = self.coef[0] + self.coef[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>();
        sigmoid(eta)
    }
}

pub(crate) fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

fn log_likelihood(eta: &DVector<f64>, a: &[u8]) -> f64 {
    // log(1 + e^t) computed stably
    let softplus = |t: f64| {
        if t > 0.0 {
            t + (-t).exp().ln_1p()
        } else {
            t.exp().ln_1p()
        }
    };
    eta.iter().zip(a).map(|(&t, &ai)| f64::from(ai) * t - softplus(t)).sum()
}

/// Maximum likelihood logistic regression with an intercept, by iteratively
/// reweighted least squares.
pub fn fit_logistic(x: &[Vec<f64>], a: &[u8], max_iter: usize, tol: f64) -> Result<LogisticModel> {
    let d = check_xy(x, a.len())?;
    let n = a.len();
    let ones = a.iter().filter(|&&v| v == 1).count();
    if ones == 0 || ones == n {
        return Err(CdteError::Precondition(
            "logistic regression needs both classes in the training data".into(),
        ));
    }
    let p = d + 1;
    let design = DMatrix::from_fn(n, p, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
    let target = DVector::from_iterator(n, a.iter().map(|&v| f64::from(v)));
    let mut beta = DVector::zeros(p);
    let mut eta = &design * &beta;
    let mut ll = log_likelihood(&eta, a);
    let mut iterations = 0;
    for _ in 0..max_iter {
        iterations += 1;
        let mu = eta.map(sigmoid);
        let w = mu.map(|m| (m * (1.0 - m)).max(1e-10));
        // Newton step: (X' W X) step = X' (y - mu)
        let mut xtwx = DMatrix::zeros(p, p);
        for i in 0..n {
            let row = design.row(i);
            xtwx += w[i] * row.transpose() * row;
        }
        let grad = design.transpose() * (&target - &mu);
        let step = match xtwx.cholesky() {
            Some(c) => c.solve(&grad),
            None => {
                warn!("logistic regression: singular information matrix after {iterations} iterations");
                break;
            }
        };
        // halve the step until the likelihood does not decrease
        let mut scale = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let cand = &beta + scale * &step;
            let cand_eta = &design * &cand;
            let cand_ll = log_likelihood(&cand_eta, a);
            if cand_ll >= ll - 1e-12 * ll.abs() {
                beta = cand;
                eta = cand_eta;
                let rel = (cand_ll - ll).abs() / ll.abs().max(1e-300);
                ll = cand_ll;
                accepted = true;
                // under separation the likelihood creeps toward zero in
                // ever smaller relative steps while the coefficients grow
                if rel < tol && -ll > SEPARATION_LL * n as f64 {
                    return Ok(finish(beta, -ll / n as f64, iterations));
                }
                break;
            }
            scale *= 0.5;
        }
        if !accepted {
            break;
        }
        if beta.norm() > SEPARATION_NORM {
            break;
        }
    }
    Ok(finish(beta, -ll / n as f64, iterations))
}

fn finish(beta: DVector<f64>, mean_nll: f64, iterations: usize) -> LogisticModel {
    let separated = beta.norm() > SEPARATION_NORM || mean_nll < SEPARATION_LL;
    if separated {
        warn!(
            "logistic regression: coefficient norm {:.3e} suggests complete separation; predictions are clipped",
            beta.norm()
        );
    }
    LogisticModel {
        coef: beta.iter().copied().collect(),
        iterations,
        separated,
    }
}
