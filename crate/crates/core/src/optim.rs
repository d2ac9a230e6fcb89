//! One-dimensional minimization of convex objectives on `(0, inf)`.
//!
//! Golden-section search runs in `u = ln(beta)`, so the bracket may span many
//! orders of magnitude. If the search collapses onto an end of the bracket and
//! that end is no worse than the interior, the end point is returned with a
//! boundary flag instead of an error.

use crate::error::{CdteError, Result};

const INV_PHI: f64 = 0.618_033_988_749_894_9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    Lower,
    Upper,
}

pub struct ScalarConvexProblem<F> {
    pub objective: F,
    pub lo: f64,
    pub hi: f64,
    /// Stop once the bracket width in log space (a relative width) is below this.
    pub tol: f64,
    pub max_iter: usize,
}

impl<F: Fn(f64) -> f64> ScalarConvexProblem<F> {
    pub fn new(objective: F, lo: f64, hi: f64) -> Self {
        ScalarConvexProblem {
            objective,
            lo,
            hi,
            tol: 1e-10,
            max_iter: 200,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMinimum {
    pub argmin: f64,
    pub min_value: f64,
    pub iters: usize,
    pub converged: bool,
    pub boundary: Option<Boundary>,
}

pub fn minimize_scalar<F: Fn(f64) -> f64>(problem: &ScalarConvexProblem<F>) -> Result<ScalarMinimum> {
    let ScalarConvexProblem {
        objective,
        lo,
        hi,
        tol,
        max_iter,
    } = problem;
    if !(lo.is_finite() && hi.is_finite() && *lo > 0.0 && lo < hi) {
        return Err(CdteError::domain(format!(
            "invalid bracket ({lo}, {hi}): need 0 < lo < hi"
        )));
    }
    let eval_at = |beta: f64| -> Result<f64> {
        let v = objective(beta);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(CdteError::Numerical {
                message: format!("objective is not finite at beta = {beta}"),
                last_iterate: beta,
            })
        }
    };
    let eval = |u: f64| eval_at(u.exp());

    let (u_lo, u_hi) = (lo.ln(), hi.ln());
    let (mut a, mut b) = (u_lo, u_hi);
    let mut c = b - (b - a) * INV_PHI;
    let mut d = a + (b - a) * INV_PHI;
    let mut fc = eval(c)?;
    let mut fd = eval(d)?;
    let (mut best_u, mut best_f) = if fc <= fd { (c, fc) } else { (d, fd) };

    let mut iters = 0;
    while iters < *max_iter && (b - a) > *tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - (b - a) * INV_PHI;
            fc = eval(c)?;
            if fc < best_f {
                best_u = c;
                best_f = fc;
            }
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + (b - a) * INV_PHI;
            fd = eval(d)?;
            if fd < best_f {
                best_u = d;
                best_f = fd;
            }
        }
        iters += 1;
    }
    let converged = (b - a) <= *tol;

    // The interior probes never touch the bracket ends; check them when the
    // search has collapsed onto one.
    let mut boundary = None;
    let edge = tol.max(1e-12) * 10.0;
    if (u_hi - b) <= edge {
        let f_hi = eval_at(*hi)?;
        if f_hi <= best_f {
            best_u = u_hi;
            best_f = f_hi;
            boundary = Some(Boundary::Upper);
        }
    } else if (a - u_lo) <= edge {
        let f_lo = eval_at(*lo)?;
        if f_lo <= best_f {
            best_u = u_lo;
            best_f = f_lo;
            boundary = Some(Boundary::Lower);
        }
    }

    Ok(ScalarMinimum {
        argmin: match boundary {
            Some(Boundary::Upper) => *hi,
            Some(Boundary::Lower) => *lo,
            None => best_u.exp(),
        },
        min_value: best_f,
        iters,
        converged,
        boundary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn log_grid_min<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, points: usize) -> (f64, f64) {
        let (a, b) = (lo.ln(), hi.ln());
        (0..points)
            .map(|i| {
                let beta = (a + (b - a) * i as f64 / (points - 1) as f64).exp();
                (beta, f(beta))
            })
            .fold((f64::NAN, f64::INFINITY), |acc, p| if p.1 < acc.1 { p } else { acc })
    }

    #[test]
    fn quadratic_minimum() {
        let p = ScalarConvexProblem::new(|b: f64| (b - 2.0).powi(2), 0.1, 10.0);
        let m = minimize_scalar(&p).unwrap();
        assert!((m.argmin - 2.0).abs() < 1e-8, "{m:?}");
        assert!(m.converged);
        assert_eq!(m.boundary, None);
    }

    #[test]
    fn decreasing_objective_hits_upper_boundary() {
        let p = ScalarConvexProblem::new(|b: f64| 1.0 / b, 0.5, 50.0);
        let m = minimize_scalar(&p).unwrap();
        assert_eq!(m.boundary, Some(Boundary::Upper));
        assert_eq!(m.argmin, 50.0);
        assert_eq!(m.min_value, 1.0 / 50.0);
    }

    #[test]
    fn increasing_objective_hits_lower_boundary() {
        let p = ScalarConvexProblem::new(|b: f64| b, 0.5, 50.0);
        let m = minimize_scalar(&p).unwrap();
        assert_eq!(m.boundary, Some(Boundary::Lower));
        assert_eq!(m.argmin, 0.5);
    }

    #[test]
    fn non_finite_objective_reports_beta() {
        let p = ScalarConvexProblem::new(|b: f64| if b > 3.0 { f64::NAN } else { b }, 1.0, 10.0);
        match minimize_scalar(&p) {
            Err(CdteError::Numerical { last_iterate, .. }) => assert!(last_iterate > 3.0),
            other => panic!("expected numerical error, got {other:?}"),
        }
    }

    #[test]
    fn iteration_cap_respected() {
        let p = ScalarConvexProblem::new(|b: f64| (b - 2.0).powi(2), 0.1, 10.0).with_max_iter(5);
        let m = minimize_scalar(&p).unwrap();
        assert_eq!(m.iters, 5);
        assert!(!m.converged);
    }

    #[test]
    fn tighter_tolerance_never_worse() {
        let f = |b: f64| (b.ln() - 0.3).abs() + 0.1 * b;
        let mut prev = f64::INFINITY;
        for tol in [1e-1, 1e-2, 1e-4, 1e-6, 1e-8, 1e-10] {
            let m = minimize_scalar(&ScalarConvexProblem::new(f, 0.01, 100.0).with_tol(tol)).unwrap();
            assert!(m.min_value <= prev);
            prev = m.min_value;
        }
    }

    proptest! {
        #[test]
        fn piecewise_linear_matches_grid(
            kinks in proptest::collection::vec((0.05f64..20.0, -3.0f64..3.0), 1..6),
            lin in 0.01f64..1.0,
        ) {
            // max of affine pieces in beta plus a positive slope: convex in beta
            let f = |b: f64| {
                kinks.iter().map(|&(k, s)| s * (b - k)).fold(0.0f64, f64::max) + lin * b
            };
            let (lo, hi) = (0.01, 100.0);
            let m = minimize_scalar(&ScalarConvexProblem::new(f, lo, hi)).unwrap();
            let (_, grid_min) = log_grid_min(f, lo, hi, 100_000);
            prop_assert!(m.min_value <= grid_min + 1e-4, "{} vs {}", m.min_value, grid_min);
            prop_assert!(m.min_value >= grid_min - 1e-4 - 1e-3 * grid_min.abs());
        }
    }
}
