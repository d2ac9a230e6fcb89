use nalgebra::DVector;

use super::{check_xy, Regressor};
use crate::error::Result;
use crate::linalg::{design_with_intercept, least_squares};

/// `y = coef[0] + coef[1..] . x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub coef: Vec<f64>,
    n: usize,
}

impl LinearModel {
    pub fn new(coef: Vec<f64>, n: usize) -> Self {
        LinearModel { coef, n }
    }
}

impl Regressor for LinearModel {
    fn predict(&self, x: &[f64]) -> f64 {
        self.coef[0] + self.coef[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>()
    }
    fn n_features(&self) -> usize {
        self.coef.len() - 1
    }
    fn n_train(&self) -> usize {
        self.n
    }
}

/// Ordinary least squares with an intercept, solved by Householder QR.
pub fn fit_ols(x: &[Vec<f64>], y: &[f64]) -> Result<LinearModel> {
    check_xy(x, y.len())?;
    let design = design_with_intercept(x);
    let target = DVector::from_column_slice(y);
    let ls = least_squares(&design, &target, true, None)?;
    Ok(LinearModel {
        coef: ls.coef.iter().copied().collect(),
        n: y.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::CdteError;
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    #[test]
    fn exact_linear_target() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64 * 0.1, (i % 3) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| 0.5 - r[0] + 3.0 * r[1]).collect();
        let m = fit_ols(&x, &y).unwrap();
        for (r, t) in x.iter().zip(&y) {
            assert!((m.predict(r) - t).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_target() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64 % 7.0]).collect();
        let m = fit_ols(&x, &[4.0; 10]).unwrap();
        assert!((m.coef[0] - 4.0).abs() < 1e-10);
        assert!(m.coef[1..].iter().all(|c| c.abs() < 1e-10));
    }

    #[test]
    fn duplicated_column() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64, i as f64]).collect();
        let err = fit_ols(&x, &[1.0; 10]).unwrap_err();
        assert!(matches!(err, CdteError::SingularDesign { column: 3, .. }), "{err}");
        assert!(err.to_string().contains("x2"));
    }

    proptest! {
        #[test]
        fn matches_dense_normal_equations(
            (n, p, seed) in (12usize..200, 1usize..10, any::<u64>())
                .prop_filter("n > 2p", |(n, p, _)| *n > 2 * *p)
        ) {
            use rand::Rng;
            let mut rng = crate::rng::rng_from_seed(seed);
            let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random::<f64>()).collect()).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let m = fit_ols(&x, &y).unwrap();
            // independent oracle: Gauss-Jordan on X'X b = X'y
            let xd = DMatrix::from_fn(n, p + 1, |i, j| if j == 0 { 1.0 } else { x[i][j - 1] });
            let xtx = xd.transpose() * &xd;
            let xty = xd.transpose() * DVector::from_column_slice(&y);
            let b = xtx.lu().solve(&xty).unwrap();
            for j in 0..=p {
                prop_assert!((m.coef[j] - b[j]).abs() < 1e-8, "{} vs {}", m.coef[j], b[j]);
            }
        }
    }
}
