//! Least squares on a design with an intercept column.

use nalgebra::{DMatrix, DVector};

use crate::error::{CdteError, Result};

const RANK_TOL: f64 = 1e-9;

/// QR solution of `min ||X b - y||` plus the unscaled covariance `(X'X)^-1`.
pub(crate) struct LeastSquares {
    pub coef: DVector<f64>,
    pub xtx_inv: DMatrix<f64>,
}

/// Column names used in singular-design errors: the first column is the
/// intercept when `intercept` is set, then `x0, x1, ...`.
pub(crate) fn column_name(j: usize, intercept: bool, names: Option<&[String]>) -> String {
    match (intercept, j) {
        (true, 0) => "intercept".to_string(),
        _ => {
            let k = if intercept { j - 1 } else { j };
            names.and_then(|n| n.get(k).cloned()).unwrap_or_else(|| format!("x{k}"))
        }
    }
}

pub(crate) fn least_squares(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    intercept: bool,
    names: Option<&[String]>,
) -> Result<LeastSquares> {
    let (n, p) = x.shape();
    if n <= p {
        return Err(CdteError::Precondition(format!(
            "least squares needs more rows than columns, got n = {n}, p = {p}"
        )));
    }
    let qr = x.clone().qr();
    let r = qr.r();
    for j in 0..p {
        let col_norm = x.column(j).norm();
        if r[(j, j)].abs() <= RANK_TOL * col_norm.max(1.0) {
            return Err(CdteError::SingularDesign {
                column: j,
                name: column_name(j, intercept, names),
            });
        }
    }
    let qty = qr.q().transpose() * y;
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| CdteError::SingularDesign {
            column: p - 1,
            name: column_name(p - 1, intercept, names),
        })?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(p, p))
        .ok_or_else(|| CdteError::SingularDesign {
            column: p - 1,
            name: column_name(p - 1, intercept, names),
        })?;
    let xtx_inv = &r_inv * r_inv.transpose();
    Ok(LeastSquares { coef, xtx_inv })
}

/// Design matrix `[1, x]` from row-major features.
pub(crate) fn design_with_intercept(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let n = rows.len();
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { rows[i][j - 1] })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_and_inverse() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let x = design_with_intercept(&rows);
        let y = DVector::from_iterator(10, rows.iter().map(|r| 1.0 + 2.0 * r[0] - 0.5 * r[1]));
        let ls = least_squares(&x, &y, true, None).unwrap();
        assert!((ls.coef[0] - 1.0).abs() < 1e-10);
        assert!((ls.coef[1] - 2.0).abs() < 1e-10);
        assert!((ls.coef[2] + 0.5).abs() < 1e-10);
        let xtx = x.transpose() * &x;
        let eye = xtx * ls.xtx_inv;
        assert!((eye - DMatrix::identity(3, 3)).abs().max() < 1e-8);
    }

    #[test]
    fn duplicated_column_is_named() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, i as f64]).collect();
        let x = design_with_intercept(&rows);
        let y = DVector::from_element(10, 1.0);
        match least_squares(&x, &y, true, None) {
            Err(CdteError::SingularDesign { column, name }) => {
                assert_eq!(column, 2);
                assert_eq!(name, "x1");
            }
            other => panic!("expected singular design, got {:?}", other.map(|l| l.coef)),
        }
    }
}
