use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

const RANK_TOL: f64 = 1e-10;

/// Indices of columns of `x` that are (numerically) linear combinations of
/// earlier columns, by modified Gram-Schmidt with a relative tolerance.
pub(crate) fn dependent_columns(x: &DMatrix<f64>) -> Vec<usize> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut dependent = Vec::new();
    for j in 0..x.ncols() {
        let col = x.column(j).into_owned();
        let norm = col.norm();
        let mut r = col;
        for q in &basis {
            let d = q.dot(&r);
            r.axpy(-d, q, 1.0);
        }
        let rn = r.norm();
        if norm == 0.0 || rn <= RANK_TOL * norm {
            dependent.push(j);
        } else {
            basis.push(r / rn);
        }
    }
    dependent
}

/// Solves the normal equations `x'x b = x'y` after checking that `x` has full
/// column rank. `names` label the columns in error messages.
pub(crate) fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>, names: &[String]) -> Result<DVector<f64>> {
    let dep = dependent_columns(x);
    if !dep.is_empty() {
        let cols: Vec<&str> = dep.iter().map(|&j| names.get(j).map_or("?", |s| s.as_str())).collect();
        return Err(Error::numeric(format!(
            "design matrix is rank deficient (rank {} of {}); collinear columns: {}",
            x.ncols() - dep.len(),
            x.ncols(),
            cols.join(", ")
        )));
    }
    let xtx = x.tr_mul(x);
    let xty = x.tr_mul(y);
    xtx.col_piv_qr()
        .solve(&xty)
        .ok_or_else(|| Error::numeric("normal equations are singular"))
}

/// Inverse of a symmetric positive definite matrix.
pub(crate) fn spd_inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| a.clone().try_inverse())
        .ok_or_else(|| Error::numeric("matrix is not invertible"))
}
