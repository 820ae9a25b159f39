//! Ridge least squares with an unpenalized intercept.

use super::{NumericsError, Tensor};
use nalgebra::DMatrix;

/// Solve `min ‖X w + 1 bᵀ − Y‖² + ridge ‖w‖²`.
///
/// Returns `[d + 1, m]` weights: rows `0..d` are slopes, the last row is the
/// intercept.
pub fn linear_least_squares(x: &Tensor, y: &Tensor, ridge: f64) -> Result<Tensor, NumericsError> {
    let (n, d) = (x.rows(), x.cols());
    let m = y.cols();
    if y.rows() != n {
        return Err(NumericsError::ShapeMismatch {
            op: "linear_least_squares",
            detail: format!("X has {n} rows, Y has {}", y.rows()),
        });
    }
    if n <= d {
        return Err(NumericsError::TooFewRows { needed: d + 1, got: n });
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(NumericsError::Invalid(format!("ridge must be >= 0, got {ridge}")));
    }
    let col_means = |t: &Tensor| -> Vec<f64> {
        (0..t.cols()).map(|c| (0..n).map(|r| t.at(r, c)).sum::<f64>() / n as f64).collect()
    };
    let (mx, my) = (col_means(x), col_means(y));
    let xc = DMatrix::from_fn(n, d, |r, c| x.at(r, c) - mx[c]);
    let yc = DMatrix::from_fn(n, m, |r, c| y.at(r, c) - my[c]);
    let mut gram = xc.transpose() * &xc;
    for i in 0..d {
        gram[(i, i)] += ridge;
    }
    let rhs = xc.transpose() * &yc;
    let chol = gram.clone().cholesky().ok_or(NumericsError::Singular)?;
    // reject numerically singular systems that Cholesky still accepts
    let diag_max = (0..d).map(|i| gram[(i, i)]).fold(0.0, f64::max);
    let l = chol.l();
    let pivot_min = (0..d).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if d > 0 && pivot_min <= diag_max * 1e-13 {
        return Err(NumericsError::Singular);
    }
    let w = chol.solve(&rhs);
    let mut out = Tensor::zeros(&[d + 1, m]);
    for c in 0..m {
        let mut b = my[c];
        for r in 0..d {
            out.set(r, c, w[(r, c)]);
            b -= mx[r] * w[(r, c)];
        }
        out.set(d, c, b);
    }
    Ok(out)
}

/// Apply weights from [`linear_least_squares`].
pub fn predict_linear(x: &Tensor, weights: &Tensor) -> Tensor {
    let d = x.cols();
    let m = weights.cols();
    let mut out = Tensor::zeros(&[x.rows(), m]);
    for r in 0..x.rows() {
        let row = x.row(r);
        for c in 0..m {
            let mut v = weights.at(d, c);
            for (j, xv) in row.iter().enumerate() {
                v += xv * weights.at(j, c);
            }
            out.set(r, c, v);
        }
    }
    out
}
