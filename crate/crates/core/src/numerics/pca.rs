//! Principal components of mean-centered data and the participation ratio.

use super::{NumericsError, Tensor};
use nalgebra::{DMatrix, SymmetricEigen};

#[derive(Clone, Debug, PartialEq)]
pub struct PcaResult {
    /// Covariance eigenvalues, descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// `[d, d]`; row `i` is the `i`-th principal axis.
    pub axes: Tensor,
    pub mean: Vec<f64>,
}

impl PcaResult {
    /// Coordinates of `data` on the first `k` axes, `[n, k]`.
    pub fn project(&self, data: &Tensor, k: usize) -> Tensor {
        let d = self.mean.len();
        let k = k.min(d);
        let n = data.rows();
        let mut out = Vec::with_capacity(n * k);
        for r in 0..n {
            let row = data.row(r);
            for a in 0..k {
                let axis = self.axes.row(a);
                out.push((0..d).map(|j| (row[j] - self.mean[j]) * axis[j]).sum());
            }
        }
        Tensor::matrix(n, k, out)
    }

    /// Map full-rank projections back to centered coordinates.
    pub fn unproject_centered(&self, coords: &Tensor) -> Tensor {
        let k = coords.cols();
        let axes = self.axes.select_rows(&(0..k).collect::<Vec<_>>());
        coords.matmul(&axes)
    }

    pub fn participation_ratio(&self) -> Result<f64, NumericsError> {
        participation_ratio(&self.eigenvalues)
    }
}

/// Eigendecomposition of the sample covariance of `data` (`[n, d]`, n ≥ 2).
pub fn pca(data: &Tensor) -> Result<PcaResult, NumericsError> {
    let (n, d) = (data.rows(), data.cols());
    if n < 2 {
        return Err(NumericsError::TooFewRows { needed: 2, got: n });
    }
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(data.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for r in 0..n {
        for (c, (v, m)) in centered.iter_mut().zip(data.row(r).iter().zip(&mean)) {
            *c = v - m;
        }
        for i in 0..d {
            let ci = centered[i];
            for j in i..d {
                cov[(i, j)] += ci * centered[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[(i, j)] / (n - 1) as f64;
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let mut axes = Vec::with_capacity(d * d);
    for &i in &order {
        let col = eig.eigenvectors.column(i);
        // sign convention: largest-magnitude component positive
        let pivot = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        axes.extend(col.iter().map(|v| v * sign));
    }
    Ok(PcaResult { eigenvalues, axes: Tensor::matrix(d, d, axes), mean })
}

/// `(Σλ)² / Σλ²`.
pub fn participation_ratio(eigenvalues: &[f64]) -> Result<f64, NumericsError> {
    if eigenvalues.iter().any(|&l| l < 0.0 || !l.is_finite()) {
        return Err(NumericsError::Invalid("eigenvalues must be finite and non-negative".into()));
    }
    let sum: f64 = eigenvalues.iter().sum();
    if sum <= 0.0 {
        return Err(NumericsError::ZeroSpectrum);
    }
    let sq: f64 = eigenvalues.iter().map(|l| l * l).sum();
    Ok(sum * sum / sq)
}
