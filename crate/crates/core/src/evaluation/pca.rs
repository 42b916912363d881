//! Two-component principal component analysis.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};

use crate::error::{ClearError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: Array1<f64>,
    /// `d × 2`, orthonormal columns.
    pub components: Array2<f64>,
    /// Centered data projected onto `components`, `n × 2`.
    pub coords: Array2<f64>,
    /// Share of total variance carried by each component.
    pub explained: [f64; 2],
}

/// Flip `column` so its first entry with magnitude above `tol` is positive.
fn orient(column: &mut [f64]) {
    const TOL: f64 = 1e-12;
    if let Some(&first) = column.iter().find(|x| x.abs() > TOL) {
        if first < 0.0 {
            column.iter_mut().for_each(|x| *x = -*x);
        }
    }
}

/// Sample covariance with denominator `n - 1`.
pub fn covariance(centered: &Array2<f64>) -> Array2<f64> {
    let n = centered.nrows();
    centered.t().dot(centered) / (n as f64 - 1.0)
}

pub fn pca2(x: &Array2<f64>) -> Result<Pca> {
    let (n, d) = x.dim();
    if n < 3 {
        return Err(ClearError::invalid(format!(
            "need at least 3 rows for a 2-D projection, got {n}"
        )));
    }
    if d < 2 {
        return Err(ClearError::invalid("need at least 2 columns"));
    }
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean;
    let cov = covariance(&centered);
    let eig = SymmetricEigen::new(DMatrix::from_fn(d, d, |i, j| cov[[i, j]]));
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let total: f64 = eig.eigenvalues.iter().map(|l| l.max(0.0)).sum();
    let mut components = Array2::zeros((d, 2));
    let mut explained = [0.0; 2];
    for (c, &idx) in order.iter().take(2).enumerate() {
        let mut col: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        orient(&mut col);
        for (i, v) in col.into_iter().enumerate() {
            components[[i, c]] = v;
        }
        explained[c] = if total > 0.0 {
            eig.eigenvalues[idx].max(0.0) / total
        } else {
            0.0
        };
    }
    let coords = centered.dot(&components);
    Ok(Pca {
        mean,
        components,
        coords,
        explained,
    })
}
