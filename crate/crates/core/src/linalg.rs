//! Dense helpers for the small symmetric systems the ridge fits produce.

use nalgebra::{DMatrix, DVector};

/// Solve `a x = b` for symmetric positive-definite `a` by Cholesky
/// factorization. Returns `None` if a pivot is not strictly positive
/// (relative to the matrix scale), i.e. the system is singular or
/// indefinite to working precision.
pub fn cholesky_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    debug_assert_eq!(n, b.len());
    let scale = (0..n).map(|i| a[(i, i)].abs()).fold(0.0, f64::max);
    let floor = scale * f64::EPSILON * n.max(1) as f64;

    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > floor) {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }

    // forward: L z = b
    let mut z = DVector::<f64>::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * z[k];
        }
        z[i] = s / l[(i, i)];
    }
    // backward: Lᵀ x = z
    let mut x = DVector::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    Some(x)
}

/// Column means and population standard deviations. A standard deviation
/// that is zero relative to the column's magnitude is replaced by 1.
pub fn column_moments(x: &DMatrix<f64>) -> (Vec<f64>, Vec<f64>) {
    let n = x.nrows().max(1) as f64;
    x.column_iter()
        .map(|col| {
            let mean = col.iter().sum::<f64>() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let std = var.sqrt();
            let guarded = if std.is_finite() && std > 1e-12 * mean.abs().max(1.0) {
                std
            } else {
                1.0
            };
            (mean, guarded)
        })
        .unzip()
}

pub fn standardize(x: &DMatrix<f64>, means: &[f64], stds: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
        (x[(i, j)] - means[j]) / stds[j]
    })
}
