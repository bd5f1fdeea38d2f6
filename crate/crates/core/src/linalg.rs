//! Dense least squares by Householder QR.

use thiserror::Error;

use crate::nn::Matrix;

#[derive(Debug, Error, PartialEq)]
pub enum LinalgError {
    #[error("design matrix is rank deficient at column {column}")]
    RankDeficient { column: usize },
    #[error("system has {rows} rows but {cols} unknowns")]
    Underdetermined { rows: usize, cols: usize },
    #[error("right-hand side has {got} rows, design has {expected}")]
    ShapeMismatch { expected: usize, got: usize },
}

/// Relative size below which a pivot counts as zero.
const RANK_TOL: f64 = 1e-10;

/// Solves `min ‖x·B − y‖` column by column; returns `B` as `[d × k]`.
pub fn lstsq(x: &Matrix, y: &Matrix) -> Result<Matrix, LinalgError> {
    let (n, d) = x.shape();
    let k = y.cols();
    if y.rows() != n {
        return Err(LinalgError::ShapeMismatch { expected: n, got: y.rows() });
    }
    if n < d {
        return Err(LinalgError::Underdetermined { rows: n, cols: d });
    }
    // Column-major copies keep the reflector loops contiguous.
    let mut a: Vec<Vec<f64>> = (0..d).map(|j| (0..n).map(|i| x.get(i, j)).collect()).collect();
    let mut b: Vec<Vec<f64>> = (0..k).map(|j| (0..n).map(|i| y.get(i, j)).collect()).collect();
    let scale = a
        .iter()
        .map(|col| col.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);

    for j in 0..d {
        let norm = a[j][j..].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= RANK_TOL * scale.max(f64::MIN_POSITIVE) {
            return Err(LinalgError::RankDeficient { column: j });
        }
        let alpha = if a[j][j] > 0.0 { -norm } else { norm };
        let mut v = a[j][j..].to_vec();
        v[0] -= alpha;
        let vv: f64 = v.iter().map(|t| t * t).sum();
        let reflect = |col: &mut [f64]| {
            let s: f64 = v.iter().zip(&col[j..]).map(|(p, q)| p * q).sum();
            let f = 2.0 * s / vv;
            for (c, vi) in col[j..].iter_mut().zip(&v) {
                *c -= f * vi;
            }
        };
        a[j][j] = alpha;
        a[j][j + 1..].iter_mut().for_each(|t| *t = 0.0);
        for col in a.iter_mut().skip(j + 1) {
            reflect(col);
        }
        for col in b.iter_mut() {
            reflect(col);
        }
    }

    let mut out = Matrix::zeros(d, k);
    for c in 0..k {
        for i in (0..d).rev() {
            let mut s = b[c][i];
            for j in i + 1..d {
                s -= a[j][i] * out.get(j, c);
            }
            out.set(i, c, s / a[i][i]);
        }
    }
    Ok(out)
}
