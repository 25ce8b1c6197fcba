//! Small dense complex helpers on top of nalgebra.

use nalgebra::{DMatrix, SymmetricEigen};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;

/// Eigenvalues below this fraction of the largest are rounding noise.
const EIGEN_FLOOR: f64 = 1e-13;

/// Compensated (Neumaier) sum.
pub fn accurate_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Largest entry of `|M − M†|`.
pub fn hermitian_deviation(m: &CMatrix) -> f64 {
    (m - m.adjoint()).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Eigenvalues (ascending) and eigenvectors of the Hermitian part of `m`.
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let sym = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = SymmetricEigen::new(sym);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = CMatrix::from_fn(m.nrows(), m.ncols(), |i, j| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}

/// Principal square root of a positive semidefinite Hermitian matrix.
/// Negative and noise-level eigenvalues are clipped to zero.
pub fn psd_sqrt(m: &CMatrix) -> CMatrix {
    let (values, vectors) = hermitian_eigen(m);
    let top = values.iter().copied().fold(0.0, f64::max);
    let floor = EIGEN_FLOOR * top;
    let mut scaled = vectors.clone();
    for (j, &lambda) in values.iter().enumerate() {
        let r = if lambda > floor { lambda.sqrt() } else { 0.0 };
        scaled.column_mut(j).scale_mut(r);
    }
    scaled * vectors.adjoint()
}

/// Sum of singular values.
pub fn nuclear_norm(m: &CMatrix) -> f64 {
    m.clone().singular_values().iter().sum()
}

/// Numerical rank of a real matrix given as rows.
pub fn numeric_rank(rows: &[Vec<f64>], rel_tol: f64) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let cols = rows[0].len();
    let m = DMatrix::<f64>::from_fn(rows.len(), cols, |i, j| rows[i][j]);
    let sv = m.singular_values();
    let top = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > rel_tol * top).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1.0, 1e-16, 1e-16, 1e-16, 1e-16, -1.0];
        assert!((accurate_sum(v) - 4e-16).abs() < 1e-30);
    }

    #[test]
    fn sqrt_squares_back() {
        let a = CMatrix::from_fn(3, 3, |i, j| Complex64::new((i + j) as f64, i as f64 - j as f64));
        let psd = &a * a.adjoint();
        let r = psd_sqrt(&psd);
        assert!((&r * &r - &psd).camax() < 1e-10);
        assert!(hermitian_deviation(&r) < 1e-12);
    }

    #[test]
    fn rank_of_dependent_rows() {
        let rows = vec![vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0], vec![0.0, 1.0, 0.0]];
        assert_eq!(numeric_rank(&rows, 1e-10), 2);
    }
}
