//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Eigenpairs of a symmetric matrix, eigenvalues sorted descending.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    if n == 0 {
        return (Vec::new(), DMatrix::zeros(0, 0));
    }
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// (min, max) eigenvalue of a symmetric matrix.
pub fn sym_eig_range(m: &DMatrix<f64>) -> (f64, f64) {
    let (values, _) = sym_eigen_desc(m);
    (values[values.len() - 1], values[0])
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn quad(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

/// Largest singular value.
pub fn sigma_max(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// Orthonormal basis of `{v : v' m = 0}` for an `n x k` matrix `m`, as columns.
///
/// Singular values below `rel_tol * sigma_max` count as zero; a zero matrix
/// yields the identity.
pub fn left_null_space(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let n = m.nrows();
    // Pad to at least n columns so the SVD returns a full n x n U.
    let cols = m.ncols().max(n);
    let padded = DMatrix::from_fn(n, cols, |r, c| if c < m.ncols() { m[(r, c)] } else { 0.0 });
    let svd = padded.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sv = &svd.singular_values;
    let smax = sv.max();
    if smax == 0.0 {
        return DMatrix::identity(n, n);
    }
    let threshold = rel_tol * smax;
    let keep: Vec<usize> = (0..sv.len().min(u.ncols()))
        .filter(|&i| sv[i] <= threshold)
        .collect();
    let mut basis = DMatrix::zeros(n, keep.len());
    for (j, &i) in keep.iter().enumerate() {
        basis.set_column(j, &u.column(i));
    }
    basis
}

pub fn to_vec(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_descending() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 3.0]);
        let (vals, vecs) = sym_eigen_desc(&m);
        assert_eq!(vals, vec![3.0, 1.0]);
        assert!((vecs[(1, 0)].abs() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn null_space_of_column() {
        let m = DMatrix::from_column_slice(2, 1, &[0.0, 1.0]);
        let n = left_null_space(&m, 1e-9);
        assert_eq!(n.ncols(), 1);
        assert!((n[(0, 0)].abs() - 1.0).abs() < 1e-12);
        assert!(n[(1, 0)].abs() < 1e-12);
    }

    #[test]
    fn null_space_edge_cases() {
        assert_eq!(left_null_space(&DMatrix::zeros(1, 1), 1e-9), DMatrix::identity(1, 1));
        assert_eq!(left_null_space(&DMatrix::from_element(1, 1, 1.0), 1e-9).ncols(), 0);
        // wide matrix, full row rank
        let wide = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 2.0, 0.0, 1.0, 0.0]);
        assert_eq!(left_null_space(&wide, 1e-9).ncols(), 0);
    }
}
