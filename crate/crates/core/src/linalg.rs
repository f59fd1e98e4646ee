//! Thin adapters between `ndarray` storage and `nalgebra` factorizations for
//! the small dense systems that show up in the solver ((p+q+m)-sized at most).

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};

pub(crate) fn to_na(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_row_iterator(a.nrows(), a.ncols(), a.iter().copied())
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Array2<f64> {
    Array2::from_shape_fn((m.nrows(), m.ncols()), |(i, j)| m[(i, j)])
}

/// Solves `A x = b` for symmetric positive (semi)definite `A`, preferring
/// Cholesky and falling back to LU with partial pivoting.
pub(crate) fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Option<Array1<f64>> {
    let na = to_na(a);
    let nb = DVector::from_iterator(b.len(), b.iter().copied());
    let sol = match na.clone().cholesky() {
        Some(chol) => chol.solve(&nb),
        None => na.lu().solve(&nb)?,
    };
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(Array1::from_iter(sol.iter().copied()))
}

/// Solves `A X = B` via LU; `None` if singular or non-finite.
pub(crate) fn lu_solve_mat(a: &Array2<f64>, b: &Array2<f64>) -> Option<Array2<f64>> {
    let na = to_na(a);
    let nb = to_na(b);
    let sol = na.lu().solve(&nb)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(from_na(&sol))
}

pub(crate) fn invert(a: &Array2<f64>) -> Option<Array2<f64>> {
    let inv = to_na(a).try_inverse()?;
    if inv.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(from_na(&inv))
}

/// Eigendecomposition of a symmetric matrix: `(eigenvalues, eigenvectors)`
/// with eigenvectors in columns.
pub(crate) fn sym_eigen(a: &Array2<f64>) -> (Array1<f64>, Array2<f64>) {
    let eig = to_na(a).symmetric_eigen();
    (
        Array1::from_iter(eig.eigenvalues.iter().copied()),
        from_na(&eig.eigenvectors),
    )
}

pub(crate) fn min_sym_eigenvalue(a: &Array2<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let (vals, _) = sym_eigen(a);
    vals.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Nearest positive-semidefinite projection of a symmetric matrix: negative
/// eigenvalues are truncated at zero and the matrix reassembled. Returns the
/// projected matrix and how many eigenvalues were truncated; the input is
/// returned unchanged (and the count is zero) when it is already PSD.
pub(crate) fn psd_project(a: &Array2<f64>) -> (Array2<f64>, usize) {
    if a.nrows() == 0 {
        return (a.clone(), 0);
    }
    let (vals, vecs) = sym_eigen(a);
    let clipped = vals.iter().filter(|v| **v < 0.0).count();
    if clipped == 0 {
        return (a.clone(), 0);
    }
    let clamped = vals.mapv(|v| v.max(0.0));
    let scaled = &vecs * &clamped; // column u scaled by eigenvalue u
    let mut proj = scaled.dot(&vecs.t());
    proj = (&proj + &proj.t()) / 2.0;
    (proj, clipped)
}
