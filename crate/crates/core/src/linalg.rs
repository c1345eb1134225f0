//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector};

use crate::scalar::{lit, Real};

/// Relative pivot threshold below which a factorization is declared singular.
pub const SINGULAR_RTOL: f64 = 1e-12;

/// Largest absolute entry (max-norm).
pub fn max_abs<T: Real>(a: &DMatrix<T>) -> T {
    a.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

/// Inverts `a` by LU with partial pivoting, or returns `None` when a pivot
/// falls below `SINGULAR_RTOL` times the max-norm of `a`.
pub fn checked_inverse<T: Real>(a: &DMatrix<T>) -> Option<DMatrix<T>> {
    let n = a.nrows();
    if n == 0 || a.ncols() != n {
        return None;
    }
    let scale = max_abs(a);
    if scale == T::zero() || !scale.is_finite() {
        return None;
    }
    let lu = a.clone().lu();
    let u = lu.u();
    let tol = scale * lit(SINGULAR_RTOL);
    if (0..n).any(|i| u[(i, i)].abs() <= tol) {
        return None;
    }
    lu.try_inverse()
}

/// Column-major vec operator.
pub fn vec_of<T: Real>(a: &DMatrix<T>) -> DVector<T> {
    DVector::from_column_slice(a.as_slice())
}

/// Inverse of [`vec_of`] for a square `k x k` result.
pub fn unvec<T: Real>(v: &DVector<T>, k: usize) -> DMatrix<T> {
    assert_eq!(v.len(), k * k, "unvec length");
    DMatrix::from_column_slice(k, k, v.as_slice())
}

/// `(A + A') / 2`.
pub fn symmetric_part<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    (a + a.transpose()) * lit::<T>(0.5)
}

/// `max |A - A'|`.
pub fn asymmetry<T: Real>(a: &DMatrix<T>) -> T {
    let mut m = T::zero();
    for i in 0..a.nrows() {
        for j in 0..i {
            m = m.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    m
}

/// `diag(R S')` computed as `(R * S) 1`, the row-wise inner products.
pub fn diag_of_product<T: Real>(r: &DMatrix<T>, s: &DMatrix<T>) -> DVector<T> {
    assert_eq!(r.shape(), s.shape(), "diag_of_product shapes");
    DVector::from_fn(r.nrows(), |i, _| r.row(i).dot(&s.row(i)))
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue<T: Real>(a: &DMatrix<T>) -> T {
    if a.nrows() == 0 {
        return T::zero();
    }
    symmetric_part(a).symmetric_eigenvalues().min()
}

/// Symmetric inverse square root of a positive definite matrix.
///
/// Returns the offending eigenvalue when the smallest one is below `floor`.
pub fn inverse_sqrt_spd<T: Real>(a: &DMatrix<T>, floor: T) -> Result<DMatrix<T>, T> {
    let eig = symmetric_part(a).symmetric_eigen();
    let min = eig.eigenvalues.min();
    if min < floor {
        return Err(min);
    }
    let d = eig.eigenvalues.map(|l| T::one() / l.sqrt());
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&d) * q.transpose())
}

/// Eigenvalue truncation at zero.
pub fn psd_truncate<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    let eig = symmetric_part(a).symmetric_eigen();
    let d = eig.eigenvalues.map(|l| l.max(T::zero()));
    let q = &eig.eigenvectors;
    q * DMatrix::from_diagonal(&d) * q.transpose()
}

/// `tr(A B)` without forming the product.
pub fn trace_of_product<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    assert_eq!(a.ncols(), b.nrows());
    assert_eq!(a.nrows(), b.ncols());
    let mut t = T::zero();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            t += a[(i, j)] * b[(j, i)];
        }
    }
    t
}
