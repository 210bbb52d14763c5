//! Dense kernels for the small symmetric positive definite systems that show
//! up throughout: working covariances (T x T), information matrices (p x p),
//! and the empirical-likelihood dual Hessian. Sizes are tiny, so a hand-rolled
//! Cholesky beats dragging in a LAPACK backend.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};

/// Lower-triangular Cholesky factor, or `None` when a pivot falls below the
/// positive-definiteness floor (relative to the largest diagonal entry).
pub(crate) fn cholesky(a: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    debug_assert_eq!(n, a.ncols());
    let scale = (0..n)
        .map(|i| a[[i, i]].abs())
        .fold(0.0f64, f64::max)
        .max(1.0);
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if d.is_nan() || d <= scale * 1e-13 {
            return None;
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut v = a[[i, j]];
            for k in 0..j {
                v -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = v / dj;
        }
    }
    Some(l)
}

/// Solves `L L' x = b` given the lower Cholesky factor.
pub(crate) fn cholesky_solve_vec(l: &Array2<f64>, b: ArrayView1<'_, f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut x = b.to_owned();
    for i in 0..n {
        let mut v = x[i];
        for k in 0..i {
            v -= l[[i, k]] * x[k];
        }
        x[i] = v / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut v = x[i];
        for k in (i + 1)..n {
            v -= l[[k, i]] * x[k];
        }
        x[i] = v / l[[i, i]];
    }
    x
}

/// Solves `L L' X = B` column by column.
pub(crate) fn cholesky_solve_mat(l: &Array2<f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((b.nrows(), b.ncols()));
    for (c, col) in b.columns().into_iter().enumerate() {
        let x = cholesky_solve_vec(l, col);
        out.column_mut(c).assign(&x);
    }
    out
}

pub(crate) fn solve_spd_vec(a: ArrayView2<'_, f64>, b: ArrayView1<'_, f64>) -> Option<Array1<f64>> {
    let l = cholesky(a)?;
    Some(cholesky_solve_vec(&l, b))
}

pub(crate) fn solve_spd_mat(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
    let l = cholesky(a)?;
    Some(cholesky_solve_mat(&l, b))
}

/// Inverse of a symmetric positive definite matrix.
pub(crate) fn inv_spd(a: ArrayView2<'_, f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let eye = Array2::<f64>::eye(n);
    solve_spd_mat(a, eye.view())
}

/// `tr(A B)` without forming the product.
pub(crate) fn trace_product(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut tr = 0.0;
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            tr += a[[i, j]] * b[[j, i]];
        }
    }
    tr
}

pub(crate) fn norm2(v: ArrayView1<'_, f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{arr1, arr2};

    #[test]
    fn cholesky_recovers_known_factor() {
        let a = arr2(&[[4.0, 2.0], [2.0, 5.0]]);
        let l = cholesky(a.view()).expect("spd");
        assert_abs_diff_eq!(l[[0, 0]], 2.0, epsilon = 1e-14);
        assert_abs_diff_eq!(l[[1, 0]], 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(l[[1, 1]], 2.0, epsilon = 1e-14);
    }

    #[test]
    fn solve_matches_direct_inverse() {
        let a = arr2(&[[3.0, 1.0, 0.2], [1.0, 2.0, 0.4], [0.2, 0.4, 1.5]]);
        let b = arr1(&[1.0, -2.0, 0.5]);
        let x = solve_spd_vec(a.view(), b.view()).unwrap();
        let back = a.dot(&x);
        for i in 0..3 {
            assert_abs_diff_eq!(back[i], b[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn inverse_times_matrix_is_identity() {
        let a = arr2(&[[2.0, 0.5], [0.5, 1.0]]);
        let inv = inv_spd(a.view()).unwrap();
        let prod = a.dot(&inv);
        for i in 0..2 {
            for j in 0..2 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(prod[[i, j]], want, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = arr2(&[[1.0, 2.0], [2.0, 1.0]]);
        assert!(cholesky(a.view()).is_none());
    }

    #[test]
    fn trace_product_agrees_with_explicit_product() {
        let a = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = arr2(&[[0.5, -1.0], [2.0, 0.25]]);
        let direct = a.dot(&b);
        assert_abs_diff_eq!(
            trace_product(a.view(), b.view()),
            direct[[0, 0]] + direct[[1, 1]],
            epsilon = 1e-14
        );
    }
}
