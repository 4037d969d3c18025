//! Row-wise geometric primitives: perpendicular projection, row
//! normalization, and the Newton-Schulz orthogonalization iteration.

use crate::error::Result;
use crate::matrix::{dot, Matrix};

/// Guard below which a row is treated as exactly zero when `eps == 0`.
/// This keeps the projection and normalization total without changing any
/// value a test at 1e-12 tolerance could observe.
pub const ZERO_ROW_GUARD: f64 = 1e-300;

/// Relative threshold below which a projection residual row is treated as
/// exactly zero. When an input row is (numerically) parallel to the weight
/// row, the true residual is zero and what remains is rounding noise; left
/// alone, normalization would inflate that noise into a full unit row
/// pointing along the weight. Zeroing costs at most 1e-12 of the row norm.
pub const PARALLEL_RESIDUAL_GUARD: f64 = 1e-12;

/// Removes from each row of `x` its component along the matching row of `w`.
///
/// Rows of `w` with zero norm pass the corresponding row of `x` through
/// unchanged; use [`row_perp_project_counted`] to observe how often that
/// happened.
pub fn row_perp_project(x: &Matrix, w: &Matrix) -> Result<Matrix> {
    row_perp_project_counted(x, w).map(|(m, _)| m)
}

/// Same as [`row_perp_project`], also returning the number of zero-norm
/// weight rows that were passed through unprojected.
pub fn row_perp_project_counted(x: &Matrix, w: &Matrix) -> Result<(Matrix, usize)> {
    x.same_shape(w)?;
    let mut out = x.clone();
    let mut zero_rows = 0usize;
    for i in 0..x.rows() {
        let wr = w.row(i);
        let wnorm_sq = dot(wr, wr);
        if wnorm_sq <= ZERO_ROW_GUARD {
            zero_rows += 1;
            continue;
        }
        let xnorm_sq = dot(x.row(i), x.row(i));
        let coeff = dot(x.row(i), wr) / wnorm_sq;
        let or = out.row_mut(i);
        for (o, &wv) in or.iter_mut().zip(wr) {
            *o -= coeff * wv;
        }
        let rnorm_sq = dot(or, or);
        if rnorm_sq <= PARALLEL_RESIDUAL_GUARD * PARALLEL_RESIDUAL_GUARD * xnorm_sq {
            or.fill(0.0);
        }
    }
    Ok((out, zero_rows))
}

/// Rescales each row to unit Euclidean norm; rows with norm <= `eps` map to
/// the zero row (the 0/0 = 0 convention). `eps = 0` selects the exact-theory
/// mode with only a denormal guard.
pub fn row_normalize(x: &Matrix, eps: f64) -> Matrix {
    debug_assert!(eps >= 0.0);
    let threshold = eps.max(ZERO_ROW_GUARD);
    let mut out = x.clone();
    for i in 0..x.rows() {
        let r = out.row_mut(i);
        let norm = dot(r, r).sqrt();
        if norm <= threshold {
            r.fill(0.0);
        } else {
            let inv = 1.0 / norm;
            for v in r.iter_mut() {
                *v *= inv;
            }
        }
    }
    out
}

/// Newton-Schulz iteration X <- X (3I - X^T X) / 2.
///
/// The caller is expected to pre-scale the input (X0 = x / ||x||_F) so the
/// iteration starts inside its basin of convergence. When `m > n` the
/// transpose is iterated and transposed back, so the square Gram factor
/// always has the smaller dimension. Each iteration forms A = X X^T and
/// A X, which is the same recursion with the Gram product on the small side.
pub fn newton_schulz(x: &Matrix, iters: usize) -> Matrix {
    assert!(iters >= 1, "newton_schulz requires iters >= 1");
    let transposed = x.rows() > x.cols();
    let mut cur = if transposed { x.transpose() } else { x.clone() };
    for _ in 0..iters {
        // A = X X^T  (m x m with m <= n)
        let a = cur.matmul(&cur.transpose()).expect("conforming shapes");
        // X <- 1.5 X - 0.5 A X
        let ax = a.matmul(&cur).expect("conforming shapes");
        let mut next = cur.scale(1.5);
        next.axpy(-0.5, &ax).expect("conforming shapes");
        cur = next;
    }
    if transposed {
        cur.transpose()
    } else {
        cur
    }
}
