//! Dense symmetric positive-definite kernels.
//!
//! Matrices are row-major `ndarray` arrays; products go through
//! `ndarray`'s GEMM. Factorisations are lower Cholesky `A = L Lᵀ`.

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis};

use crate::error::{Error, Result};

/// Column block used by the blocked factorisation and solves.
const BLOCK: usize = 96;

/// Factors `a` in place into its lower Cholesky factor; the strict upper
/// triangle is zeroed.
pub fn cholesky_in_place(a: &mut Array2<f64>) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Input(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut k0 = 0;
    while k0 < n {
        let k1 = (k0 + BLOCK).min(n);
        if k0 > 0 {
            let update = a.slice(s![k0.., ..k0]).dot(&a.slice(s![k0..k1, ..k0]).t());
            let mut panel = a.slice_mut(s![k0.., k0..k1]);
            panel -= &update;
        }
        // Diagonal block.
        for j in k0..k1 {
            let mut d = a[[j, j]];
            for c in k0..j {
                d -= a[[j, c]] * a[[j, c]];
            }
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::Numerical(format!(
                    "matrix is not positive definite (pivot {j} = {d:e})"
                )));
            }
            let ljj = d.sqrt();
            a[[j, j]] = ljj;
            for i in (j + 1)..k1 {
                let mut v = a[[i, j]];
                for c in k0..j {
                    v -= a[[i, c]] * a[[j, c]];
                }
                a[[i, j]] = v / ljj;
            }
        }
        // Rows below the block: L[r, k0..k1] = A[r, k0..k1] L_kk^{-T}.
        if k1 < n {
            let (top, mut bottom) = a.view_mut().split_at(Axis(0), k1);
            let diag = top.slice(s![k0..k1, k0..k1]);
            for mut row in bottom.rows_mut() {
                let seg = row.slice_mut(s![k0..k1]);
                forward_row(diag, seg);
            }
        }
        k0 = k1;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            a[[i, j]] = 0.0;
        }
    }
    Ok(())
}

/// Solves `x L_kkᵀ = b` for one row `b` in place, where `L_kk` is lower.
fn forward_row(l: ArrayView2<f64>, mut b: ndarray::ArrayViewMut1<f64>) {
    let m = l.nrows();
    for j in 0..m {
        let mut v = b[j];
        for c in 0..j {
            v -= b[c] * l[[j, c]];
        }
        b[j] = v / l[[j, j]];
    }
}

/// Lower Cholesky factor of `a`.
pub fn cholesky(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let mut l = a.to_owned();
    cholesky_in_place(&mut l)?;
    Ok(l)
}

/// Solves `L x = b` in place for a single right-hand side.
pub fn solve_lower_in_place(l: &ArrayView2<f64>, b: &mut [f64]) {
    let n = b.len();
    debug_assert_eq!(l.nrows(), n);
    for i in 0..n {
        let row = l.row(i);
        let mut v = b[i];
        if let Some(slice) = row.as_slice() {
            v -= dot(&slice[..i], &b[..i]);
        } else {
            for j in 0..i {
                v -= row[j] * b[j];
            }
        }
        b[i] = v / row[i];
    }
}

/// Solves `L X = B` in place for a block of right-hand sides (`B` is n×k).
pub fn solve_lower_multi(l: &ArrayView2<f64>, mut b: ArrayViewMut2<f64>) {
    let n = l.nrows();
    debug_assert_eq!(b.nrows(), n);
    let mut k0 = 0;
    while k0 < n {
        let k1 = (k0 + BLOCK).min(n);
        if k0 > 0 {
            let (solved, mut rest) = b.view_mut().split_at(Axis(0), k0);
            let update = l.slice(s![k0..k1, ..k0]).dot(&solved);
            let mut blk = rest.slice_mut(s![..(k1 - k0), ..]);
            blk -= &update;
        }
        for i in k0..k1 {
            for c in k0..i {
                let lic = l[[i, c]];
                if lic != 0.0 {
                    let (upper, mut lower) = b.view_mut().split_at(Axis(0), i);
                    let src = upper.row(c);
                    let mut dst = lower.row_mut(0);
                    dst.scaled_add(-lic, &src);
                }
            }
            let lii = l[[i, i]];
            b.row_mut(i).mapv_inplace(|v| v / lii);
        }
        k0 = k1;
    }
}

/// Inverse of a symmetric positive-definite matrix.
pub fn spd_inverse(a: &ArrayView2<f64>) -> Result<Array2<f64>> {
    let l = cholesky(a)?;
    let n = l.nrows();
    let mut linv = Array2::eye(n);
    solve_lower_multi(&l.view(), linv.view_mut());
    let inv = linv.t().dot(&linv);
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("inverse has non-finite entries".into()));
    }
    Ok(symmetrize(inv))
}

/// `log det A` for symmetric positive-definite `A`.
pub fn log_det_spd(a: &ArrayView2<f64>) -> Result<f64> {
    let l = cholesky(a)?;
    Ok(log_det_from_factor(&l.view()))
}

pub fn log_det_from_factor(l: &ArrayView2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>()
}

/// `U Uᵀ` for row-feature matrix `U` (n×p), computing one triangle and
/// mirroring it.
pub fn gram_rows(u: &ArrayView2<f64>) -> Array2<f64> {
    let n = u.nrows();
    let mut g = Array2::zeros((n, n));
    let blk = 256;
    let mut i0 = 0;
    while i0 < n {
        let i1 = (i0 + blk).min(n);
        let block = u.slice(s![i0..i1, ..]).dot(&u.slice(s![..i1, ..]).t());
        g.slice_mut(s![i0..i1, ..i1]).assign(&block);
        i0 = i1;
    }
    for i in 0..n {
        for j in (i + 1)..n {
            g[[i, j]] = g[[j, i]];
        }
    }
    g
}

/// Replaces `a` by `(a + aᵀ) / 2`.
pub fn symmetrize(mut a: Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            a[[i, j]] = v;
            a[[j, i]] = v;
        }
    }
    a
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise without reassociation.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = 4 * c;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in (4 * chunks)..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}
