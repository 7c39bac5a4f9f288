//! Row-major matrix kernels. Loop orders keep the innermost access
//! contiguous so the compiler can vectorise.

use super::Float;

#[inline]
fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub(crate) fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    // Four accumulators break the dependency chain.
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let k = 4 * i;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s += a[k] * b[k];
    }
    s
}

/// `c += a · b` with `a: n×k`, `b: k×m`.
pub(crate) fn gemm_nn<T: Float>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let c_row = &mut c[i * m..(i + 1) * m];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av != T::zero() {
                axpy(av, &b[p * m..(p + 1) * m], c_row);
            }
        }
    }
}

/// `c += a · bᵀ` with `a: n×k`, `b: m×k`.
pub(crate) fn gemm_nt<T: Float>(a: &[T], b: &[T], c: &mut [T], n: usize, k: usize, m: usize) {
    // With many rows it pays to transpose `b` once and stream rows.
    if n >= 8 {
        let mut bt = vec![T::zero(); k * m];
        for j in 0..m {
            for p in 0..k {
                bt[p * m + j] = b[j * k + p];
            }
        }
        gemm_nn(a, &bt, c, n, k, m);
        return;
    }
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            c[i * m + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c += aᵀ · b` with `a: k×n`, `b: k×m`, `c: n×m`.
pub(crate) fn gemm_tn<T: Float>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize, m: usize) {
    for p in 0..k {
        let a_row = &a[p * n..(p + 1) * n];
        let b_row = &b[p * m..(p + 1) * m];
        for (i, &av) in a_row.iter().enumerate() {
            if av != T::zero() {
                axpy(av, b_row, &mut c[i * m..(i + 1) * m]);
            }
        }
    }
}
