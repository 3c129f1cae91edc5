//! Strided dense products used by the matrix type and the layer kernels.
//!
//! All three variants accumulate each output element in increasing order of
//! the shared dimension, starting from zero, so results are bit-identical to
//! a naive triple loop. Leading dimensions allow operating on a column prefix
//! of a wider row-major buffer without copying it.

use crate::flops;

/// `c[m×n] = a[m×k] · b[k×n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mm_nn(
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    flops::add_macs(m * k * n);
    for i in 0..m {
        let crow = &mut c[i * ldc..i * ldc + n];
        crow.fill(0.0);
        let arow = &a[i * lda..i * lda + k];
        for (p, &aip) in arow.iter().enumerate() {
            let brow = &b[p * ldb..p * ldb + n];
            for (cij, &bpj) in crow.iter_mut().zip(brow) {
                *cij += aip * bpj;
            }
        }
    }
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mm_nt(
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    flops::add_macs(m * k * n);
    for i in 0..m {
        let arow = &a[i * lda..i * lda + k];
        for j in 0..n {
            let brow = &b[j * ldb..j * ldb + k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * ldc + j] = acc;
        }
    }
}

/// `c[m×n] = a[k×m]ᵀ · b[k×n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn mm_tn(
    a: &[f64],
    lda: usize,
    b: &[f64],
    ldb: usize,
    c: &mut [f64],
    ldc: usize,
    m: usize,
    k: usize,
    n: usize,
) {
    flops::add_macs(m * k * n);
    for i in 0..m {
        c[i * ldc..i * ldc + n].fill(0.0);
    }
    for p in 0..k {
        let arow = &a[p * lda..p * lda + m];
        let brow = &b[p * ldb..p * ldb + n];
        for (i, &api) in arow.iter().enumerate() {
            let crow = &mut c[i * ldc..i * ldc + n];
            for (cij, &bpj) in crow.iter_mut().zip(brow) {
                *cij += api * bpj;
            }
        }
    }
}
