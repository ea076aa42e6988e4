//! Row-major matrix kernels behind the autodiff ops.
//!
//! Three shapes cover every multiply in the model:
//!
//! - `mm`:    `out += a (m x k) . b (k x n)` — projections, probs . values
//! - `mm_bt`: `out += a (m x k) . b^T (n x k)` — attention scores, tied logits
//! - `mm_at`: `out += a^T (p x m) . b (m x d)` — weight gradients
//!
//! Each comes in `_seq` and (with the `parallel` feature) `_par` variants plus
//! an auto-dispatching entry point used by the tape. The `f32` instantiations
//! additionally route through AVX2+FMA bodies when the CPU supports them; the
//! loops are written so the compiler vectorizes them without reassociating
//! float reductions, which keeps results bit-identical across all variants.

use super::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many multiply-adds the parallel split costs more than it saves.
const PAR_FLOP_THRESHOLD: usize = 32 * 1024;

#[inline]
fn dot<T: Scalar>(x: &[T], y: &[T]) -> T {
    // Eight explicit lanes so strict-FP reduction still vectorizes.
    let mut acc = [T::zero(); 8];
    let mut xc = x.chunks_exact(8);
    let mut yc = y.chunks_exact(8);
    for (xs, ys) in (&mut xc).zip(&mut yc) {
        for l in 0..8 {
            acc[l] = acc[l] + xs[l] * ys[l];
        }
    }
    let mut s = T::zero();
    for l in 0..8 {
        s = s + acc[l];
    }
    for (xv, yv) in xc.remainder().iter().zip(yc.remainder()) {
        s = s + *xv * *yv;
    }
    s
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], out: &mut [T]) {
    for (o, xv) in out.iter_mut().zip(x) {
        *o = *o + alpha * *xv;
    }
}

pub(crate) fn mm_generic<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, aik) in arow.iter().enumerate() {
            axpy(*aik, &b[kk * n..(kk + 1) * n], orow);
        }
    }
}

pub(crate) fn mm_bt_generic<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = *o + dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

pub(crate) fn mm_at_generic<T: Scalar>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    p: usize,
    d: usize,
    p0: usize,
    p1: usize,
) {
    debug_assert!(out.len() == (p1 - p0) * d);
    for i in 0..m {
        let brow = &b[i * d..(i + 1) * d];
        let arow = &a[i * p..(i + 1) * p];
        for pp in p0..p1 {
            axpy(arow[pp], brow, &mut out[(pp - p0) * d..(pp - p0 + 1) * d]);
        }
    }
}

// f32 fast paths: identical loop bodies recompiled with AVX2+FMA enabled.
// `is_x86_feature_detected!` caches, so per-call dispatch overhead is a load.

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn mm_f32_avx2(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    mm_generic(a, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn mm_bt_f32_avx2(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    mm_bt_generic(a, b, out, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn mm_at_f32_avx2(
    a: &[f32],
    b: &[f32],
    out: &mut [f32],
    m: usize,
    p: usize,
    d: usize,
    p0: usize,
    p1: usize,
) {
    mm_at_generic(a, b, out, m, p, d, p0, p1);
}

#[cfg(target_arch = "x86_64")]
#[inline]
fn has_avx2_fma() -> bool {
    std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
}

pub(crate) fn mm_f32(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: feature presence checked at runtime just above.
        unsafe { mm_f32_avx2(a, b, out, m, k, n) };
        return;
    }
    mm_generic(a, b, out, m, k, n);
}

pub(crate) fn mm_bt_f32(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: feature presence checked at runtime just above.
        unsafe { mm_bt_f32_avx2(a, b, out, m, k, n) };
        return;
    }
    mm_bt_generic(a, b, out, m, k, n);
}

pub(crate) fn mm_at_f32(
    a: &[f32],
    b: &[f32],
    out: &mut [f32],
    m: usize,
    p: usize,
    d: usize,
    p0: usize,
    p1: usize,
) {
    #[cfg(target_arch = "x86_64")]
    if has_avx2_fma() {
        // SAFETY: feature presence checked at runtime just above.
        unsafe { mm_at_f32_avx2(a, b, out, m, p, d, p0, p1) };
        return;
    }
    mm_at_generic(a, b, out, m, p, d, p0, p1);
}

fn check_mm_dims<T>(a: &[T], out: &[T], m: usize, k: usize, n: usize, b_len: usize, b_expect: usize) {
    assert_eq!(a.len(), m * k, "lhs length");
    assert_eq!(b_len, b_expect, "rhs length");
    assert_eq!(out.len(), m * n, "out length");
}

/// `out += a . b`, sequential.
pub fn matmul_seq<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    check_mm_dims(a, out, m, k, n, b.len(), k * n);
    T::mm_block(a, b, out, m, k, n);
}

/// `out += a . b`, rows split across the rayon pool.
#[cfg(feature = "parallel")]
pub fn matmul_par<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    check_mm_dims(a, out, m, k, n, b.len(), k * n);
    let rows_per = rows_per_task(m, k * n);
    out.par_chunks_mut(rows_per * n)
        .zip(a.par_chunks(rows_per * k))
        .for_each(|(oc, ac)| T::mm_block(ac, b, oc, oc.len() / n, k, n));
}

/// `out += a . b^T` (`b` stored `n x k`), sequential.
pub fn matmul_bt_seq<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    check_mm_dims(a, out, m, k, n, b.len(), n * k);
    T::mm_bt_block(a, b, out, m, k, n);
}

/// `out += a . b^T`, rows split across the rayon pool.
#[cfg(feature = "parallel")]
pub fn matmul_bt_par<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    check_mm_dims(a, out, m, k, n, b.len(), n * k);
    let rows_per = rows_per_task(m, k * n);
    out.par_chunks_mut(rows_per * n)
        .zip(a.par_chunks(rows_per * k))
        .for_each(|(oc, ac)| T::mm_bt_block(ac, b, oc, oc.len() / n, k, n));
}

/// `out += a^T . b` for `a: m x p`, `b: m x d`, `out: p x d`, sequential.
pub fn matmul_at_seq<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, d: usize) {
    assert_eq!(a.len(), m * p);
    assert_eq!(b.len(), m * d);
    assert_eq!(out.len(), p * d);
    T::mm_at_block(a, b, out, m, p, d, 0, p);
}

/// `out += a^T . b`, output rows split across the rayon pool.
#[cfg(feature = "parallel")]
pub fn matmul_at_par<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, d: usize) {
    assert_eq!(a.len(), m * p);
    assert_eq!(b.len(), m * d);
    assert_eq!(out.len(), p * d);
    let rows_per = rows_per_task(p, m * d);
    out.par_chunks_mut(rows_per * d)
        .enumerate()
        .for_each(|(c, oc)| {
            let p0 = c * rows_per;
            T::mm_at_block(a, b, oc, m, p, d, p0, p0 + oc.len() / d);
        });
}

/// Auto variants: parallel when built with the feature and the work is big
/// enough to amortize the split, sequential otherwise.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_FLOP_THRESHOLD {
        return matmul_par(a, b, out, m, k, n);
    }
    matmul_seq(a, b, out, m, k, n);
}

pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    if m * k * n >= PAR_FLOP_THRESHOLD {
        return matmul_bt_par(a, b, out, m, k, n);
    }
    matmul_bt_seq(a, b, out, m, k, n);
}

pub fn matmul_at<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, p: usize, d: usize) {
    #[cfg(feature = "parallel")]
    if m * p * d >= PAR_FLOP_THRESHOLD {
        return matmul_at_par(a, b, out, m, p, d);
    }
    matmul_at_seq(a, b, out, m, p, d);
}

#[cfg(feature = "parallel")]
fn rows_per_task(rows: usize, work_per_row: usize) -> usize {
    // Aim for tasks of ~PAR_FLOP_THRESHOLD multiply-adds but never fewer
    // rows per task than needed to keep every worker busy.
    let by_work = (PAR_FLOP_THRESHOLD / work_per_row.max(1)).max(1);
    let by_threads = rows / (rayon::current_num_threads() * 4).max(1);
    by_work.max(by_threads).max(1).min(rows.max(1))
}

/// Numerically stable softmax over `row`, in place.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut max = T::neg_infinity();
    for v in row.iter() {
        if *v > max {
            max = *v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}
