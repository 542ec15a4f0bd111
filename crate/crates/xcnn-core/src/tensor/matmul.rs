//! Small matrix kernels the conv/dense layers are built on.
//!
//! These are plain safe Rust written so LLVM's auto-vectoriser can do its job:
//! accumulator-blocked loops, `mul_add` everywhere, and fixed summation
//! orders.  The order of floating-point operations is part of the contract —
//! results must be bit-identical run to run — so none of the kernels use
//! anything whose reduction order could vary.

use crate::scalar::Scalar;

/// `c[m,n] += a[m,k] * b[k,n]`, all row-major.
///
/// The i-k-j loop order streams rows of `b` while accumulating four rows of
/// `c` at once, which keeps the inner loop a pure fused-multiply-add over
/// contiguous memory.
pub fn matmul<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);

    let mut i = 0;
    while i + 4 <= m {
        let block = &mut c[i * n..(i + 4) * n];
        let (c0, rest) = block.split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        for kk in 0..k {
            let a0 = a[i * k + kk];
            let a1 = a[(i + 1) * k + kk];
            let a2 = a[(i + 2) * k + kk];
            let a3 = a[(i + 3) * k + kk];
            let brow = &b[kk * n..kk * n + n];
            for ((((x0, x1), x2), x3), &bv) in c0
                .iter_mut()
                .zip(c1.iter_mut())
                .zip(c2.iter_mut())
                .zip(c3.iter_mut())
                .zip(brow)
            {
                *x0 = bv.mul_add(a0, *x0);
                *x1 = bv.mul_add(a1, *x1);
                *x2 = bv.mul_add(a2, *x2);
                *x3 = bv.mul_add(a3, *x3);
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..i * n + n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let brow = &b[kk * n..kk * n + n];
            for (x, &bv) in crow.iter_mut().zip(brow) {
                *x = bv.mul_add(av, *x);
            }
        }
        i += 1;
    }
}

/// Dot product with eight independent accumulators so the reduction
/// vectorises without licence to reassociate arbitrarily.  The lane-fold
/// order is fixed.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 8];
    let ac = a.chunks_exact(8);
    let bc = b.chunks_exact(8);
    let ra = ac.remainder();
    let rb = bc.remainder();
    for (ca, cb) in ac.zip(bc) {
        for l in 0..8 {
            acc[l] = ca[l].mul_add(cb[l], acc[l]);
        }
    }
    let mut s = F::zero();
    for v in acc {
        s += v;
    }
    for (&x, &y) in ra.iter().zip(rb) {
        s = x.mul_add(y, s);
    }
    s
}

/// `c[m,n] += a[m,k] * b[n,k]^T`: every output element is a dot of two rows.
pub fn matmul_abt<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..i * k + k];
        let crow = &mut c[i * n..i * n + n];
        for (j, x) in crow.iter_mut().enumerate() {
            *x += dot(arow, &b[j * k..j * k + k]);
        }
    }
}

/// `c[k,n] += a[m,k]^T * b[m,n]`: a rank-1 update per row of `a`/`b`.
pub fn matmul_atb<F: Scalar>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for im in 0..m {
        let brow = &b[im * n..im * n + n];
        for kk in 0..k {
            let av = a[im * k + kk];
            if av == F::zero() {
                continue;
            }
            let crow = &mut c[kk * n..kk * n + n];
            for (x, &bv) in crow.iter_mut().zip(brow) {
                *x = bv.mul_add(av, *x);
            }
        }
    }
}
