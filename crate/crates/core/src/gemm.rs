//! Small dense matrix kernels used by matmul, linear and conv2d.
//!
//! All operands are row-major slices. Kernels accumulate into `c`
//! (`C += A * B`), never overwrite, and keep a fixed per-element summation
//! order so results do not depend on thread count. Four output rows are
//! produced per pass so each loaded `b` value feeds four fused
//! multiply-adds.

use crate::elem::Elem;

const MR: usize = 4;

/// C[m,n] += A[m,k] * B[k,n]
pub fn gemm_nn<E: Elem>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + MR <= m {
        let (r0, rest) = c[i * n..].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, rest) = rest.split_at_mut(n);
        let r3 = &mut rest[..n];
        let ar = &a[i * k..];
        for kk in 0..k {
            let b_row = &b[kk * n..kk * n + n];
            let a0 = ar[kk];
            let a1 = ar[k + kk];
            let a2 = ar[2 * k + kk];
            let a3 = ar[3 * k + kk];
            for j in 0..n {
                let bv = b_row[j];
                r0[j] = bv.mul_add(a0, r0[j]);
                r1[j] = bv.mul_add(a1, r1[j]);
                r2[j] = bv.mul_add(a2, r2[j]);
                r3[j] = bv.mul_add(a3, r3[j]);
            }
        }
        i += MR;
    }
    while i < m {
        let row = &mut c[i * n..i * n + n];
        let ar = &a[i * k..i * k + k];
        for kk in 0..k {
            let b_row = &b[kk * n..kk * n + n];
            let av = ar[kk];
            for j in 0..n {
                row[j] = b_row[j].mul_add(av, row[j]);
            }
        }
        i += 1;
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T  (dot products of A rows with B rows)
pub fn gemm_nt<E: Elem>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..i * k + k];
        let c_row = &mut c[i * n..i * n + n];
        for j in 0..n {
            let b_row = &b[j * k..j * k + k];
            c_row[j] = c_row[j].add(dot(a_row, b_row));
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n]
pub fn gemm_tn<E: Elem>(m: usize, k: usize, n: usize, a: &[E], b: &[E], c: &mut [E]) {
    assert_eq!(a.len(), k * m);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    let mut i = 0;
    while i + MR <= m {
        let (r0, rest) = c[i * n..].split_at_mut(n);
        let (r1, rest) = rest.split_at_mut(n);
        let (r2, rest) = rest.split_at_mut(n);
        let r3 = &mut rest[..n];
        for kk in 0..k {
            let b_row = &b[kk * n..kk * n + n];
            let a0 = a[kk * m + i];
            let a1 = a[kk * m + i + 1];
            let a2 = a[kk * m + i + 2];
            let a3 = a[kk * m + i + 3];
            for j in 0..n {
                let bv = b_row[j];
                r0[j] = bv.mul_add(a0, r0[j]);
                r1[j] = bv.mul_add(a1, r1[j]);
                r2[j] = bv.mul_add(a2, r2[j]);
                r3[j] = bv.mul_add(a3, r3[j]);
            }
        }
        i += MR;
    }
    while i < m {
        let row = &mut c[i * n..i * n + n];
        for kk in 0..k {
            let b_row = &b[kk * n..kk * n + n];
            let av = a[kk * m + i];
            for j in 0..n {
                row[j] = b_row[j].mul_add(av, row[j]);
            }
        }
        i += 1;
    }
}

/// Dot product with four independent accumulator lanes.
#[inline]
pub fn dot<E: Elem>(a: &[E], b: &[E]) -> E {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [E::ZERO; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let pa = &a[i * 4..i * 4 + 4];
        let pb = &b[i * 4..i * 4 + 4];
        acc[0] = pa[0].mul_add(pb[0], acc[0]);
        acc[1] = pa[1].mul_add(pb[1], acc[1]);
        acc[2] = pa[2].mul_add(pb[2], acc[2]);
        acc[3] = pa[3].mul_add(pb[3], acc[3]);
    }
    let mut tail = E::ZERO;
    for i in chunks * 4..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    acc[0].add(acc[1]).add(acc[2].add(acc[3])).add(tail)
}
