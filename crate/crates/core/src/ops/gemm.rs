//! Small matrix-multiply kernel behind the fast convolution path.
//!
//! Every output element is accumulated from zero over the reduction index in
//! ascending order, independent of tiling. Two calls that multiply the same
//! row of `a` with the same column of `b` therefore produce the same bits no
//! matter how the surrounding matrices were partitioned.

use crate::scalar::Scalar;

const MR: usize = 4;
const NR: usize = 16;

/// `acc + a * b`, either rounded twice or fused.
trait MulAdd {
    fn madd<T: Scalar>(acc: T, a: T, b: T) -> T;
}

struct Split;
struct Fused;

impl MulAdd for Split {
    #[inline(always)]
    fn madd<T: Scalar>(acc: T, a: T, b: T) -> T {
        acc + a * b
    }
}

impl MulAdd for Fused {
    #[inline(always)]
    fn madd<T: Scalar>(acc: T, a: T, b: T) -> T {
        a.mul_add(b, acc)
    }
}

/// Borrowed row-major matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub ld: usize,
}

/// `c[m x n] = a[m x k] * b[k x n]`, overwriting `c` (leading dimension `ldc`).
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], ldc: usize) {
    debug_assert_eq!(a.cols, b.rows);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            unsafe { gemm_avx2_fma(a, b, c, ldc) };
            return;
        }
    }
    gemm_impl::<T, Split>(a, b, c, ldc);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn gemm_avx2_fma<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], ldc: usize) {
    gemm_impl::<T, Fused>(a, b, c, ldc);
}

#[inline(always)]
fn gemm_impl<T: Scalar, M: MulAdd>(a: MatRef<'_, T>, b: MatRef<'_, T>, c: &mut [T], ldc: usize) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut i = 0;
    while i + MR <= m {
        let mut j = 0;
        while j + NR <= n {
            tile::<T, M>(a, b, c, ldc, i, j, k);
            j += NR;
        }
        for r in i..i + MR {
            edge_row::<T, M>(a, b, c, ldc, r, j, n, k);
        }
        i += MR;
    }
    for r in i..m {
        edge_row::<T, M>(a, b, c, ldc, r, 0, n, k);
    }
}

#[inline(always)]
fn tile<T: Scalar, M: MulAdd>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    ldc: usize,
    i: usize,
    j: usize,
    k: usize,
) {
    let mut acc = [[T::zero(); NR]; MR];
    for kk in 0..k {
        let brow: &[T; NR] = b.data[kk * b.ld + j..kk * b.ld + j + NR]
            .try_into()
            .expect("tile width");
        for (r, acc_row) in acc.iter_mut().enumerate() {
            let av = a.data[(i + r) * a.ld + kk];
            for (slot, &bv) in acc_row.iter_mut().zip(brow) {
                *slot = M::madd(*slot, av, bv);
            }
        }
    }
    for (r, acc_row) in acc.iter().enumerate() {
        let start = (i + r) * ldc + j;
        c[start..start + NR].copy_from_slice(acc_row);
    }
}

/// Columns `[j0, n)` of row `r`, same accumulation order as [`tile`].
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn edge_row<T: Scalar, M: MulAdd>(
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    c: &mut [T],
    ldc: usize,
    r: usize,
    j0: usize,
    n: usize,
    k: usize,
) {
    if j0 >= n {
        return;
    }
    let out = &mut c[r * ldc + j0..r * ldc + n];
    out.fill(T::zero());
    for kk in 0..k {
        let av = a.data[r * a.ld + kk];
        let brow = &b.data[kk * b.ld + j0..kk * b.ld + n];
        for (slot, &bv) in out.iter_mut().zip(brow) {
            *slot = M::madd(*slot, av, bv);
        }
    }
}
