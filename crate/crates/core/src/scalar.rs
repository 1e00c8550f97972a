//! Floating-point scalar abstraction shared by the whole crate.
//!
//! Training runs in `f32`; the verification suites (gradient checks,
//! masking/deletion equivalence) run the exact same code in `f64`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar usable by the tensor engine.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Name written into checkpoint manifests and error messages.
    const DTYPE: &'static str;

    /// Converts an `f64` literal. Values outside the range saturate to infinity.
    fn lit(v: f64) -> Self;

    /// Raw strided GEMM: `C = alpha * A * B + beta * C`.
    ///
    /// # Safety
    /// All pointers must be valid for every index reachable through the given
    /// extents and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    /// Replaces every element with its exponential.
    fn exp_slice(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }
}

/// Branch-free single-precision exponential that the compiler can vectorise.
///
/// Range reduction by `ln 2` followed by a degree-6 polynomial; within 2 ulp of
/// the correctly rounded result over the normal range. Results below the
/// smallest normal flush to zero.
#[allow(clippy::manual_clamp)]
fn exp_f32(x: f32) -> f32 {
    const MAX: f32 = 88.376_26;
    const MIN: f32 = -87.336_55;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding 1.5 * 2^23 rounds to the nearest integer and leaves it in the low mantissa bits.
    const SHIFT: f32 = 12_582_912.0;
    let c = x.max(MIN).min(MAX);
    let t = c * std::f32::consts::LOG2_E + SHIFT;
    let n = t - SHIFT;
    let r = c - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_1e-4_f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 0.5;
    let scale = f32::from_bits((t.to_bits().wrapping_sub(SHIFT.to_bits()).wrapping_add(127)) << 23);
    let y = (p * r * r + r + 1.0) * scale;
    let y = if x < MIN { 0.0 } else { y };
    let y = if x > MAX { f32::INFINITY } else { y };
    if x.is_nan() {
        x
    } else {
        y
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    fn lit(v: f64) -> Self {
        v as f32
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn exp_slice(xs: &mut [Self]) {
        for x in xs {
            *x = exp_f32(*x);
        }
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    fn lit(v: f64) -> Self {
        v
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Strided view of a row-major matrix living inside a flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatLayout {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatLayout {
    /// Dense row-major `rows x cols` block starting at `offset`.
    pub fn dense(offset: usize, rows: usize, cols: usize) -> Self {
        Self { offset, rows, cols, row_stride: cols, col_stride: 1 }
    }

    pub fn strided(offset: usize, rows: usize, cols: usize, row_stride: usize) -> Self {
        Self { offset, rows, cols, row_stride, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        Self {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn end(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
    }
}

/// Bounds-checked GEMM over strided views: `c = alpha * a * b + beta * c`.
///
/// Panics if the extents disagree or a view reaches outside its buffer.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    alpha: T,
    a: &[T],
    la: MatLayout,
    b: &[T],
    lb: MatLayout,
    beta: T,
    c: &mut [T],
    lc: MatLayout,
) {
    assert_eq!(la.cols, lb.rows, "gemm inner extent");
    assert_eq!(la.rows, lc.rows, "gemm output rows");
    assert_eq!(lb.cols, lc.cols, "gemm output cols");
    assert!(la.end() <= a.len() && lb.end() <= b.len() && lc.end() <= c.len(), "gemm view out of bounds");
    if lc.rows == 0 || lc.cols == 0 {
        return;
    }
    if la.cols == 0 {
        for i in 0..lc.rows {
            for j in 0..lc.cols {
                let idx = lc.offset + i * lc.row_stride + j * lc.col_stride;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    // SAFETY: every view was checked to lie inside its buffer above, and `c`
    // is borrowed mutably so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            la.rows,
            la.cols,
            lb.cols,
            alpha,
            a.as_ptr().add(la.offset),
            la.row_stride as isize,
            la.col_stride as isize,
            b.as_ptr().add(lb.offset),
            lb.row_stride as isize,
            lb.col_stride as isize,
            beta,
            c.as_mut_ptr().add(lc.offset),
            lc.row_stride as isize,
            lc.col_stride as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fast_exp_edge_cases() {
        let mut xs = [0.0f32, -1e9, -88.0, 89.0, f32::INFINITY, f32::NEG_INFINITY, f32::NAN];
        f32::exp_slice(&mut xs);
        assert_eq!(xs[0], 1.0);
        assert_eq!(xs[1], 0.0);
        assert_eq!(xs[2], 0.0);
        assert_eq!(xs[3], f32::INFINITY);
        assert_eq!(xs[4], f32::INFINITY);
        assert_eq!(xs[5], 0.0);
        assert!(xs[6].is_nan());
    }

    proptest! {
        #[test]
        fn fast_exp_is_within_two_ulp(x in -87.0f32..88.0) {
            let mut got = [x];
            f32::exp_slice(&mut got);
            let want = f64::from(x).exp();
            let ulp = f64::from(f32::EPSILON) * want;
            prop_assert!((f64::from(got[0]) - want).abs() <= 2.0 * ulp, "{x}: {} vs {want}", got[0]);
        }
    }

    #[test]
    fn gemm_matches_naive_product_with_transpose() {
        let a: Vec<f64> = (0..6).map(f64::from).collect(); // 2x3
        let b: Vec<f64> = (0..6).map(|v| f64::from(v) * 0.5 - 1.0).collect(); // stored 2x3, used as 3x2 via t()
        let mut c = vec![0.0; 4];
        gemm(1.0, &a, MatLayout::dense(0, 2, 3), &b, MatLayout::dense(0, 2, 3).t(), 0.0, &mut c, MatLayout::dense(0, 2, 2));
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[j * 3 + p]).sum();
                assert!((c[i * 2 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gemm_with_empty_inner_extent_scales_output() {
        let mut c = vec![2.0f32; 4];
        gemm(1.0, &[], MatLayout::dense(0, 2, 0), &[], MatLayout::dense(0, 0, 2), 0.5, &mut c, MatLayout::dense(0, 2, 2));
        assert_eq!(c, vec![1.0; 4]);
    }
}
