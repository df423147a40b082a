//! Floating-point element types the numeric core is generic over.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// An IEEE-754 element type: `f32` for training and sampling, `f64` for
/// gradient verification.
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
    /// `c = alpha * a * b + beta * c` over strided row/column views.
    ///
    /// # Safety
    /// Every strided index reachable from the pointers for the given
    /// extents must lie inside a live allocation, and `c` must not alias
    /// `a` or `b`.
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

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }

    /// Little-endian f32 encoding used by every on-disk format.
    fn to_le_f32(self) -> [u8; 4] {
        (self.to_f32().unwrap_or(f32::NAN)).to_le_bytes()
    }

    fn from_le_f32(bytes: [u8; 4]) -> Self {
        Self::of(f32::from_le_bytes(bytes) as f64)
    }
}

impl Scalar for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn to_le_f32(self) -> [u8; 4] {
        self.to_le_bytes()
    }

    fn from_le_f32(bytes: [u8; 4]) -> f32 {
        f32::from_le_bytes(bytes)
    }
}

impl Scalar for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}
