use num_traits::{Float, FromPrimitive, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Floating-point element type for tensors, tapes and models.
///
/// Implemented for `f32` and `f64`. Training and the gradient checks use
/// `f64`; `f32` is available for inference on a converted checkpoint.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Probability clamp applied after every sigmoid.
    fn prob_eps() -> Self;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable in scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// `c += a · b` where `a` is `m×k`, `b` is `k×n` and `c` is `m×n`, each
    /// addressed by a (row stride, column stride) pair.
    fn gemm_acc(dims: (usize, usize, usize), a: (&[Self], isize, isize), b: (&[Self], isize, isize), c: (&mut [Self], isize, isize));
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    if rows > 0 && cols > 0 {
        let last = (rows - 1) as isize * rs + (cols - 1) as isize * cs;
        assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
    }
}

macro_rules! gemm_impl {
    ($kernel:path) => {
        fn gemm_acc(
            (m, k, n): (usize, usize, usize),
            (a, rsa, csa): (&[Self], isize, isize),
            (b, rsb, csb): (&[Self], isize, isize),
            (c, rsc, csc): (&mut [Self], isize, isize),
        ) {
            check_extent(a.len(), m, k, rsa, csa);
            check_extent(b.len(), k, n, rsb, csb);
            check_extent(c.len(), m, n, rsc, csc);
            // SAFETY: every index the kernel touches was bounds-checked above.
            unsafe {
                $kernel(
                    m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0,
                    c.as_mut_ptr(), rsc, csc,
                )
            }
        }
    };
}

impl Scalar for f64 {
    fn prob_eps() -> Self {
        1e-12
    }

    gemm_impl!(matrixmultiply::dgemm);
}

impl Scalar for f32 {
    // 1e-12 is below f32 resolution next to 1.0; 1 - 1e-12 rounds to 1.
    fn prob_eps() -> Self {
        1e-7
    }

    gemm_impl!(matrixmultiply::sgemm);
}
