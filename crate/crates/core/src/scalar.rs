//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate (tensors, the tape, the model, the
//! optimizer, decoding scores) is generic over [`Scalar`], implemented for
//! `f32` and `f64`. The pipeline runs in `f32`; tests instantiate the same
//! code in `f64` where an oracle needs the extra precision.

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Default + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    /// Dense row-major matrix multiply-accumulate:
    /// `c[m*n] = beta * c + alpha * op(a) * op(b)`,
    /// where `op` transposes its argument when the matching flag is set.
    /// `a` holds the operand that is logically `m*k` after `op`, `b` the
    /// one that is logically `k*n`.
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable in scalar type")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

/// Row/column strides for a possibly transposed row-major operand.
fn strides(trans: bool, rows_logical: usize, cols_logical: usize) -> (isize, isize) {
    if trans {
        // Stored as [cols_logical x rows_logical] row-major.
        (1, rows_logical as isize)
    } else {
        let _ = rows_logical;
        (cols_logical as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                trans_a: bool,
                trans_b: bool,
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                b: &[Self],
                beta: Self,
                c: &mut [Self],
            ) {
                assert_eq!(a.len(), m * k, "gemm: lhs buffer size");
                assert_eq!(b.len(), k * n, "gemm: rhs buffer size");
                assert_eq!(c.len(), m * n, "gemm: out buffer size");
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(trans_a, m, k);
                let (rsb, csb) = strides(trans_b, k, n);
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);
