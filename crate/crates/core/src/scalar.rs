//! Floating point abstraction shared by every numeric routine in the crate.
//!
//! Training runs in `f32`; gradient checking runs in `f64`. Everything in
//! between is written once against [`Scalar`].

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

pub trait Scalar:
    'static
    + Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Default
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + LowerExp
{
    /// Converts an `f64` constant into this type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `c += op(a) * op(b)` for row-major matrices, `op(a)` being `m x k`,
    /// `op(b)` being `k x n` and `c` being `m x n`. With `a_t` set, `a` is
    /// stored `k x m`; with `b_t` set, `b` is stored `n x k`.
    fn gemm_acc(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, c: &mut [Self]);
}

struct GemmStrides {
    rsa: isize,
    csa: isize,
    rsb: isize,
    csb: isize,
}

fn gemm_strides(m: usize, k: usize, n: usize, la: usize, a_t: bool, lb: usize, b_t: bool, lc: usize) -> GemmStrides {
    assert!(la >= m * k && lb >= k * n && lc >= m * n, "gemm operand too short");
    let (rsa, csa) = if a_t { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_t { (1, k) } else { (n, 1) };
    GemmStrides {
        rsa: rsa as isize,
        csa: csa as isize,
        rsb: rsb as isize,
        csb: csb as isize,
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm_acc(m: usize, k: usize, n: usize, a: &[$t], a_t: bool, b: &[$t], b_t: bool, c: &mut [$t]) {
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
                let s = gemm_strides(m, k, n, a.len(), a_t, b.len(), b_t, c.len());
                // SAFETY: the strides address only the first m*k, k*n and m*n
                // elements, whose presence gemm_strides asserts.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        s.rsa,
                        s.csa,
                        b.as_ptr(),
                        s.rsb,
                        s.csb,
                        1.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Run-wide numeric precision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}
