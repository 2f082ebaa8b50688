//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! Image math, losses, metrics and the network are written once against
//! [`Scalar`] and instantiated for `f32` (training default) and `f64`
//! (gradient checks, oracles).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type usable throughout the crate.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Short tag written into binary containers.
    const DTYPE: &'static str;
    /// Bytes per element in little-endian serialization.
    const BYTES: usize;

    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).unwrap_or_else(Self::nan)
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! check_gemm_bounds {
    ($m:expr, $k:expr, $n:expr, $a:expr, $rsa:expr, $csa:expr, $b:expr, $rsb:expr, $csb:expr, $c:expr, $rsc:expr, $csc:expr) => {{
        fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
            if rows == 0 || cols == 0 {
                return 0;
            }
            assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
        assert!($a.len() >= extent($m, $k, $rsa, $csa), "gemm: lhs too short");
        assert!($b.len() >= extent($k, $n, $rsb, $csb), "gemm: rhs too short");
        assert!($c.len() >= extent($m, $n, $rsc, $csc), "gemm: output too short");
    }};
}

/// Copy a strided `rows x cols` matrix into contiguous row-major storage.
fn to_row_major<T: Copy + Default>(src: &[T], rows: usize, cols: usize, rs: isize, cs: isize) -> Vec<T> {
    let mut out = vec![T::default(); rows * cols];
    const B: usize = 32;
    let (rs, cs) = (rs as usize, cs as usize);
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    out[r * cols + c] = src[r * rs + c * cs];
                }
            }
        }
    }
    out
}

/// Column-major operands are repacked to row-major before the multiply; the
/// packed kernels are several times slower on strided contraction axes.
#[allow(clippy::too_many_arguments)]
fn drive<T: Copy + Default>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: isize,
    csa: isize,
    b: &[T],
    rsb: isize,
    csb: isize,
    kernel: impl FnOnce(&[T], isize, isize, &[T], isize, isize),
) {
    let a_owned;
    let (a, rsa, csa) = if csa != 1 && m > 1 && k > 1 {
        a_owned = to_row_major(a, m, k, rsa, csa);
        (&a_owned[..], k as isize, 1)
    } else {
        (a, rsa, csa)
    };
    let b_owned;
    let (b, rsb, csb) = if csb != 1 && k > 1 && n > 1 {
        b_owned = to_row_major(b, k, n, rsb, csb);
        (&b_owned[..], n as isize, 1)
    } else {
        (b, rsb, csb)
    };
    kernel(a, rsa, csa, b, rsb, csb);
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32le";
    const BYTES: usize = 4;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        drive(m, k, n, a, rsa, csa, b, rsb, csb, |a, rsa, csa, b, rsb, csb| {
            // SAFETY: extents checked above; strides are non-negative.
            unsafe {
                matrixmultiply::sgemm(
                    m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                    c.as_mut_ptr(), rsc, csc,
                );
            }
        });
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64le";
    const BYTES: usize = 8;

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds!(m, k, n, a, rsa, csa, b, rsb, csb, c, rsc, csc);
        drive(m, k, n, a, rsa, csa, b, rsb, csb, |a, rsa, csa, b, rsb, csb| {
            // SAFETY: extents checked above; strides are non-negative.
            unsafe {
                matrixmultiply::dgemm(
                    m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta,
                    c.as_mut_ptr(), rsc, csc,
                );
            }
        });
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }
}

/// Shorthand for constant conversion inside generic code.
#[inline]
pub(crate) fn cst<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}
