//! Floating-point abstraction shared by the transforms and the network.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rustfft::FftNum;

/// Matrix view into a flat buffer: element `(i, j)` lives at
/// `offset + i * row_stride + j * col_stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct View {
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    pub fn row_major(cols: usize) -> Self {
        View {
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }

    pub fn col_major(rows: usize) -> Self {
        View {
            offset: 0,
            row_stride: 1,
            col_stride: rows,
        }
    }

    pub fn at(self, offset: usize) -> Self {
        View { offset, ..self }
    }

    fn check(self, rows: usize, cols: usize, len: usize, what: &str) {
        if rows == 0 || cols == 0 {
            return;
        }
        let last = self.offset + (rows - 1) * self.row_stride + (cols - 1) * self.col_stride;
        assert!(last < len, "gemm: {what} view reaches {last}, buffer has {len}");
    }
}

/// Real scalar type usable by the whole numeric stack.
///
/// Implemented for `f32` (training, storage) and `f64` (finite-difference
/// oracles).
pub trait Real:
    Float + FftNum + Default + Debug + Sum + AddAssign + SubAssign + MulAssign + Send + Sync + 'static
{
    /// `c = a · b (+ c if accumulate)` with `a` `m×k`, `b` `k×n`, `c` `m×n`,
    /// each read through its [`View`]. The view of `c` must not map two
    /// elements to the same slot.
    #[allow(clippy::too_many_arguments)]
    fn gemm_view(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        av: View,
        b: &[Self],
        bv: View,
        c: &mut [Self],
        cv: View,
        accumulate: bool,
    );

    /// Row-major `c = a · b (+ c if accumulate)`, where `a` is `m×k` and `b`
    /// is `k×n` after the optional transposes.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        c: &mut [Self],
        accumulate: bool,
    ) {
        let av = if a_transposed { View::col_major(m) } else { View::row_major(k) };
        let bv = if b_transposed { View::col_major(k) } else { View::row_major(n) };
        Self::gemm_view(m, k, n, a, av, b, bv, c, View::row_major(n), accumulate);
    }

    fn of(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 is representable")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite cast")
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm_view(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                av: View,
                b: &[Self],
                bv: View,
                c: &mut [Self],
                cv: View,
                accumulate: bool,
            ) {
                av.check(m, k, a.len(), "lhs");
                bv.check(k, n, b.len(), "rhs");
                cv.check(m, n, c.len(), "output");
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the checks above bound every index the kernel touches.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr().add(av.offset),
                        av.row_stride as isize,
                        av.col_stride as isize,
                        b.as_ptr().add(bv.offset),
                        bv.row_stride as isize,
                        bv.col_stride as isize,
                        beta,
                        c.as_mut_ptr().add(cv.offset),
                        cv.row_stride as isize,
                        cv.col_stride as isize,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
