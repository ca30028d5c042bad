//! Scalar abstraction shared by every kernel in the crate.
//!
//! The engine runs in `f64` for gradient checks and in `f32` for experiment
//! throughput. Everything numeric is written against [`Scalar`]; the only
//! per-type code is the GEMM dispatch and the little-endian codec used by the
//! checkpoint format.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Strides of a row-major or transposed matrix view, in elements.
#[derive(Clone, Copy, Debug)]
pub struct MatView {
    pub row_stride: isize,
    pub col_stride: isize,
}

impl MatView {
    /// Plain row-major `rows x cols` matrix.
    pub fn row_major(cols: usize) -> Self {
        Self { row_stride: cols as isize, col_stride: 1 }
    }

    /// Transposed view of a row-major matrix with `cols` columns.
    pub fn transposed(cols: usize) -> Self {
        Self { row_stride: 1, col_stride: cols as isize }
    }
}

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoints.
    const DTYPE: &'static str;
    const BYTES: usize;

    /// `c = a * b + beta * c` with `a: m x k`, `b: k x n`, `c: m x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        av: MatView,
        b: &[Self],
        bv: MatView,
        beta: Self,
        c: &mut [Self],
        cv: MatView,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, v: MatView) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * v.row_stride + (cols as isize - 1) * v.col_stride;
    assert!(
        v.row_stride >= 0 && v.col_stride >= 0 && (last as usize) < len,
        "gemm operand out of bounds: {rows}x{cols} view over {len} elements"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path, $name:literal) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $name;
            const BYTES: usize = std::mem::size_of::<$t>();

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                av: MatView,
                b: &[Self],
                bv: MatView,
                beta: Self,
                c: &mut [Self],
                cv: MatView,
            ) {
                check_extent(a.len(), m, k, av);
                check_extent(b.len(), k, n, bv);
                check_extent(c.len(), m, n, cv);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every operand extent was checked against its slice above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        av.row_stride,
                        av.col_stride,
                        b.as_ptr(),
                        bv.row_stride,
                        bv.col_stride,
                        beta,
                        c.as_mut_ptr(),
                        cv.row_stride,
                        cv.col_stride,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; std::mem::size_of::<$t>()];
                buf.copy_from_slice(&bytes[..std::mem::size_of::<$t>()]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm, "f32");
impl_scalar!(f64, matrixmultiply::dgemm, "f64");

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut c = vec![1.0; 8];
        f64::gemm(2, 3, 4, &a, MatView::row_major(3), &b, MatView::row_major(4), 0.0, &mut c, MatView::row_major(4));
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn transposed_view_reads_columns() {
        // a stored as 3x2, used as its 2x3 transpose
        let a = [1.0f32, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0f32, 1.0, 1.0];
        let mut c = [0.0f32; 2];
        f32::gemm(2, 3, 1, &a, MatView::transposed(2), &b, MatView::row_major(1), 0.0, &mut c, MatView::row_major(1));
        assert_eq!(c, [6.0, 15.0]);
    }

    #[test]
    fn le_codec_round_trips() {
        let mut out = Vec::new();
        (-1.5e-7f64).write_le(&mut out);
        assert_eq!(f64::read_le(&out), -1.5e-7);
    }
}
