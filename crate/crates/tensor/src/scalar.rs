use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rustfft::FftNum;

/// Element type tag stored in tensor files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

/// Real element type a [`crate::Tensor`] can hold.
///
/// Implemented for `f32` (training) and `f64` (gradient checks and oracles).
pub trait Scalar: Float + FftNum + FromPrimitive + Default + Sum + Debug + Display + 'static {
    const DTYPE: DType;

    /// `c = op(a) * op(b) (+ c)` for row-major operands, where `op(a)` is `m x k`
    /// and `op(b)` is `k x n`. Transposed operands are stored in their
    /// untransposed layout.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Stored layout is (rows x cols) when untransposed, (cols x rows) otherwise.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

/// Below this many output rows the packed kernel spends most of its time
/// packing `b`; plain row updates are several times faster.
const SMALL_M: usize = 2;

fn dot<T: Float>(x: &[T], y: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let mut xc = x.chunks_exact(8);
    let mut yc = y.chunks_exact(8);
    for (xs, ys) in (&mut xc).zip(&mut yc) {
        for i in 0..8 {
            acc[i] = acc[i] + xs[i] * ys[i];
        }
    }
    let tail = xc.remainder().iter().zip(yc.remainder()).fold(T::zero(), |s, (a, b)| s + *a * *b);
    acc.iter().fold(T::zero(), |s, v| s + *v) + tail
}

#[allow(clippy::too_many_arguments)]
fn small_m_gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let a_at = |i: usize, p: usize| if trans_a { a[p * m + i] } else { a[i * k + p] };
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        if trans_b {
            let arow: Vec<T> = (0..k).map(|p| a_at(i, p)).collect();
            for (j, cv) in crow.iter_mut().enumerate() {
                let s = dot(&arow, &b[j * k..(j + 1) * k]);
                *cv = if accumulate { *cv + s } else { s };
            }
        } else {
            if !accumulate {
                crow.iter_mut().for_each(|v| *v = T::zero());
            }
            for p in 0..k {
                let aip = a_at(i, p);
                crow.iter_mut().zip(&b[p * n..(p + 1) * n]).for_each(|(cv, bv)| *cv = *cv + aip * *bv);
            }
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $dtype:expr, $gemm:path, $bytes:expr) => {
        impl Scalar for $t {
            const DTYPE: DType = $dtype;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                if m <= SMALL_M {
                    small_m_gemm(m, k, n, a, trans_a, b, trans_b, c, accumulate);
                    return;
                }
                let (rsa, csa) = strides(m, k, trans_a);
                let (rsb, csb) = strides(k, n, trans_b);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: bounds asserted above; strides describe dense row-major buffers.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
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

            fn from_f64_lossy(v: f64) -> Self {
                v as $t
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, DType::F32, matrixmultiply::sgemm, 4);
impl_scalar!(f64, DType::F64, matrixmultiply::dgemm, 8);
