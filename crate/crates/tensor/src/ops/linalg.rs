//! Matrix products and row-wise normalizations over the last axis.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn rows_cols<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    let cols = *t.shape().last().ok_or_else(|| TensorError::shape(op, "scalar input"))?;
    if cols == 0 {
        return Err(TensorError::degenerate(op, "empty rows"));
    }
    Ok((t.numel() / cols, cols))
}

impl<T: Scalar> Tensor<T> {
    /// `[M, K] x [K, N] -> [M, N]`.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.expect_rank("matmul", 2)?;
        other.expect_rank("matmul", 2)?;
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(TensorError::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?}", self.shape(), other.shape()),
            ));
        }
        let a = self.to_vec();
        let b = other.to_vec();
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &a, false, &b, false, &mut out, false);
        Tensor::from_op("matmul", vec![m, n], out, vec![self.clone(), other.clone()], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); m * k];
                T::gemm(m, n, k, g, false, &b, true, &mut ga, false);
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); k * n];
                T::gemm(k, m, n, &a, true, g, false, &mut gb, false);
                gb
            });
            vec![ga, gb]
        })
    }

    /// Batched product `[B, M, K] x [B, K, N] -> [B, M, N]`.
    pub fn bmm(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.batched_product(other, false)
    }

    /// Batched product with the second operand transposed:
    /// `[B, M, K] x [B, N, K]^T -> [B, M, N]`.
    pub fn bmm_bt(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.batched_product(other, true)
    }

    fn batched_product(&self, other: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
        let op = if trans_b { "bmm_bt" } else { "bmm" };
        self.expect_rank(op, 3)?;
        other.expect_rank(op, 3)?;
        let (bsz, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (b2, k2, n) = if trans_b {
            (other.shape()[0], other.shape()[2], other.shape()[1])
        } else {
            (other.shape()[0], other.shape()[1], other.shape()[2])
        };
        if bsz != b2 || k != k2 {
            return Err(TensorError::shape(
                op,
                format!("incompatible operands {:?} and {:?}", self.shape(), other.shape()),
            ));
        }
        let a = self.to_vec();
        let b = other.to_vec();
        let mut out = vec![T::zero(); bsz * m * n];
        for i in 0..bsz {
            T::gemm(
                m,
                k,
                n,
                &a[i * m * k..(i + 1) * m * k],
                false,
                &b[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                false,
            );
        }
        Tensor::from_op(op, vec![bsz, m, n], out, vec![self.clone(), other.clone()], move |g, needs| {
            let ga = needs[0].then(|| {
                let mut ga = vec![T::zero(); bsz * m * k];
                for i in 0..bsz {
                    // dA = dC * op(B)^T
                    T::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &b[i * k * n..(i + 1) * k * n],
                        !trans_b,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        false,
                    );
                }
                ga
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); bsz * k * n];
                for i in 0..bsz {
                    let ai = &a[i * m * k..(i + 1) * m * k];
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let dst = &mut gb[i * k * n..(i + 1) * k * n];
                    if trans_b {
                        // B stored N x K: dB = dC^T * A
                        T::gemm(n, m, k, gi, true, ai, false, dst, false);
                    } else {
                        T::gemm(k, m, n, ai, true, gi, false, dst, false);
                    }
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// Softmax over the last axis; each row sums to one.
    pub fn softmax_rows(&self) -> Result<Tensor<T>> {
        let (rows, cols) = rows_cols(self, "softmax_rows")?;
        let x = self.data();
        let mut out = vec![T::zero(); rows * cols];
        for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
            let mx = src.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - mx).exp();
                s = s + *d;
            }
            dst.iter_mut().for_each(|d| *d = *d / s);
        }
        drop(x);
        let y = out.clone();
        Tensor::from_op("softmax_rows", self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yr), dst) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yi * (gi - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax_rows(&self) -> Result<Tensor<T>> {
        let (rows, cols) = rows_cols(self, "log_softmax_rows")?;
        let x = self.data();
        let mut out = vec![T::zero(); rows * cols];
        for (src, dst) in x.chunks(cols).zip(out.chunks_mut(cols)) {
            let mx = src.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = mx + src.iter().map(|&v| (v - mx).exp()).sum::<T>().ln();
            dst.iter_mut().zip(src).for_each(|(d, &v)| *d = v - lse);
        }
        drop(x);
        let y = out.clone();
        Tensor::from_op("log_softmax_rows", self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yr), dst) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)) {
                let gsum: T = gr.iter().copied().sum();
                for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = gi - yi.exp() * gsum;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Scales every row (last axis) to unit Euclidean norm. Zero rows are a
    /// degenerate-input error.
    pub fn l2_normalize_rows(&self) -> Result<Tensor<T>> {
        let (_, cols) = rows_cols(self, "l2_normalize")?;
        let x = self.to_vec();
        let norms: Vec<T> = x.chunks(cols).map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt()).collect();
        if let Some(i) = norms.iter().position(|&n| n <= T::zero()) {
            return Err(TensorError::degenerate("l2_normalize", format!("row {} has zero norm", i)));
        }
        let mut out = x;
        for (r, &nrm) in out.chunks_mut(cols).zip(&norms) {
            r.iter_mut().for_each(|v| *v = *v / nrm);
        }
        let y = out.clone();
        Tensor::from_op("l2_normalize", self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (((gr, yr), dst), &nrm) in g.chunks(cols).zip(y.chunks(cols)).zip(gx.chunks_mut(cols)).zip(&norms) {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((d, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = (gi - yi * dot) / nrm;
                }
            }
            vec![Some(gx)]
        })
    }
}
