//! 2-D cross-correlation (no kernel flip) lowered to matrix products.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn plane(&self) -> usize {
        self.ho * self.wo
    }

    /// Rows of the column matrix: one per (channel, ky, kx).
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Columns of the column matrix: one per (sample, oy, ox).
    fn cols(&self) -> usize {
        self.n * self.plane()
    }

    /// Output columns `lo..hi` whose input column `ox * stride + kx - pad` is in bounds.
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = if self.w + self.pad > kx { (self.w + self.pad - kx - 1) / self.stride + 1 } else { 0 };
        (lo.min(self.wo), hi.min(self.wo).max(lo.min(self.wo)))
    }
}

pub fn conv_output_size(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn im2col<T: Scalar>(x: &[T], g: &Geometry) -> Vec<T> {
    let cols = g.cols();
    let plane = g.plane();
    let mut out = vec![T::zero(); g.rows() * cols];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst_row = &mut out[row * cols..(row + 1) * cols];
                for ni in 0..g.n {
                    let src = &x[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    let dst = &mut dst_row[ni * plane..(ni + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let dst_seg = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        let (lo, hi) = g.valid_ox(kx);
                        let ix0 = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            dst_seg[lo..hi].copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (j, d) in dst_seg[lo..hi].iter_mut().enumerate() {
                                *d = src_row[ix0 + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn col2im<T: Scalar>(cols_mat: &[T], g: &Geometry) -> Vec<T> {
    let cols = g.cols();
    let plane = g.plane();
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    for ci in 0..g.c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src_row = &cols_mat[row * cols..(row + 1) * cols];
                for ni in 0..g.n {
                    let dst = &mut dx[(ni * g.c + ci) * g.h * g.w..(ni * g.c + ci + 1) * g.h * g.w];
                    let src = &src_row[ni * plane..(ni + 1) * plane];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let (lo, hi) = g.valid_ox(kx);
                        let ix0 = lo * g.stride + kx - g.pad;
                        let seg = &src[oy * g.wo + lo..oy * g.wo + hi];
                        if g.stride == 1 {
                            dst_row[ix0..ix0 + seg.len()].iter_mut().zip(seg).for_each(|(d, &v)| *d = *d + v);
                        } else {
                            for (j, &v) in seg.iter().enumerate() {
                                let ix = ix0 + j * g.stride;
                                dst_row[ix] = dst_row[ix] + v;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

impl<T: Scalar> Tensor<T> {
    /// Cross-correlation of an `N x C x H x W` input with an `O x C x k x k`
    /// kernel plus an optional length-`O` bias.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        self.expect_rank("conv2d", 4)?;
        weight.expect_rank("conv2d", 4)?;
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let (o, wc, kh, kw) = (weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]);
        if wc != c {
            return Err(TensorError::shape(
                "conv2d",
                format!("input has {} channels but kernel expects {}", c, wc),
            ));
        }
        if kh != kw {
            return Err(TensorError::shape("conv2d", format!("kernel must be square, got {}x{}", kh, kw)));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(TensorError::shape(
                    "conv2d",
                    format!("bias shape {:?} does not match {} output channels", b.shape(), o),
                ));
            }
        }
        let (ho, wo) = match (
            conv_output_size(h, kh, stride, padding),
            conv_output_size(w, kw, stride, padding),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => {
                return Err(TensorError::shape(
                    "conv2d",
                    format!(
                        "kernel {}x{} with stride {} does not fit input {}x{} padded by {}",
                        kh, kw, stride, h, w, padding
                    ),
                ))
            }
        };
        let g = Geometry { n, c, h, w, k: kh, stride, pad: padding, ho, wo };

        let cols = im2col(&self.data(), &g);
        let wdata = weight.to_vec();
        let plane = g.plane();
        let ncols = g.cols();
        let mut tmp = vec![T::zero(); o * ncols];
        T::gemm(o, g.rows(), ncols, &wdata, false, &cols, false, &mut tmp, false);

        let bvals = bias.map(|b| b.to_vec());
        let mut out = vec![T::zero(); n * o * plane];
        for oi in 0..o {
            let bo = bvals.as_ref().map_or(T::zero(), |b| b[oi]);
            for ni in 0..n {
                let src = &tmp[oi * ncols + ni * plane..oi * ncols + (ni + 1) * plane];
                let dst = &mut out[(ni * o + oi) * plane..(ni * o + oi + 1) * plane];
                if bvals.is_some() {
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = s + bo);
                } else {
                    dst.copy_from_slice(src);
                }
            }
        }

        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let has_bias = bias.is_some();
        Tensor::from_op("conv2d", vec![n, o, ho, wo], out, parents, move |gout, needs| {
            // Re-lay the output gradient as O x (N * plane).
            let mut gmat = vec![T::zero(); o * ncols];
            for oi in 0..o {
                for ni in 0..n {
                    gmat[oi * ncols + ni * plane..oi * ncols + (ni + 1) * plane]
                        .copy_from_slice(&gout[(ni * o + oi) * plane..(ni * o + oi + 1) * plane]);
                }
            }
            let gx = needs[0].then(|| {
                let mut gcols = vec![T::zero(); g.rows() * ncols];
                T::gemm(g.rows(), o, ncols, &wdata, true, &gmat, false, &mut gcols, false);
                col2im(&gcols, &g)
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![T::zero(); o * g.rows()];
                T::gemm(o, ncols, g.rows(), &gmat, false, &cols, true, &mut gw, false);
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    (0..o).map(|oi| gmat[oi * ncols..(oi + 1) * ncols].iter().copied().sum()).collect()
                }));
            }
            grads
        })
    }
}
