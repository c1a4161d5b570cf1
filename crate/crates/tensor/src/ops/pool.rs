use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bin `i` of `out` bins over `len` inputs covers `[floor(i*len/out), ceil((i+1)*len/out))`.
pub fn adaptive_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

impl<T: Scalar> Tensor<T> {
    /// `N x C x H x W -> N x C` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        self.expect_rank("global_avg_pool", 4)?;
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        let plane = h * w;
        if plane == 0 {
            return Err(TensorError::degenerate("global_avg_pool", "empty spatial extent"));
        }
        let inv = T::one() / T::from_usize(plane).unwrap();
        let out = self.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
        Tensor::from_op("global_avg_pool", vec![n, c], out, vec![self.clone()], move |g, _| {
            let mut gx = Vec::with_capacity(g.len() * plane);
            for &gi in g {
                gx.extend(std::iter::repeat_n(gi * inv, plane));
            }
            vec![Some(gx)]
        })
    }

    /// Averages each spatial axis into `out_h x out_w` contiguous bins.
    pub fn adaptive_avg_pool(&self, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        self.expect_rank("adaptive_avg_pool", 4)?;
        let (n, c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2], self.shape()[3]);
        if out_h < 1 || out_w < 1 {
            return Err(TensorError::shape("adaptive_avg_pool", "output extents must be at least 1"));
        }
        if out_h > h || out_w > w {
            return Err(TensorError::shape(
                "adaptive_avg_pool",
                format!("cannot pool {}x{} up to {}x{}", h, w, out_h, out_w),
            ));
        }
        let bins_y: Vec<(usize, usize)> = (0..out_h).map(|i| adaptive_bin(i, h, out_h)).collect();
        let bins_x: Vec<(usize, usize)> = (0..out_w).map(|j| adaptive_bin(j, w, out_w)).collect();
        let x = self.data();
        let mut out = vec![T::zero(); n * c * out_h * out_w];
        for (p, dst) in out.chunks_mut(out_h * out_w).enumerate() {
            let src = &x[p * h * w..(p + 1) * h * w];
            for (i, &(y0, y1)) in bins_y.iter().enumerate() {
                for (j, &(x0, x1)) in bins_x.iter().enumerate() {
                    let mut s = T::zero();
                    for yy in y0..y1 {
                        s = s + src[yy * w + x0..yy * w + x1].iter().copied().sum();
                    }
                    dst[i * out_w + j] = s / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                }
            }
        }
        drop(x);
        Tensor::from_op(
            "adaptive_avg_pool",
            vec![n, c, out_h, out_w],
            out,
            vec![self.clone()],
            move |g, _| {
                let mut gx = vec![T::zero(); n * c * h * w];
                for (p, gsrc) in g.chunks(out_h * out_w).enumerate() {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for (i, &(y0, y1)) in bins_y.iter().enumerate() {
                        for (j, &(x0, x1)) in bins_x.iter().enumerate() {
                            let share = gsrc[i * out_w + j] / T::from_usize((y1 - y0) * (x1 - x0)).unwrap();
                            for yy in y0..y1 {
                                dst[yy * w + x0..yy * w + x1].iter_mut().for_each(|v| *v = *v + share);
                            }
                        }
                    }
                }
                vec![Some(gx)]
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_to_input_size_is_identity() {
        let x = Tensor::<f64>::from_vec(&[1, 2, 3, 2], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(x.adaptive_avg_pool(3, 2).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn quadrant_means() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let y = x.adaptive_avg_pool(2, 2).unwrap();
        // quadrants: {0,1,4,5}, {2,3,6,7}, {8,9,12,13}, {10,11,14,15}
        assert_eq!(y.to_vec(), vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn overlapping_bins_follow_floor_ceil_rule() {
        assert_eq!(adaptive_bin(0, 5, 3), (0, 2));
        assert_eq!(adaptive_bin(1, 5, 3), (1, 4));
        assert_eq!(adaptive_bin(2, 5, 3), (3, 5));
    }

    #[test]
    fn global_pool_of_constant() {
        let x = Tensor::<f64>::full(&[2, 3, 5, 7], 1.25);
        let y = x.global_avg_pool().unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert!(y.to_vec().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn zero_output_extent_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        assert!(x.adaptive_avg_pool(0, 2).is_err());
        assert!(x.adaptive_avg_pool(5, 2).is_err());
    }
}
