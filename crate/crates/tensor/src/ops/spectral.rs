//! 2-D discrete Fourier transforms over the last two axes and differentiable
//! frequency-domain masking.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Complex array stored as two real planes of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor<T: Scalar = f64> {
    shape: Vec<usize>,
    re: Vec<T>,
    im: Vec<T>,
}

impl<T: Scalar> ComplexTensor<T> {
    pub fn new(shape: &[usize], re: Vec<T>, im: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if re.len() != n || im.len() != n {
            return Err(TensorError::shape(
                "complex",
                format!("planes of length {} and {} do not fit shape {:?}", re.len(), im.len(), shape),
            ));
        }
        Ok(ComplexTensor { shape: shape.to_vec(), re, im })
    }

    pub fn from_real(x: &Tensor<T>) -> Self {
        ComplexTensor { shape: x.shape().to_vec(), re: x.to_vec(), im: vec![T::zero(); x.numel()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn re(&self) -> &[T] {
        &self.re
    }

    pub fn im(&self) -> &[T] {
        &self.im
    }

    /// Real plane as a constant tensor.
    pub fn real_part(&self) -> Tensor<T> {
        Tensor::from_vec(&self.shape, self.re.clone()).expect("shape checked at construction")
    }

    /// Element-wise product with a real `H x W` plane, broadcast over leading axes.
    pub fn mul_plane(&self, plane: &[T]) -> Result<Self> {
        let (h, w) = spatial(&self.shape, "mul_plane")?;
        if plane.len() != h * w {
            return Err(TensorError::shape("mul_plane", format!("mask has {} bins, expected {}", plane.len(), h * w)));
        }
        let mut out = self.clone();
        for (i, (r, m)) in out.re.iter_mut().zip(out.im.iter_mut()).enumerate() {
            let s = plane[i % (h * w)];
            *r = *r * s;
            *m = *m * s;
        }
        Ok(out)
    }

    fn interleaved(&self) -> Vec<Complex<T>> {
        self.re.iter().zip(&self.im).map(|(&re, &im)| Complex { re, im }).collect()
    }

    fn from_interleaved(shape: Vec<usize>, buf: &[Complex<T>]) -> Self {
        ComplexTensor { shape, re: buf.iter().map(|c| c.re).collect(), im: buf.iter().map(|c| c.im).collect() }
    }
}

fn spatial(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    if shape.len() < 2 {
        return Err(TensorError::shape(op, format!("need at least two axes, got {:?}", shape)));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if h == 0 || w == 0 {
        return Err(TensorError::shape(op, "spatial extents must be at least 1"));
    }
    Ok((h, w))
}

/// Row and column plans for one plane size; reused across planes.
struct Plan2d<T: Scalar> {
    h: usize,
    w: usize,
    rows: Arc<dyn Fft<T>>,
    cols: Arc<dyn Fft<T>>,
    scratch: Vec<Complex<T>>,
    column: Vec<Complex<T>>,
}

impl<T: Scalar> Plan2d<T> {
    fn new(h: usize, w: usize, inverse: bool) -> Self {
        let mut planner = FftPlanner::new();
        let (rows, cols) = if inverse {
            (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
        } else {
            (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
        };
        let scratch_len = rows.get_inplace_scratch_len().max(cols.get_inplace_scratch_len());
        Plan2d { h, w, rows, cols, scratch: vec![Complex::default(); scratch_len], column: vec![Complex::default(); h] }
    }

    /// Unnormalized in-place transform of one `h x w` plane.
    fn run(&mut self, plane: &mut [Complex<T>]) {
        self.rows.process_with_scratch(plane, &mut self.scratch);
        for x in 0..self.w {
            for y in 0..self.h {
                self.column[y] = plane[y * self.w + x];
            }
            self.cols.process_with_scratch(&mut self.column, &mut self.scratch);
            for y in 0..self.h {
                plane[y * self.w + x] = self.column[y];
            }
        }
    }
}

/// Unnormalized forward 2-D DFT of every `H x W` plane of `x`.
pub fn fft2<T: Scalar>(x: &Tensor<T>) -> Result<ComplexTensor<T>> {
    fft2_complex(&ComplexTensor::from_real(x))
}

pub fn fft2_complex<T: Scalar>(x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    let (h, w) = spatial(&x.shape, "fft2")?;
    let mut buf = x.interleaved();
    let mut plan = Plan2d::new(h, w, false);
    buf.chunks_mut(h * w).for_each(|p| plan.run(p));
    Ok(ComplexTensor::from_interleaved(x.shape.clone(), &buf))
}

/// Inverse 2-D DFT normalized by `1 / (H * W)`.
pub fn ifft2<T: Scalar>(x: &ComplexTensor<T>) -> Result<ComplexTensor<T>> {
    let (h, w) = spatial(&x.shape, "ifft2")?;
    let mut buf = x.interleaved();
    let mut plan = Plan2d::new(h, w, true);
    let norm = T::one() / T::from_usize(h * w).unwrap();
    for p in buf.chunks_mut(h * w) {
        plan.run(p);
        p.iter_mut().for_each(|c| *c = *c * norm);
    }
    Ok(ComplexTensor::from_interleaved(x.shape.clone(), &buf))
}

/// Applies `Re(F^-1(F(x) * mask))` per plane for each mask. Returns the real
/// results and, per mask, the largest imaginary magnitude discarded.
fn filter_planes<T: Scalar>(x: &[T], h: usize, w: usize, masks: &[&[T]]) -> Vec<(Vec<T>, T)> {
    let plane = h * w;
    let mut fwd = Plan2d::new(h, w, false);
    let mut inv = Plan2d::new(h, w, true);
    let norm = T::one() / T::from_usize(plane).unwrap();
    let mut outs: Vec<(Vec<T>, T)> = masks.iter().map(|_| (Vec::with_capacity(x.len()), T::zero())).collect();
    let mut spec = vec![Complex::<T>::default(); plane];
    let mut work = vec![Complex::<T>::default(); plane];
    for src in x.chunks(plane) {
        spec.iter_mut().zip(src).for_each(|(c, &v)| *c = Complex { re: v, im: T::zero() });
        fwd.run(&mut spec);
        for (mask, (out, max_im)) in masks.iter().zip(outs.iter_mut()) {
            work.iter_mut().zip(&spec).zip(mask.iter()).for_each(|((d, &s), &m)| *d = s * m);
            inv.run(&mut work);
            for c in &work {
                let im = (c.im * norm).abs();
                if im > *max_im {
                    *max_im = im;
                }
                out.push(c.re * norm);
            }
        }
    }
    outs
}

impl<T: Scalar> Tensor<T> {
    /// Splits every `H x W` plane into the parts passed and rejected by a real
    /// binary frequency mask: `(F^-1(F(x) * M), F^-1(F(x) * (1 - M)))`.
    ///
    /// The mask must be conjugate-symmetric so both parts are real; an
    /// imaginary residual above `imag_tol * max(1, max|x|)` is a numeric
    /// integrity error. Both outputs are differentiable; each band's adjoint
    /// is the same band filter.
    pub fn band_split(&self, mask: &[T], imag_tol: T) -> Result<(Tensor<T>, Tensor<T>)> {
        let (h, w) = spatial(self.shape(), "band_split")?;
        if mask.len() != h * w {
            return Err(TensorError::shape(
                "band_split",
                format!("mask has {} bins, feature plane is {}x{}", mask.len(), h, w),
            ));
        }
        let low_mask: Vec<T> = mask.to_vec();
        let high_mask: Vec<T> = mask.iter().map(|&m| T::one() - m).collect();
        let x = self.to_vec();
        let scale = x.iter().fold(T::one(), |a, &v| a.max(v.abs()));
        let mut bands = filter_planes(&x, h, w, &[&low_mask, &high_mask]).into_iter();
        let (low, low_im) = bands.next().unwrap();
        let (high, high_im) = bands.next().unwrap();
        let residual = low_im.max(high_im);
        if residual > imag_tol * scale {
            return Err(TensorError::NumericIntegrity {
                op: "band_split",
                detail: format!("imaginary residual {} exceeds tolerance; is the mask conjugate-symmetric?", residual),
            });
        }
        let make = |name: &'static str, data: Vec<T>, m: Vec<T>| {
            Tensor::from_op(name, self.shape().to_vec(), data, vec![self.clone()], move |g, _| {
                let mut r = filter_planes(g, h, w, &[&m]);
                vec![Some(r.pop().unwrap().0)]
            })
        };
        Ok((make("band_low", low, low_mask)?, make("band_high", high, high_mask)?))
    }
}
