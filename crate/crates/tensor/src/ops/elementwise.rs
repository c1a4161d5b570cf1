//! Element-wise arithmetic, activations and reductions.

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn unary<T: Scalar>(
    x: &Tensor<T>,
    name: &'static str,
    f: impl Fn(T) -> T,
    df: impl Fn(T, T) -> T + 'static,
) -> Result<Tensor<T>> {
    let xd = x.to_vec();
    let out: Vec<T> = xd.iter().map(|&v| f(v)).collect();
    let saved_out = out.clone();
    Tensor::from_op(name, x.shape().to_vec(), out, vec![x.clone()], move |g, _| {
        // df receives (input, output)
        let gx = g
            .iter()
            .zip(xd.iter().zip(&saved_out))
            .map(|(&g, (&xi, &yi))| g * df(xi, yi))
            .collect();
        vec![Some(gx)]
    })
}

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::shape(
            op,
            format!("operands have shapes {:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn softplus_scalar<T: Scalar>(v: T) -> T {
    // max(v, 0) + ln(1 + exp(-|v|)) stays finite for large |v|
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("add", self, other)?;
        let out = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a + b).collect();
        Tensor::from_op("add", self.shape().to_vec(), out, vec![self.clone(), other.clone()], |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.to_vec())]
        })
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("sub", self, other)?;
        let out = self.data().iter().zip(other.data().iter()).map(|(&a, &b)| a - b).collect();
        Tensor::from_op("sub", self.shape().to_vec(), out, vec![self.clone(), other.clone()], |g, needs| {
            vec![needs[0].then(|| g.to_vec()), needs[1].then(|| g.iter().map(|&v| -v).collect())]
        })
    }

    /// Hadamard product.
    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        same_shape("mul", self, other)?;
        let a = self.to_vec();
        let b = other.to_vec();
        let out = a.iter().zip(&b).map(|(&x, &y)| x * y).collect();
        Tensor::from_op("mul", self.shape().to_vec(), out, vec![self.clone(), other.clone()], move |g, needs| {
            vec![
                needs[0].then(|| g.iter().zip(&b).map(|(&g, &y)| g * y).collect()),
                needs[1].then(|| g.iter().zip(&a).map(|(&g, &x)| g * x).collect()),
            ]
        })
    }

    /// `a * x + b` with constant `a`, `b`.
    pub fn scale_shift(&self, a: T, b: T) -> Result<Tensor<T>> {
        let out = self.data().iter().map(|&v| a * v + b).collect();
        Tensor::from_op("scale_shift", self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            vec![Some(g.iter().map(|&g| g * a).collect())]
        })
    }

    pub fn scale(&self, a: T) -> Result<Tensor<T>> {
        self.scale_shift(a, T::zero())
    }

    /// `alpha * x + beta` where `alpha` and `beta` are one-element tensors;
    /// differentiable in all three operands.
    pub fn affine(&self, alpha: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
        if alpha.numel() != 1 || beta.numel() != 1 {
            return Err(TensorError::shape("affine", "alpha and beta must hold one element each"));
        }
        let a = alpha.item();
        let b = beta.item();
        let x = self.to_vec();
        let out = x.iter().map(|&v| a * v + b).collect();
        Tensor::from_op(
            "affine",
            self.shape().to_vec(),
            out,
            vec![self.clone(), alpha.clone(), beta.clone()],
            move |g, needs| {
                vec![
                    needs[0].then(|| g.iter().map(|&g| g * a).collect()),
                    needs[1].then(|| vec![g.iter().zip(&x).map(|(&g, &v)| g * v).sum()]),
                    needs[2].then(|| vec![g.iter().copied().sum()]),
                ]
            },
        )
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        unary(self, "relu", |v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        unary(self, "sigmoid", sigmoid_scalar, |_, y| y * (T::one() - y))
    }

    pub fn softplus(&self) -> Result<Tensor<T>> {
        unary(self, "softplus", softplus_scalar, |x, _| sigmoid_scalar(x))
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        unary(self, "exp", |v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Result<Tensor<T>> {
        if self.data().iter().any(|&v| v <= T::zero()) {
            return Err(TensorError::degenerate("ln", "logarithm of a non-positive value"));
        }
        unary(self, "ln", |v| v.ln(), |x, _| T::one() / x)
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&self) -> Result<Tensor<T>> {
        unary(self, "abs", |v| v.abs(), |x, _| {
            if x > T::zero() {
                T::one()
            } else if x < T::zero() {
                -T::one()
            } else {
                T::zero()
            }
        })
    }

    pub fn square(&self) -> Result<Tensor<T>> {
        unary(self, "square", |v| v * v, |x, _| x + x)
    }

    pub fn sum(&self) -> Result<Tensor<T>> {
        let n = self.numel();
        let s = self.data().iter().copied().sum();
        Tensor::from_op("sum", vec![1], vec![s], vec![self.clone()], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = self.numel();
        if n == 0 {
            return Err(TensorError::degenerate("mean", "empty tensor"));
        }
        self.sum()?.scale(T::one() / T::from_usize(n).unwrap())
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::shape("sum_axis", format!("axis {} out of range for {:?}", axis, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let data = self.data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &data[(o * len + k) * inner..(o * len + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
            }
        }
        drop(data);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Tensor::from_op("sum_axis", out_shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for k in 0..len {
                    gx[(o * len + k) * inner..(o * len + k + 1) * inner]
                        .copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor<T>> {
        let len = *self
            .shape()
            .get(axis)
            .ok_or_else(|| TensorError::shape("mean_axis", format!("axis {} out of range", axis)))?;
        if len == 0 {
            return Err(TensorError::degenerate("mean_axis", "empty axis"));
        }
        self.sum_axis(axis)?.scale(T::one() / T::from_usize(len).unwrap())
    }

    /// Adds the 1-D tensor `bias` along `axis`, broadcasting over every other axis.
    pub fn add_bias(&self, bias: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || bias.rank() != 1 || bias.numel() != shape[axis] {
            return Err(TensorError::shape(
                "add_bias",
                format!("bias of shape {:?} does not match axis {} of {:?}", bias.shape(), axis, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let b = bias.to_vec();
        let mut out = self.to_vec();
        for o in 0..outer {
            for (k, &bk) in b.iter().enumerate() {
                let base = (o * len + k) * inner;
                out[base..base + inner].iter_mut().for_each(|v| *v = *v + bk);
            }
        }
        Tensor::from_op("add_bias", shape, out, vec![self.clone(), bias.clone()], move |g, needs| {
            let gb = needs[1].then(|| {
                let mut gb = vec![T::zero(); len];
                for o in 0..outer {
                    for (k, acc) in gb.iter_mut().enumerate() {
                        let base = (o * len + k) * inner;
                        *acc = *acc + g[base..base + inner].iter().copied().sum();
                    }
                }
                gb
            });
            vec![needs[0].then(|| g.to_vec()), gb]
        })
    }

    /// Multiplies by `m`, whose shape must be a leading prefix of `self`'s shape;
    /// `m` is broadcast over the remaining trailing axes (e.g. an `N x C` channel
    /// mask applied to an `N x C x H x W` map).
    pub fn mul_prefix(&self, m: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if m.rank() > shape.len() || shape[..m.rank()] != *m.shape() {
            return Err(TensorError::shape(
                "mul_prefix",
                format!("{:?} is not a prefix of {:?}", m.shape(), shape),
            ));
        }
        let inner: usize = shape[m.rank()..].iter().product();
        let x = self.to_vec();
        let mv = m.to_vec();
        let mut out = x.clone();
        for (blk, &s) in out.chunks_mut(inner.max(1)).zip(&mv) {
            blk.iter_mut().for_each(|v| *v = *v * s);
        }
        Tensor::from_op("mul_prefix", shape, out, vec![self.clone(), m.clone()], move |g, needs| {
            let gx = needs[0].then(|| {
                let mut gx = g.to_vec();
                for (blk, &s) in gx.chunks_mut(inner.max(1)).zip(&mv) {
                    blk.iter_mut().for_each(|v| *v = *v * s);
                }
                gx
            });
            let gm = needs[1].then(|| {
                g.chunks(inner.max(1))
                    .zip(x.chunks(inner.max(1)))
                    .map(|(gb, xb)| gb.iter().zip(xb).map(|(&a, &b)| a * b).sum())
                    .collect()
            });
            vec![gx, gm]
        })
    }

    /// Per-sample min-max normalization to `[0, 1]` over all axes but the first:
    /// `(x - min) / (max - min + eps)`. Gradients flow through the arg-min and
    /// arg-max elements.
    pub fn minmax_normalize(&self, eps: T) -> Result<Tensor<T>> {
        if self.rank() < 2 {
            return Err(TensorError::shape("minmax_normalize", "expected a batched tensor"));
        }
        let n = self.shape()[0];
        let inner = self.numel() / n.max(1);
        if inner == 0 {
            return Err(TensorError::degenerate("minmax_normalize", "empty sample"));
        }
        let x = self.to_vec();
        let mut out = vec![T::zero(); x.len()];
        let mut stats = Vec::with_capacity(n);
        for s in 0..n {
            let blk = &x[s * inner..(s + 1) * inner];
            let (mut lo, mut hi) = (0usize, 0usize);
            for (i, &v) in blk.iter().enumerate() {
                if v < blk[lo] {
                    lo = i;
                }
                if v > blk[hi] {
                    hi = i;
                }
            }
            let den = blk[hi] - blk[lo] + eps;
            for (o, &v) in out[s * inner..(s + 1) * inner].iter_mut().zip(blk) {
                *o = (v - blk[lo]) / den;
            }
            stats.push((lo, hi, den));
        }
        let y = out.clone();
        Tensor::from_op("minmax_normalize", self.shape().to_vec(), out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (s, &(lo, hi, den)) in stats.iter().enumerate() {
                let gb = &g[s * inner..(s + 1) * inner];
                let yb = &y[s * inner..(s + 1) * inner];
                let dst = &mut gx[s * inner..(s + 1) * inner];
                let mut gy_dot_y = T::zero();
                let mut gsum = T::zero();
                for (i, (&gi, &yi)) in gb.iter().zip(yb).enumerate() {
                    dst[i] = gi / den;
                    gy_dot_y = gy_dot_y + gi * yi;
                    gsum = gsum + gi;
                }
                // y = (x - m) / (M - m + eps)
                // dy_i/dm = (-1 + y_i) / den ; dy_i/dM = -y_i / den
                dst[lo] = dst[lo] + (gy_dot_y - gsum) / den;
                dst[hi] = dst[hi] - gy_dot_y / den;
            }
            vec![Some(gx)]
        })
    }
}
