use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{numel, Tensor};

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// For each output element, the flat index of its source element.
fn permutation_map(shape: &[usize], dims: &[usize]) -> Vec<usize> {
    let in_strides = strides_of(shape);
    let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    for _ in 0..total {
        map.push(idx.iter().zip(dims).map(|(&i, &d)| i * in_strides[d]).sum());
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    map
}

impl<T: Scalar> Tensor<T> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(TensorError::shape(
                "reshape",
                format!("cannot reshape {:?} into {:?}", self.shape(), shape),
            ));
        }
        Tensor::from_op("reshape", shape.to_vec(), self.to_vec(), vec![self.clone()], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// Reorders axes: output axis `i` is input axis `dims[i]`.
    pub fn permute(&self, dims: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if dims.len() != rank || dims.iter().any(|&d| d >= rank || std::mem::replace(&mut seen[d], true)) {
            return Err(TensorError::shape(
                "permute",
                format!("{:?} is not a permutation of the axes of {:?}", dims, self.shape()),
            ));
        }
        let map = permutation_map(self.shape(), dims);
        let x = self.data();
        let out = map.iter().map(|&i| x[i]).collect();
        drop(x);
        let out_shape = dims.iter().map(|&d| self.shape()[d]).collect();
        Tensor::from_op("permute", out_shape, out, vec![self.clone()], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for (&src, &gv) in map.iter().zip(g) {
                gx[src] = gv;
            }
            vec![Some(gx)]
        })
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| TensorError::shape("concat", "no inputs"))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(TensorError::shape("concat", format!("axis {} out of range for rank {}", axis, rank)));
        }
        for p in parts {
            let compatible = p.rank() == rank
                && p.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(TensorError::shape(
                    "concat",
                    format!("cannot concatenate {:?} with {:?} along axis {}", p.shape(), first.shape(), axis),
                ));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for o in 0..outer {
            for (d, &len) in datas.iter().zip(&lens) {
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        drop(datas);
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Tensor::from_op("concat", shape, out, parts.to_vec(), move |g, needs| {
            let mut grads: Vec<Option<Vec<T>>> =
                lens.iter().zip(needs).map(|(&l, &need)| need.then(|| Vec::with_capacity(outer * l * inner))).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (gp, &len) in grads.iter_mut().zip(&lens) {
                    if let Some(v) = gp {
                        v.extend_from_slice(&g[offset..offset + len * inner]);
                    }
                    offset += len * inner;
                }
            }
            grads
        })
    }

    /// Channel concatenation of `N x C_i x H x W` maps.
    pub fn concat_channels(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
        for p in parts {
            p.expect_rank("concat_channels", 4)?;
        }
        Self::concat(parts, 1)
    }
}
