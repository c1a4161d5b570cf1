//! Named parameter storage and the two basic learnable layers.

use nutrifuse_tensor::{Scalar, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Ordered set of uniquely named trainable tensors.
pub struct ParamStore<T: Scalar> {
    params: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore { params: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Tensor<T> {
        let name = name.into();
        assert!(self.get(&name).is_none(), "duplicate parameter name {name}");
        self.params.push((name, t.clone()));
        t
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(|(_, t)| t.zero_grad());
    }

    /// Hash of every parameter name and shape; equal fingerprints mean
    /// parameter sets are interchangeable.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(format!("{}:{:?};", name, t.shape()).as_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{:02x}", b)).collect()
    }

    pub fn snapshot(&self) -> Vec<Vec<T>> {
        self.params.iter().map(|(_, t)| t.to_vec()).collect()
    }

    pub fn restore(&self, values: &[Vec<T>]) -> Result<()> {
        for ((_, t), v) in self.params.iter().zip(values) {
            t.assign(v)?;
        }
        Ok(())
    }

    /// Copies values from `(name, tensor)` pairs; every parameter must be
    /// present with an identical shape.
    pub fn load_named(&self, source: &[(String, Tensor<T>)]) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in &self.params {
            match source.iter().find(|(n, _)| n == name) {
                None => problems.push(format!("{name}: missing")),
                Some((_, s)) if s.shape() != t.shape() => {
                    problems.push(format!("{name}: expected {:?}, found {:?}", t.shape(), s.shape()))
                }
                Some(_) => {}
            }
        }
        for (name, _) in source {
            if self.get(name).is_none() {
                problems.push(format!("{name}: unexpected"));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Incompatible(problems.join(", ")));
        }
        for (name, t) in &self.params {
            let (_, s) = source.iter().find(|(n, _)| n == name).expect("checked above");
            t.assign(&s.data())?;
        }
        Ok(())
    }
}

/// Weight initialization rules.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`; suited to layers followed by ReLU.
    He,
    /// Uniform in `±1 / sqrt(fan_in)`.
    Lecun,
    Zeros,
    Constant(f64),
}

pub fn init_values<T: Scalar>(rng: &mut ChaCha8Rng, n: usize, fan_in: usize, init: Init) -> Vec<T> {
    let bound = match init {
        Init::He => (6.0 / fan_in.max(1) as f64).sqrt(),
        Init::Lecun => 1.0 / (fan_in.max(1) as f64).sqrt(),
        Init::Zeros => return vec![T::zero(); n],
        Init::Constant(c) => return vec![T::from_f64_lossy(c); n],
    };
    (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-bound..bound))).collect()
}

/// Registers parameters under a dotted name prefix.
pub struct Builder<'a, T: Scalar> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    pub fn param(&mut self, name: &str, shape: &[usize], fan_in: usize, init: Init) -> Result<Tensor<T>> {
        let n = shape.iter().product();
        let t = Tensor::parameter(shape, init_values(self.rng, n, fan_in, init))?;
        Ok(self.store.insert(name, t))
    }
}

pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder<'_, T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        init: Init,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        Ok(Conv2d {
            weight: b.param(&format!("{name}.weight"), &[out_ch, in_ch, kernel, kernel], fan_in, init)?,
            bias: b.param(&format!("{name}.bias"), &[out_ch], fan_in, Init::Zeros)?,
            stride,
            padding,
        })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(x.conv2d(&self.weight, Some(&self.bias), self.stride, self.padding)?)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }
}

/// Affine map over the last axis: `x W + b` with `W` stored `in x out`.
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(b: &mut Builder<'_, T>, name: &str, d_in: usize, d_out: usize, bias: bool, init: Init) -> Result<Self> {
        Ok(Linear {
            weight: b.param(&format!("{name}.weight"), &[d_in, d_out], d_in, init)?,
            bias: if bias { Some(b.param(&format!("{name}.bias"), &[d_out], d_in, Init::Zeros)?) } else { None },
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Applies to any tensor whose last axis has `d_in` entries.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        let d_in = *shape.last().unwrap_or(&0);
        if d_in != self.d_in() {
            return Err(Error::Tensor(nutrifuse_tensor::TensorError::Shape {
                op: "linear",
                detail: format!("input last axis {} but layer expects {}", d_in, self.d_in()),
            }));
        }
        let rows = x.numel() / d_in;
        let mut y = x.reshape(&[rows, d_in])?.matmul(&self.weight)?;
        if let Some(b) = &self.bias {
            y = y.add_bias(b, 1)?;
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = self.d_out();
        Ok(y.reshape(&out_shape)?)
    }
}
