use nutrifuse_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Init};

/// Multi-scale convolutional encoder: each stage is a 3x3 convolution, ReLU,
/// a stride-2 3x3 convolution and ReLU, so stage `s` has spatial size
/// `ceil(input / 2^s)`.
pub struct StageEncoder<T: Scalar> {
    pub stages: Vec<[Conv2d<T>; 2]>,
    pub in_channels: usize,
}

impl<T: Scalar> StageEncoder<T> {
    pub fn new(b: &mut Builder<'_, T>, name: &str, in_channels: usize, widths: &[usize]) -> Result<Self> {
        if widths.is_empty() || widths.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("stage widths must be nonempty and strictly increasing, got {widths:?}")));
        }
        let mut stages = Vec::with_capacity(widths.len());
        let mut c_in = in_channels;
        for (s, &w) in widths.iter().enumerate() {
            stages.push([
                Conv2d::new(b, &format!("{name}.s{s}.conv"), c_in, w, 3, 1, 1, Init::He)?,
                Conv2d::new(b, &format!("{name}.s{s}.down"), w, w, 3, 2, 1, Init::He)?,
            ]);
            c_in = w;
        }
        Ok(StageEncoder { stages, in_channels })
    }

    pub fn widths(&self) -> Vec<usize> {
        self.stages.iter().map(|s| s[1].out_channels()).collect()
    }

    pub fn encode(&self, image: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::Param(format!(
                "encoder expects N x {} x H x W, got {:?}",
                self.in_channels, s
            )));
        }
        let min = 1usize << self.stages.len();
        if s[2] < min || s[3] < min {
            return Err(Error::Param(format!(
                "input {}x{} is smaller than 2^{} = {}",
                s[2],
                s[3],
                self.stages.len(),
                min
            )));
        }
        let mut x = image.clone();
        let mut out = Vec::with_capacity(self.stages.len());
        for [conv, down] in &self.stages {
            x = conv.forward(&x)?.relu()?;
            x = down.forward(&x)?.relu()?;
            out.push(x.clone());
        }
        Ok(out)
    }
}

/// Spatial size of stage `s` (1-based) for an input of `size`.
pub fn stage_size(size: usize, stage: usize) -> usize {
    (0..stage).fold(size, |n, _| n.div_ceil(2))
}
