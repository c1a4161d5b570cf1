//! In-memory training sets built from a generated corpus.

use std::path::Path;

use nutrifuse_tensor::{io as tensor_io, no_grad, Scalar, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::{Corruption, DepthProvider, DepthRequest, FileDepthProvider, SyntheticCorruptor};
use crate::error::{Error, Result};
use crate::nutrition::{NutritionVector, NUM_TASKS};
use crate::synth::{read_manifests, Split};

/// How monocular depth is obtained for each image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepthConfig {
    /// `synthetic` (corrupted ground truth) or `file` (ground truth as is).
    pub provider: String,
    pub scale: f64,
    pub shift: f64,
    pub distortion: f64,
    pub noise_sd: f64,
    /// Largest accepted |depth| in provider units.
    pub max_abs: f64,
    /// Weight of the L2 loss between adapted and ground-truth depth.
    pub aux_weight: f64,
}

impl Default for DepthConfig {
    fn default() -> Self {
        DepthConfig {
            provider: "synthetic".into(),
            scale: 2.0,
            shift: 0.5,
            distortion: 0.005,
            noise_sd: 0.0005,
            max_abs: 100.0,
            aux_weight: 0.1,
        }
    }
}

impl DepthConfig {
    pub fn validate(&self) -> Result<()> {
        self.provider()?;
        if !(self.max_abs > 0.0) || !(self.aux_weight >= 0.0) || !(self.noise_sd >= 0.0) {
            return Err(Error::Config("depth.max_abs must be positive, aux_weight and noise_sd nonnegative".into()));
        }
        Ok(())
    }

    pub fn provider(&self) -> Result<Box<dyn DepthProvider>> {
        let source = FileDepthProvider { max_abs: self.max_abs };
        match self.provider.as_str() {
            "file" => Ok(Box::new(source)),
            "synthetic" => {
                if self.scale == 0.0 {
                    return Err(Error::Config("depth.scale must be nonzero".into()));
                }
                let corruption =
                    Corruption { scale: self.scale, shift: self.shift, distortion: self.distortion, noise_sd: self.noise_sd };
                Ok(Box::new(SyntheticCorruptor { corruption, source }))
            }
            other => Err(Error::Config(format!("unknown depth.provider `{other}` (expected synthetic or file)"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// `3 x S x S`.
    pub rgb: Vec<f32>,
    /// Provider depth, `S x S`.
    pub d_mono: Vec<f32>,
    /// Ground-truth depth, `S x S`.
    pub d_gt: Vec<f32>,
    pub target: NutritionVector,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub size: usize,
    pub samples: Vec<Sample>,
}

pub struct Batch<T: Scalar> {
    pub rgb: Tensor<T>,
    pub d_mono: Tensor<T>,
    pub d_gt: Tensor<T>,
    pub targets: Tensor<T>,
}

/// Average-pools a `C x H x W` tensor down to `C x size x size`.
pub fn resize(t: Tensor<f64>, size: usize) -> Result<Tensor<f64>> {
    let s = t.shape().to_vec();
    if s.len() != 3 {
        return Err(Error::Param(format!("expected C x H x W, got {:?}", s)));
    }
    if s[1] == size && s[2] == size {
        return Ok(t);
    }
    if s[1] < size || s[2] < size {
        return Err(Error::Param(format!("image {}x{} is smaller than the model input {size}", s[1], s[2])));
    }
    no_grad(|| Ok(t.reshape(&[1, s[0], s[1], s[2]])?.adaptive_avg_pool(size, size)?.reshape(&[s[0], size, size])?))
}

fn to_f32(t: &Tensor<f64>) -> Vec<f32> {
    t.data().iter().map(|&v| v as f32).collect()
}

/// Loads an image file (`3 x H x W` or `1 x 3 x H x W`) as `1 x 3 x H x W`.
pub fn load_image(path: &Path) -> Result<Tensor<f64>> {
    let t = tensor_io::load::<f64>(path).map_err(|e| Error::data(path.display().to_string(), e))?;
    let s = t.shape().to_vec();
    match s.as_slice() {
        [3, h, w] => Ok(t.reshape(&[1, 3, *h, *w])?),
        [1, 3, _, _] => Ok(t),
        _ => Err(Error::data(path.display().to_string(), format!("expected a 3 x H x W image, got {:?}", s))),
    }
}

/// Loads one image plus provider and ground-truth depth at model resolution.
pub fn load_sample(
    rgb_path: &Path,
    depth_path: &Path,
    seed: u64,
    size: usize,
    provider: &dyn DepthProvider,
    max_abs: f64,
) -> Result<(Vec<f32>, Vec<f32>, Vec<f32>)> {
    let rgb = load_image(rgb_path)?;
    let request = DepthRequest { depth_path: Some(depth_path.to_path_buf()), seed };
    let d_mono = provider.estimate(&rgb, &request)?.into_tensor();
    let d_gt = FileDepthProvider { max_abs }.estimate(&rgb, &request)?.into_tensor();
    let (h, w) = (rgb.shape()[2], rgb.shape()[3]);
    let rgb = resize(rgb.reshape(&[3, h, w])?, size)?;
    let d_mono = resize(d_mono.reshape(&[1, h, w])?, size)?;
    let d_gt = resize(d_gt.reshape(&[1, h, w])?, size)?;
    Ok((to_f32(&rgb), to_f32(&d_mono), to_f32(&d_gt)))
}

/// Source pixel of output `(y, x)` under one of the eight symmetries of an
/// `s x s` square: bit 0 mirrors columns, bit 1 mirrors rows, bit 2 transposes.
pub fn dihedral_source(k: u8, y: usize, x: usize, s: usize) -> (usize, usize) {
    let x = if k & 1 != 0 { s - 1 - x } else { x };
    let y = if k & 2 != 0 { s - 1 - y } else { y };
    if k & 4 != 0 {
        (x, y)
    } else {
        (y, x)
    }
}

impl Dataset {
    /// Loads every sample of `split` (all samples when `None`) from a corpus directory.
    pub fn load(dir: &Path, split: Option<Split>, size: usize, depth: &DepthConfig) -> Result<Self> {
        let provider = depth.provider()?;
        let mut samples = Vec::new();
        for m in read_manifests(dir)? {
            if split.is_some_and(|s| s != m.split) {
                continue;
            }
            let (rgb, d_mono, d_gt) =
                load_sample(&dir.join(&m.rgb_path), &dir.join(&m.depth_path), m.seed, size, provider.as_ref(), depth.max_abs)
                    .map_err(|e| Error::data(&m.id, e))?;
            samples.push(Sample { id: m.id, rgb, d_mono, d_gt, target: m.label });
        }
        if samples.is_empty() {
            return Err(Error::data(dir.display().to_string(), format!("no samples in split {split:?}")));
        }
        Ok(Dataset { size, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn targets(&self) -> Vec<NutritionVector> {
        self.samples.iter().map(|s| s.target).collect()
    }

    pub fn target_means(&self) -> [f64; NUM_TASKS] {
        let n = self.len() as f64;
        let sum = self.targets().into_iter().sum::<NutritionVector>();
        sum.to_array().map(|v| v / n)
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset { size: self.size, samples: idx.iter().map(|&i| self.samples[i].clone()).collect() }
    }

    /// Seeded split into `(rest, held_out)` with `round(len * fraction)` held out.
    pub fn hold_out(&self, fraction: f64, seed: u64) -> (Dataset, Option<Dataset>) {
        let k = (self.len() as f64 * fraction).round() as usize;
        if k == 0 || k >= self.len() {
            return (self.clone(), None);
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (held, rest) = idx.split_at(k);
        let (mut held, mut rest) = (held.to_vec(), rest.to_vec());
        held.sort_unstable();
        rest.sort_unstable();
        (self.subset(&rest), Some(self.subset(&held)))
    }

    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> Result<Batch<T>> {
        self.batch_transformed(idx, None)
    }

    /// Like [`Dataset::batch`] with sample `idx[i]` mapped through square
    /// symmetry `symmetries[i]` (see [`dihedral_source`]). Labels are unchanged.
    pub fn batch_transformed<T: Scalar>(&self, idx: &[usize], symmetries: Option<&[u8]>) -> Result<Batch<T>> {
        let s = self.size;
        let n = idx.len();
        let gather = |f: &dyn Fn(&Sample) -> &[f32]| -> Vec<T> {
            let mut out = Vec::new();
            for (j, &i) in idx.iter().enumerate() {
                let plane = f(&self.samples[i]);
                let k = symmetries.map_or(0, |ks| ks[j]);
                for c in plane.chunks(s * s) {
                    for y in 0..s {
                        for x in 0..s {
                            let (sy, sx) = dihedral_source(k, y, x, s);
                            out.push(T::from_f64_lossy(c[sy * s + sx] as f64));
                        }
                    }
                }
            }
            out
        };
        let targets = idx
            .iter()
            .flat_map(|&i| self.samples[i].target.to_array())
            .map(T::from_f64_lossy)
            .collect();
        Ok(Batch {
            rgb: Tensor::from_vec(&[n, 3, s, s], gather(&|x| &x.rgb))?,
            d_mono: Tensor::from_vec(&[n, 1, s, s], gather(&|x| &x.d_mono))?,
            d_gt: Tensor::from_vec(&[n, 1, s, s], gather(&|x| &x.d_gt))?,
            targets: Tensor::from_vec(&[n, NUM_TASKS], targets)?,
        })
    }
}
