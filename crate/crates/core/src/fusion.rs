//! Frequency-domain RGB-depth fusion and the cross-modal alignment loss.
//!
//! Each stage splits both feature streams into low and high frequency bands
//! with a binary radial mask, adds the matching bands across modalities and
//! recombines `[F_H, F_L]` with a learnable 1x1 convolution.

use nutrifuse_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Init};

/// Largest imaginary residual (relative to the input magnitude) tolerated
/// when inverting a masked spectrum.
pub const IMAG_TOLERANCE: f64 = 1e-5;

/// Binary low-pass selector on the (unshifted) DFT grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LowpassMask {
    pub height: usize,
    pub width: usize,
    pub kappa: f64,
    /// Row-major `height x width` plane of 0/1 values.
    pub mask: Vec<f64>,
}

fn normalized_freq(k: usize, n: usize) -> f64 {
    let max = n / 2;
    if max == 0 {
        return 0.0;
    }
    let signed = k.min(n - k);
    signed as f64 / max as f64
}

/// Squared normalized radial frequency of bin `(u, v)`; lies in `[0, 1]`.
pub fn radial_frequency_sq(u: usize, v: usize, h: usize, w: usize) -> f64 {
    let fu = normalized_freq(u, h);
    let fv = normalized_freq(v, w);
    (fu * fu + fv * fv) / 2.0
}

/// Bin `(u, v)` passes when its radial frequency is at most `kappa`.
pub fn build_lowpass_mask(height: usize, width: usize, kappa: f64) -> Result<LowpassMask> {
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::Param(format!("kappa must lie in [0, 1], got {kappa}")));
    }
    if height == 0 || width == 0 {
        return Err(Error::Param("mask extents must be positive".into()));
    }
    let k2 = kappa * kappa;
    let mask = (0..height * width)
        .map(|i| if radial_frequency_sq(i / width, i % width, height, width) <= k2 { 1.0 } else { 0.0 })
        .collect();
    Ok(LowpassMask { height, width, kappa, mask })
}

impl LowpassMask {
    pub fn as_scalars<T: Scalar>(&self) -> Vec<T> {
        self.mask.iter().map(|&m| T::from_f64_lossy(m)).collect()
    }

    pub fn passed_bins(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1.0).count()
    }
}

/// `(x_L, x_H)` with `x_L = F^-1(F(x) * M)` and `x_H = F^-1(F(x) * (1 - M))`,
/// per channel plane.
pub fn split_bands<T: Scalar>(x: &Tensor<T>, mask: &LowpassMask) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 2] != mask.height || s[s.len() - 1] != mask.width {
        return Err(Error::Param(format!(
            "mask is {}x{} but features are {:?}",
            mask.height, mask.width, s
        )));
    }
    Ok(x.band_split(&mask.as_scalars(), T::from_f64_lossy(IMAG_TOLERANCE))?)
}

/// Learnable `2C -> C` 1x1 recombination of the fused bands.
pub struct FusionLayer<T: Scalar> {
    pub conv: Conv2d<T>,
}

impl<T: Scalar> FusionLayer<T> {
    pub fn new(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Ok(FusionLayer { conv: Conv2d::new(b, name, 2 * channels, channels, 1, 1, 0, Init::Lecun)? })
    }

    pub fn channels(&self) -> usize {
        self.conv.out_channels()
    }
}

pub struct FafmOutput<T: Scalar> {
    pub fused: Tensor<T>,
    pub high: Tensor<T>,
    pub low: Tensor<T>,
}

pub fn fafm_fuse<T: Scalar>(
    r: &Tensor<T>,
    d: &Tensor<T>,
    mask: &LowpassMask,
    layer: &FusionLayer<T>,
) -> Result<FafmOutput<T>> {
    if r.shape() != d.shape() {
        return Err(Error::Param(format!("RGB features {:?} vs depth features {:?}", r.shape(), d.shape())));
    }
    if r.rank() != 4 || r.shape()[1] != layer.channels() {
        return Err(Error::Param(format!(
            "fusion layer expects {} channels, features are {:?}",
            layer.channels(),
            r.shape()
        )));
    }
    let (r_low, r_high) = split_bands(r, mask)?;
    let (d_low, d_high) = split_bands(d, mask)?;
    let high = r_high.add(&d_high)?;
    let low = r_low.add(&d_low)?;
    let fused = layer.conv.forward(&Tensor::concat_channels(&[high.clone(), low.clone()])?)?;
    Ok(FafmOutput { fused, high, low })
}

/// Per-stage fusion: FAFM when `layers` is given, otherwise plain addition.
pub fn hierarchical_fuse<T: Scalar>(
    rgb_stages: &[Tensor<T>],
    depth_stages: &[Tensor<T>],
    stages: Option<(&[LowpassMask], &[FusionLayer<T>])>,
) -> Result<Vec<Tensor<T>>> {
    if rgb_stages.len() != depth_stages.len() {
        return Err(Error::Config(format!(
            "{} RGB stages but {} depth stages",
            rgb_stages.len(),
            depth_stages.len()
        )));
    }
    match stages {
        Some((masks, layers)) => {
            if masks.len() != rgb_stages.len() || layers.len() != rgb_stages.len() {
                return Err(Error::Config(format!(
                    "{} stages need as many masks and fusion layers, got {} and {}",
                    rgb_stages.len(),
                    masks.len(),
                    layers.len()
                )));
            }
            rgb_stages
                .iter()
                .zip(depth_stages)
                .zip(masks.iter().zip(layers))
                .map(|((r, d), (m, l))| fafm_fuse(r, d, m, l).map(|o| o.fused))
                .collect()
        }
        None => rgb_stages.iter().zip(depth_stages).map(|(r, d)| Ok(r.add(d)?)).collect(),
    }
}

/// Temperature-scaled cosine contrastive loss, RGB anchors over depth candidates:
/// `-(1/N) sum_i log softmax_j(sim(f_r_i, f_d_j) / tau)[i]`.
pub fn alignment_loss<T: Scalar>(feats_r: &Tensor<T>, feats_d: &Tensor<T>, tau: f64) -> Result<Tensor<T>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Param(format!("temperature must be positive, got {tau}")));
    }
    if feats_r.rank() != 2 || feats_r.shape() != feats_d.shape() || feats_r.shape()[0] == 0 {
        return Err(Error::Param(format!(
            "alignment features must be matching N x C, got {:?} and {:?}",
            feats_r.shape(),
            feats_d.shape()
        )));
    }
    let n = feats_r.shape()[0];
    let r = feats_r.l2_normalize_rows()?;
    let d = feats_d.l2_normalize_rows()?;
    let sims = r.matmul(&d.permute(&[1, 0])?)?;
    let log_probs = sims.scale(T::from_f64_lossy(1.0 / tau))?.log_softmax_rows()?;
    let mut eye = vec![T::zero(); n * n];
    (0..n).for_each(|i| eye[i * n + i] = T::one());
    let diag = log_probs.mul(&Tensor::from_vec(&[n, n], eye)?)?.sum()?;
    Ok(diag.scale(T::from_f64_lossy(-1.0 / n as f64))?)
}

/// Global alignment vectors: spatial mean of `N x C x H x W` features.
pub fn global_vectors<T: Scalar>(features: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(features.global_avg_pool()?)
}
