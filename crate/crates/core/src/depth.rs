//! Monocular depth adaptation: a learnable global scale/shift followed by a
//! shallow convolutional residual refiner, plus depth providers and the
//! synthetic corruption model used to stand in for a monocular network.

use std::path::PathBuf;

use nutrifuse_tensor::{io as tensor_io, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Init};

/// `N x 1 x H x W` depth in meters (synthetic data) or provider-native units.
#[derive(Clone, Debug)]
pub struct DepthMap<T: Scalar = f64> {
    tensor: Tensor<T>,
}

impl<T: Scalar> DepthMap<T> {
    pub fn new(tensor: Tensor<T>, max_abs: f64) -> Result<Self> {
        if tensor.rank() != 4 || tensor.shape()[1] != 1 {
            return Err(Error::Param(format!("depth map must be N x 1 x H x W, got {:?}", tensor.shape())));
        }
        let bad = tensor.data().iter().any(|v| !v.is_finite() || v.to_f64().unwrap().abs() > max_abs);
        if bad {
            return Err(Error::Numeric(format!("depth values must be finite and within ±{max_abs}")));
        }
        Ok(DepthMap { tensor })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.tensor
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[3]
    }
}

/// Learnable global calibration `alpha * d + beta`; starts as the identity.
pub struct AffineCalibration<T: Scalar> {
    pub alpha: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> AffineCalibration<T> {
    pub fn new(b: &mut Builder<'_, T>, name: &str) -> Result<Self> {
        Ok(AffineCalibration {
            alpha: b.param(&format!("{name}.alpha"), &[1], 1, Init::Constant(1.0))?,
            beta: b.param(&format!("{name}.beta"), &[1], 1, Init::Zeros)?,
        })
    }

    pub fn values(&self) -> (f64, f64) {
        (self.alpha.item().to_f64().unwrap(), self.beta.item().to_f64().unwrap())
    }
}

/// Three 3x3 convolutions (1 -> w -> w -> 1) with ReLU in between. The last
/// layer starts at zero so a fresh refiner outputs exactly zero.
pub struct ResidualRefiner<T: Scalar> {
    pub layers: [Conv2d<T>; 3],
}

impl<T: Scalar> ResidualRefiner<T> {
    pub fn new(b: &mut Builder<'_, T>, name: &str, width: usize) -> Result<Self> {
        Ok(ResidualRefiner {
            layers: [
                Conv2d::new(b, &format!("{name}.conv0"), 1, width, 3, 1, 1, Init::He)?,
                Conv2d::new(b, &format!("{name}.conv1"), width, width, 3, 1, 1, Init::He)?,
                Conv2d::new(b, &format!("{name}.conv2"), width, 1, 3, 1, 1, Init::Zeros)?,
            ],
        })
    }
}

pub fn apply_affine<T: Scalar>(d_mono: &Tensor<T>, cal: &AffineCalibration<T>) -> Result<Tensor<T>> {
    Ok(d_mono.affine(&cal.alpha, &cal.beta)?)
}

pub fn refine<T: Scalar>(d_global: &Tensor<T>, f: &ResidualRefiner<T>) -> Result<Tensor<T>> {
    if d_global.rank() != 4 || d_global.shape()[1] != 1 {
        return Err(Error::Param(format!("refiner expects a single-channel map, got {:?}", d_global.shape())));
    }
    let [c0, c1, c2] = &f.layers;
    let h = c0.forward(d_global)?.relu()?;
    let h = c1.forward(&h)?.relu()?;
    c2.forward(&h)
}

/// `d_out = alpha * d_mono + beta + f(alpha * d_mono + beta)`; the refiner
/// term is skipped when `f` is `None`.
pub fn adapt<T: Scalar>(
    d_mono: &Tensor<T>,
    cal: &AffineCalibration<T>,
    f: Option<&ResidualRefiner<T>>,
) -> Result<Tensor<T>> {
    let d_global = apply_affine(d_mono, cal)?;
    match f {
        Some(f) => Ok(d_global.add(&refine(&d_global, f)?)?),
        None => Ok(d_global),
    }
}

/// The adapter as one unit: calibration plus optional refiner.
pub struct Ssra<T: Scalar> {
    pub calibration: AffineCalibration<T>,
    pub refiner: Option<ResidualRefiner<T>>,
}

impl<T: Scalar> Ssra<T> {
    pub fn new(b: &mut Builder<'_, T>, name: &str, refiner_width: Option<usize>) -> Result<Self> {
        let calibration = AffineCalibration::new(b, name)?;
        let refiner = refiner_width.map(|w| ResidualRefiner::new(b, &format!("{name}.refiner"), w)).transpose()?;
        Ok(Ssra { calibration, refiner })
    }

    pub fn forward(&self, d_mono: &Tensor<T>) -> Result<Tensor<T>> {
        adapt(d_mono, &self.calibration, self.refiner.as_ref())
    }
}

/// Ordinary least squares `(alpha, beta)` minimizing `sum (alpha * x + beta - y)^2`.
pub fn fit_affine_closed_form(d_mono: &[f64], d_gt: &[f64]) -> Result<(f64, f64)> {
    if d_mono.len() != d_gt.len() || d_mono.len() < 2 {
        return Err(Error::SingularFit("need at least two paired samples".into()));
    }
    let n = d_mono.len() as f64;
    let mx = d_mono.iter().sum::<f64>() / n;
    let my = d_gt.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (&x, &y) in d_mono.iter().zip(d_gt) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    let scale = d_mono.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(f64::MIN_POSITIVE);
    if sxx <= n * (scale * 1e-12).powi(2) {
        return Err(Error::SingularFit("monocular depth is constant".into()));
    }
    let alpha = sxy / sxx;
    Ok((alpha, my - alpha * mx))
}

/// Parameters of the synthetic monocular-depth corruption
/// `d_mono = (d_gt - shift) / scale + distortion * smooth_field + noise`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corruption {
    pub scale: f64,
    pub shift: f64,
    pub distortion: f64,
    pub noise_sd: f64,
}

impl Corruption {
    pub const IDENTITY: Corruption = Corruption { scale: 1.0, shift: 0.0, distortion: 0.0, noise_sd: 0.0 };
}

/// Low-frequency random surface over an `h x w` grid with max |value| == 1.
pub fn smooth_field(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5_300_7a_f1e1d);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(-1.0..1.0),
                rng.gen_range(0.0..1.5),
                rng.gen_range(0.0..1.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let mut field: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64 / h as f64, (i % w) as f64 / w as f64);
            waves
                .iter()
                .map(|&(amp, fy, fx, ph)| amp * (std::f64::consts::TAU * (fy * y + fx * x) + ph).cos())
                .sum()
        })
        .collect();
    let peak = field.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        field.iter_mut().for_each(|v| *v /= peak);
    }
    field
}

/// Applies [`Corruption`] to every plane of `d_gt` (`N x 1 x H x W`).
pub fn corrupt_depth(d_gt: &Tensor<f64>, c: Corruption, seed: u64) -> Result<Tensor<f64>> {
    if c.scale == 0.0 || !c.scale.is_finite() {
        return Err(Error::Param("corruption scale must be nonzero".into()));
    }
    if c.noise_sd < 0.0 || !c.noise_sd.is_finite() || !c.distortion.is_finite() || !c.shift.is_finite() {
        return Err(Error::Param("corruption parameters must be finite with nonnegative noise".into()));
    }
    let shape = d_gt.shape().to_vec();
    if shape.len() < 2 {
        return Err(Error::Param(format!("depth must have spatial axes, got {:?}", shape)));
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let mut out = d_gt.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, c.noise_sd).map_err(|e| Error::Param(e.to_string()))?;
    for (p, plane) in out.chunks_mut(h * w).enumerate() {
        plane.iter_mut().for_each(|v| *v = (*v - c.shift) / c.scale);
        if c.distortion != 0.0 {
            let field = smooth_field(h, w, seed.wrapping_add(p as u64));
            plane.iter_mut().zip(&field).for_each(|(v, f)| *v += c.distortion * f);
        }
        if c.noise_sd > 0.0 {
            plane.iter_mut().for_each(|v| *v += noise.sample(&mut rng));
        }
    }
    Ok(Tensor::from_vec(&shape, out)?)
}

/// Where a provider may find auxiliary inputs for one image.
#[derive(Clone, Debug, Default)]
pub struct DepthRequest {
    pub depth_path: Option<PathBuf>,
    pub seed: u64,
}

/// Maps an RGB image (`1 x 3 x H x W`) to a monocular depth estimate of the
/// same spatial size.
pub trait DepthProvider {
    fn tag(&self) -> &'static str;

    fn estimate(&self, rgb: &Tensor<f64>, request: &DepthRequest) -> Result<DepthMap<f64>>;
}

fn check_spatial(rgb: &Tensor<f64>, d: &Tensor<f64>) -> Result<()> {
    let rs = rgb.shape();
    let ds = d.shape();
    if rs.len() < 2 || ds.len() < 2 || rs[rs.len() - 2..] != ds[ds.len() - 2..] {
        return Err(Error::Param(format!("depth {:?} does not match image {:?}", ds, rs)));
    }
    Ok(())
}

fn as_batched(d: Tensor<f64>) -> Result<Tensor<f64>> {
    let s = d.shape().to_vec();
    Ok(match s.len() {
        2 => d.reshape(&[1, 1, s[0], s[1]])?,
        3 => d.reshape(&[1, s[0], s[1], s[2]])?,
        _ => d,
    })
}

/// Reads a precomputed depth map from a tensor file.
pub struct FileDepthProvider {
    pub max_abs: f64,
}

impl DepthProvider for FileDepthProvider {
    fn tag(&self) -> &'static str {
        "file"
    }

    fn estimate(&self, rgb: &Tensor<f64>, request: &DepthRequest) -> Result<DepthMap<f64>> {
        let path = request
            .depth_path
            .as_ref()
            .ok_or_else(|| Error::Param("file depth provider needs a depth path".into()))?;
        let d = as_batched(tensor_io::load::<f64>(path).map_err(|e| Error::data(path.display().to_string(), e))?)?;
        check_spatial(rgb, &d)?;
        DepthMap::new(d, self.max_abs)
    }
}

/// Reads ground-truth depth and corrupts it with a seeded scale/shift error,
/// a smooth distortion and pixel noise.
pub struct SyntheticCorruptor {
    pub corruption: Corruption,
    pub source: FileDepthProvider,
}

impl DepthProvider for SyntheticCorruptor {
    fn tag(&self) -> &'static str {
        "synthetic"
    }

    fn estimate(&self, rgb: &Tensor<f64>, request: &DepthRequest) -> Result<DepthMap<f64>> {
        let gt = self.source.estimate(rgb, request)?;
        let d = corrupt_depth(gt.tensor(), self.corruption, request.seed)?;
        DepthMap::new(d, self.source.max_abs)
    }
}
