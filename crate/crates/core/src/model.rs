//! The full estimator: depth adaptation, dual-stream encoding, per-stage
//! fusion and the prediction head, with switches for each module.

use nutrifuse_tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::depth::Ssra;
use crate::encoder::{stage_size, StageEncoder};
use crate::error::{Error, Result};
use crate::fusion::{build_lowpass_mask, global_vectors, hierarchical_fuse, FusionLayer, LowpassMask};
use crate::head::{predict_head, Mph, MphConfig, PredictHead};
use crate::nn::{Builder, ParamStore};
use crate::nutrition::NUM_TASKS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Square model input; images are average-pooled down to it.
    pub input_size: usize,
    pub widths: Vec<usize>,
    pub fafm: bool,
    pub ssra: bool,
    pub mph: bool,
    pub kappa: f64,
    /// Per-stage override of `kappa`; empty means `kappa` everywhere.
    pub kappa_per_stage: Vec<f64>,
    /// Hidden width of the depth refiner; 0 keeps only the affine stage.
    pub refiner_width: usize,
    pub unify_width: usize,
    pub grid: usize,
    pub d_attn: usize,
    pub keep_fraction: f64,
    pub hard_mask: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 64,
            widths: vec![16, 32, 64, 128],
            fafm: true,
            ssra: true,
            mph: true,
            kappa: 0.25,
            kappa_per_stage: Vec::new(),
            refiner_width: 16,
            unify_width: 64,
            grid: 4,
            d_attn: 64,
            keep_fraction: 0.5,
            hard_mask: false,
        }
    }
}

/// Cumulative ablation rows: label and `(fafm, ssra, mph)`.
pub const ABLATION_ROWS: [(&str, [bool; 3]); 4] = [
    ("baseline", [false, false, false]),
    ("+FAFM", [true, false, false]),
    ("+SSRA", [true, true, false]),
    ("+MPH", [true, true, true]),
];

impl ModelConfig {
    pub fn uses_depth(&self) -> bool {
        self.fafm || self.ssra
    }

    pub fn with_toggles(&self, [fafm, ssra, mph]: [bool; 3]) -> Self {
        ModelConfig { fafm, ssra, mph, ..self.clone() }
    }

    /// Applies a named preset: `baseline`, `fafm`, `fafm_ssra` or `full`.
    pub fn apply_preset(&mut self, name: &str) -> Result<()> {
        let t = match name {
            "baseline" => ABLATION_ROWS[0].1,
            "fafm" => ABLATION_ROWS[1].1,
            "fafm_ssra" => ABLATION_ROWS[2].1,
            "full" => ABLATION_ROWS[3].1,
            other => return Err(Error::Config(format!("unknown preset `{other}`"))),
        };
        *self = self.with_toggles(t);
        Ok(())
    }

    pub fn stage_kappa(&self, stage: usize) -> f64 {
        self.kappa_per_stage.get(stage).copied().unwrap_or(self.kappa)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.widths.is_empty() || self.widths.windows(2).any(|w| w[0] >= w[1]) || self.widths[0] == 0 {
            return bad(format!("model.widths must be positive and strictly increasing, got {:?}", self.widths));
        }
        if self.input_size < 1 << self.widths.len() {
            return bad(format!("model.input_size {} is below 2^{}", self.input_size, self.widths.len()));
        }
        if !self.kappa_per_stage.is_empty() && self.kappa_per_stage.len() != self.widths.len() {
            return bad(format!(
                "model.kappa_per_stage has {} entries for {} stages",
                self.kappa_per_stage.len(),
                self.widths.len()
            ));
        }
        for k in std::iter::once(self.kappa).chain(self.kappa_per_stage.iter().copied()) {
            if !(0.0..=1.0).contains(&k) {
                return bad(format!("kappa must lie in [0, 1], got {k}"));
            }
        }
        if self.unify_width == 0 || self.d_attn == 0 || self.grid == 0 {
            return bad("model.unify_width, model.d_attn and model.grid must be positive".into());
        }
        let deepest = stage_size(self.input_size, self.widths.len());
        if self.mph && self.grid > deepest {
            return bad(format!("model.grid {} exceeds the deepest stage size {deepest}", self.grid));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return bad(format!("model.keep_fraction must lie in (0, 1], got {}", self.keep_fraction));
        }
        Ok(())
    }
}

pub struct ForwardOutput<T: Scalar> {
    /// `N x 5` predictions in task order.
    pub prediction: Tensor<T>,
    /// Pre-fusion deepest-stage global vectors `(rgb, depth)` when FAFM is on.
    pub alignment: Option<(Tensor<T>, Tensor<T>)>,
    /// Adapted depth before normalization when SSRA is on.
    pub adapted_depth: Option<Tensor<T>>,
}

pub struct NutritionModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub rgb_encoder: StageEncoder<T>,
    pub depth_encoder: Option<StageEncoder<T>>,
    pub masks: Vec<LowpassMask>,
    pub fusion: Vec<FusionLayer<T>>,
    pub mph: Option<Mph<T>>,
    pub head: Option<PredictHead<T>>,
    pub ssra: Option<Ssra<T>>,
}

const NORM_EPS: f64 = 1e-6;

impl<T: Scalar> NutritionModel<T> {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: &mut params, rng: &mut rng };
        let widths = &config.widths;
        let rgb_encoder = StageEncoder::new(&mut b, "rgb", 3, widths)?;
        let depth_encoder = config.uses_depth().then(|| StageEncoder::new(&mut b, "depth", 1, widths)).transpose()?;
        let (mut masks, mut fusion) = (Vec::new(), Vec::new());
        if config.fafm {
            for (s, &w) in widths.iter().enumerate() {
                let n = stage_size(config.input_size, s + 1);
                masks.push(build_lowpass_mask(n, n, config.stage_kappa(s))?);
                fusion.push(FusionLayer::new(&mut b, &format!("fafm.s{s}"), w)?);
            }
        }
        let (mph, head) = if config.mph {
            let cfg = MphConfig {
                width: config.unify_width,
                grid: config.grid,
                d_attn: config.d_attn,
                keep_fraction: config.keep_fraction,
            };
            let mut m = Mph::new(&mut b, "mph", widths, &cfg)?;
            m.channel_mask.hard = config.hard_mask;
            (Some(m), None)
        } else {
            (None, Some(PredictHead::new(&mut b, "head", *widths.last().unwrap())?))
        };
        // Built last so that switching it on leaves every other initial value unchanged.
        let ssra = config
            .ssra
            .then(|| Ssra::new(&mut b, "ssra", (config.refiner_width > 0).then_some(config.refiner_width)))
            .transpose()?;
        Ok(NutritionModel {
            config: config.clone(),
            params,
            rgb_encoder,
            depth_encoder,
            masks,
            fusion,
            mph,
            head,
            ssra,
        })
    }

    fn predict_head(&self) -> &PredictHead<T> {
        self.mph.as_ref().map(|m| &m.head).or(self.head.as_ref()).expect("one head is always built")
    }

    pub fn output_scale(&self) -> [f64; NUM_TASKS] {
        let v = self.predict_head().output_scale.to_f64_vec();
        std::array::from_fn(|i| v[i])
    }

    /// Fixed per-task multiplier on the head output; typically the training
    /// target means so the raw head works near unit scale.
    pub fn set_output_scale(&self, scale: [f64; NUM_TASKS]) -> Result<()> {
        if scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Param(format!("output scale must be positive, got {scale:?}")));
        }
        let v: Vec<T> = scale.iter().map(|&s| T::from_f64_lossy(s)).collect();
        self.predict_head().output_scale.assign(&v)?;
        Ok(())
    }

    pub fn set_hard_mask(&mut self, hard: bool) {
        if let Some(m) = self.mph.as_mut() {
            m.channel_mask.hard = hard;
        }
    }

    /// `rgb` is `N x 3 x S x S`; `d_mono` (`N x 1 x S x S`) is required when
    /// the configuration uses depth.
    pub fn forward(&self, rgb: &Tensor<T>, d_mono: Option<&Tensor<T>>) -> Result<ForwardOutput<T>> {
        let rgb_stages = self.rgb_encoder.encode(rgb)?;
        let (semantic, alignment, adapted_depth) = match &self.depth_encoder {
            None => (rgb_stages.clone(), None, None),
            Some(enc) => {
                let d = d_mono.ok_or_else(|| Error::Param("this configuration needs a depth map".into()))?;
                if d.rank() != 4 || d.shape()[0] != rgb.shape()[0] || d.shape()[1] != 1 || d.shape()[2..] != rgb.shape()[2..] {
                    return Err(Error::Param(format!("depth {:?} does not match image {:?}", d.shape(), rgb.shape())));
                }
                let adapted = self.ssra.as_ref().map(|s| s.forward(d)).transpose()?;
                let normalized = adapted.as_ref().unwrap_or(d).minmax_normalize(T::from_f64_lossy(NORM_EPS))?;
                let depth_stages = enc.encode(&normalized)?;
                let alignment = if self.config.fafm {
                    let (r, dd) = (rgb_stages.last().unwrap(), depth_stages.last().unwrap());
                    Some((global_vectors(r)?, global_vectors(dd)?))
                } else {
                    None
                };
                let stages = self.config.fafm.then_some((&self.masks[..], &self.fusion[..]));
                (hierarchical_fuse(&rgb_stages, &depth_stages, stages)?, alignment, adapted)
            }
        };
        let prediction = match &self.mph {
            Some(m) => m.forward(&rgb_stages, &semantic)?,
            None => predict_head(semantic.last().unwrap(), self.head.as_ref().unwrap())?,
        };
        Ok(ForwardOutput { prediction, alignment, adapted_depth })
    }
}
