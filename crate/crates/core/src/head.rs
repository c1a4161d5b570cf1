//! Mask-based prediction head.
//!
//! Pipeline: project and pool every RGB and fused ("semantic") stage map to a
//! common `width x grid x grid`, flatten to tokens, let RGB tokens attend to
//! semantic tokens, gate the result against the semantic tokens, apply a
//! dynamic channel mask, gate again against the RGB tokens, then pool and
//! regress the five nutrition values.

use nutrifuse_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Init, Linear};
use crate::nutrition::NUM_TASKS;

/// 1x1 projections to a shared width followed by adaptive pooling to a shared grid.
pub struct Unifier<T: Scalar> {
    pub projections: Vec<Conv2d<T>>,
    pub grid: usize,
}

impl<T: Scalar> Unifier<T> {
    pub fn new(b: &mut Builder<'_, T>, name: &str, in_widths: &[usize], width: usize, grid: usize) -> Result<Self> {
        let projections = in_widths
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(b, &format!("{name}.proj{i}"), c, width, 1, 1, 0, Init::Lecun))
            .collect::<Result<_>>()?;
        Ok(Unifier { projections, grid })
    }
}

pub fn unify<T: Scalar>(features: &[Tensor<T>], u: &Unifier<T>) -> Result<Vec<Tensor<T>>> {
    if features.is_empty() {
        return Err(Error::Param("unify needs at least one feature map".into()));
    }
    if features.len() != u.projections.len() {
        return Err(Error::Config(format!(
            "{} feature maps for {} projections",
            features.len(),
            u.projections.len()
        )));
    }
    features
        .iter()
        .zip(&u.projections)
        .map(|(f, p)| Ok(p.forward(f)?.adaptive_avg_pool(u.grid, u.grid)?))
        .collect()
}

/// `N x C x H x W` maps to `N x (H W) x C` tokens.
pub fn map_to_tokens<T: Scalar>(map: &Tensor<T>) -> Result<Tensor<T>> {
    let s = map.shape();
    if s.len() != 4 {
        return Err(Error::Param(format!("expected N x C x H x W, got {:?}", s)));
    }
    Ok(map.reshape(&[s[0], s[1], s[2] * s[3]])?.permute(&[0, 2, 1])?)
}

/// `N x L x C` tokens to an `N x C x L x 1` map.
pub fn tokens_to_map<T: Scalar>(tokens: &Tensor<T>) -> Result<Tensor<T>> {
    let s = tokens.shape();
    if s.len() != 3 {
        return Err(Error::Param(format!("expected N x L x C tokens, got {:?}", s)));
    }
    Ok(tokens.permute(&[0, 2, 1])?.reshape(&[s[0], s[2], s[1], 1])?)
}

/// Single-head attention with a residual connection; the value projection
/// starts at zero so a fresh block returns its query input.
pub struct CrossAttentionBlock<T: Scalar> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub d_attn: usize,
}

impl<T: Scalar> CrossAttentionBlock<T> {
    pub fn new(b: &mut Builder<'_, T>, name: &str, d_model: usize, d_attn: usize) -> Result<Self> {
        Ok(CrossAttentionBlock {
            query: Linear::new(b, &format!("{name}.q"), d_model, d_attn, false, Init::Lecun)?,
            key: Linear::new(b, &format!("{name}.k"), d_model, d_attn, false, Init::Lecun)?,
            value: Linear::new(b, &format!("{name}.v"), d_model, d_model, false, Init::Zeros)?,
            d_attn,
        })
    }

    /// Attention weights `softmax(Q K^T / sqrt(d_attn))`, `N x Lq x Lk`.
    pub fn weights(&self, queries: &Tensor<T>, context: &Tensor<T>) -> Result<Tensor<T>> {
        let q = self.query.forward(queries)?;
        let k = self.key.forward(context)?;
        let scale = T::from_f64_lossy(1.0 / (self.d_attn as f64).sqrt());
        Ok(q.bmm_bt(&k)?.scale(scale)?.softmax_rows()?)
    }
}

pub fn cross_attend<T: Scalar>(
    rgb_tokens: &Tensor<T>,
    semantic_tokens: &Tensor<T>,
    block: &CrossAttentionBlock<T>,
) -> Result<Tensor<T>> {
    let (q, c) = (rgb_tokens.shape(), semantic_tokens.shape());
    if q.len() != 3 || c.len() != 3 || q[0] != c[0] || q[2] != c[2] || q[2] != block.query.d_in() {
        return Err(Error::Param(format!("token shapes {:?} and {:?} are incompatible", q, c)));
    }
    let attn = block.weights(rgb_tokens, semantic_tokens)?;
    let v = block.value.forward(semantic_tokens)?;
    Ok(rgb_tokens.add(&attn.bmm(&v)?)?)
}

/// `out = g * a + (1 - g) * b` with `g = sigmoid([a; b] W + c)` per channel.
pub struct GatedFusion<T: Scalar> {
    pub gate: Linear<T>,
}

impl<T: Scalar> GatedFusion<T> {
    pub fn new(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Ok(GatedFusion { gate: Linear::new(b, &format!("{name}.gate"), 2 * channels, channels, true, Init::Lecun)? })
    }

    pub fn gate_values(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let last = a.rank().saturating_sub(1);
        Ok(self.gate.forward(&Tensor::concat(&[a.clone(), b.clone()], last)?)?.sigmoid()?)
    }

    pub fn forward(&self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.shape() != b.shape() {
            return Err(Error::Param(format!("gated inputs {:?} vs {:?}", a.shape(), b.shape())));
        }
        let g = self.gate_values(a, b)?;
        Ok(b.add(&g.mul(&a.sub(b)?)?)?)
    }
}

/// Channel selection: global pool -> 2-layer perceptron -> per-channel logits.
pub struct ChannelMask<T: Scalar> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
    /// Hard top-k selection instead of the soft sigmoid mask.
    pub hard: bool,
    pub keep_fraction: f64,
}

impl<T: Scalar> ChannelMask<T> {
    pub fn new(b: &mut Builder<'_, T>, name: &str, channels: usize, keep_fraction: f64) -> Result<Self> {
        let hidden_width = (channels / 4).max(1);
        Ok(ChannelMask {
            hidden: Linear::new(b, &format!("{name}.fc0"), channels, hidden_width, true, Init::He)?,
            out: Linear::new(b, &format!("{name}.fc1"), hidden_width, channels, true, Init::Lecun)?,
            hard: false,
            keep_fraction,
        })
    }

    pub fn keep_count(&self, channels: usize) -> usize {
        ((self.keep_fraction * channels as f64).ceil() as usize).clamp(1, channels)
    }

    /// Per-sample channel logits, `N x C`.
    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let pooled = x.reshape(&[s[0], s[1], s[2..].iter().product(), 1])?.global_avg_pool()?;
        self.out.forward(&self.hidden.forward(&pooled)?.relu()?)
    }
}

/// Indices of the `k` largest values; ties resolve to the lower index.
pub fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Masks the channel axis (axis 1) of `x` (`N x C x ...`).
pub fn mask_channels<T: Scalar>(x: &Tensor<T>, cm: &ChannelMask<T>) -> Result<Tensor<T>> {
    let s = x.shape().to_vec();
    if s.len() < 3 || s[1] != cm.hidden.d_in() {
        return Err(Error::Param(format!(
            "channel mask expects N x {} x ..., got {:?}",
            cm.hidden.d_in(),
            s
        )));
    }
    let logits = cm.logits(x)?;
    if !cm.hard {
        return Ok(x.mul_prefix(&logits.sigmoid()?)?);
    }
    let (n, c) = (s[0], s[1]);
    let k = cm.keep_count(c);
    if k > c {
        return Err(Error::Param(format!("cannot keep {k} of {c} channels")));
    }
    let lv = logits.to_f64_vec();
    let mut keep = vec![T::zero(); n * c];
    for i in 0..n {
        for j in top_k(&lv[i * c..(i + 1) * c], k) {
            keep[i * c + j] = T::one();
        }
    }
    Ok(x.mul_prefix(&Tensor::from_vec(&[n, c], keep)?)?)
}

/// Global pool -> fully connected -> softplus, scaled per task by a fixed
/// (non-trainable) output scale.
pub struct PredictHead<T: Scalar> {
    pub fc: Linear<T>,
    pub output_scale: Tensor<T>,
}

impl<T: Scalar> PredictHead<T> {
    pub fn new(b: &mut Builder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        Ok(PredictHead {
            fc: Linear::new(b, &format!("{name}.fc"), channels, NUM_TASKS, true, Init::Lecun)?,
            output_scale: Tensor::full(&[1, NUM_TASKS], T::one()),
        })
    }
}

pub fn predict_head<T: Scalar>(fused: &Tensor<T>, head: &PredictHead<T>) -> Result<Tensor<T>> {
    let pooled = fused.global_avg_pool()?;
    let n = pooled.shape()[0];
    let raw = head.fc.forward(&pooled)?.softplus()?;
    let scale = head.output_scale.to_vec();
    let tiled: Vec<T> = (0..n).flat_map(|_| scale.iter().copied()).collect();
    Ok(raw.mul(&Tensor::from_vec(&[n, NUM_TASKS], tiled)?)?)
}

pub struct Mph<T: Scalar> {
    pub rgb_unify: Unifier<T>,
    pub semantic_unify: Unifier<T>,
    pub attention: CrossAttentionBlock<T>,
    pub gate: GatedFusion<T>,
    pub channel_mask: ChannelMask<T>,
    pub global_gate: GatedFusion<T>,
    pub head: PredictHead<T>,
}

pub struct MphConfig {
    pub width: usize,
    pub grid: usize,
    pub d_attn: usize,
    pub keep_fraction: f64,
}

impl<T: Scalar> Mph<T> {
    pub fn new(b: &mut Builder<'_, T>, name: &str, stage_widths: &[usize], cfg: &MphConfig) -> Result<Self> {
        Ok(Mph {
            rgb_unify: Unifier::new(b, &format!("{name}.unify_rgb"), stage_widths, cfg.width, cfg.grid)?,
            semantic_unify: Unifier::new(b, &format!("{name}.unify_sem"), stage_widths, cfg.width, cfg.grid)?,
            attention: CrossAttentionBlock::new(b, &format!("{name}.attn"), cfg.width, cfg.d_attn)?,
            gate: GatedFusion::new(b, &format!("{name}.gate"), cfg.width)?,
            channel_mask: ChannelMask::new(b, &format!("{name}.mask"), cfg.width, cfg.keep_fraction)?,
            global_gate: GatedFusion::new(b, &format!("{name}.global"), cfg.width)?,
            head: PredictHead::new(b, &format!("{name}.head"), cfg.width)?,
        })
    }

    pub fn forward(&self, rgb_stages: &[Tensor<T>], semantic_stages: &[Tensor<T>]) -> Result<Tensor<T>> {
        let tokens = |maps: Vec<Tensor<T>>| -> Result<Tensor<T>> {
            let t = maps.iter().map(map_to_tokens).collect::<Result<Vec<_>>>()?;
            Ok(Tensor::concat(&t, 1)?)
        };
        let rgb = tokens(unify(rgb_stages, &self.rgb_unify)?)?;
        let semantic = tokens(unify(semantic_stages, &self.semantic_unify)?)?;
        let attended = cross_attend(&rgb, &semantic, &self.attention)?;
        let gated = self.gate.forward(&attended, &semantic)?;
        let masked = mask_channels(&tokens_to_map(&gated)?, &self.channel_mask)?;
        let masked_tokens = map_to_tokens(&masked)?;
        let fused = self.global_gate.forward(&rgb, &masked_tokens)?;
        predict_head(&tokens_to_map(&fused)?, &self.head)
    }
}
