//! Experiment configuration: a TOML file with one table per concern.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::DepthConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::SynthConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Corpus directory (written by gen-data, read by training).
    pub data: PathBuf,
    /// Where training writes its checkpoint.
    pub checkpoint: PathBuf,
    /// Optional JSON-lines training log.
    pub log: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { data: "data".into(), checkpoint: "model.ckpt".into(), log: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Weight of the alignment term.
    pub lambda: f64,
    /// Alignment temperature.
    pub tau: f64,
    /// Task-weight smoothing factor.
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { lambda: 0.1, tau: 0.07, alpha: 0.3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the cosine schedule.
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Share of the training split held out for model selection.
    pub val_fraction: f64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub eval_batch_size: usize,
    /// Draw a random flip/rotation of each training image every step.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 1e-5,
            seed: 0,
            val_fraction: 0.1,
            checkpoint_every: 0,
            eval_batch_size: 32,
            augment: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Ablation preset applied over the model toggles: baseline, fafm, fafm_ssra or full.
    pub preset: Option<String>,
    pub paths: Paths,
    pub data: SynthConfig,
    pub depth: DepthConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.finalize()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the preset and checks every section.
    pub fn finalize(mut self) -> Result<Self> {
        if let Some(p) = self.preset.clone() {
            self.model.apply_preset(&p)?;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.depth.validate()?;
        self.model.validate()?;
        let l = &self.loss;
        if !(l.lambda >= 0.0 && l.lambda.is_finite()) || !(l.tau > 0.0) || !(l.alpha > 0.0 && l.alpha <= 1.0) {
            return Err(Error::Config("loss.lambda >= 0, loss.tau > 0 and loss.alpha in (0, 1] are required".into()));
        }
        let t = &self.train;
        if t.batch_size == 0 || t.eval_batch_size == 0 {
            return Err(Error::Config("train.batch_size and train.eval_batch_size must be positive".into()));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) || !(t.weight_decay >= 0.0) {
            return Err(Error::Config("train.lr must be positive and train.weight_decay nonnegative".into()));
        }
        if !(0.0..1.0).contains(&t.val_fraction) {
            return Err(Error::Config("train.val_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Overrides one dotted key, e.g. `set("train.epochs", "3")`. The value
    /// is read as a TOML literal, falling back to a bare string.
    pub fn set(&self, key: &str, value: &str) -> Result<Self> {
        self.set_unchecked(key, value)?.finalize()
    }

    /// Like [`Config::set`] but skips cross-field validation, so several
    /// interdependent keys can be changed before checking.
    fn set_unchecked(&self, key: &str, value: &str) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        let parsed = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let parts: Vec<&str> = key.split('.').collect();
        let (last, path) = parts.split_last().filter(|(l, _)| !l.is_empty()).ok_or_else(|| Error::Config("empty key".into()))?;
        let mut node = &mut root;
        for p in path {
            node = node
                .get_mut(*p)
                .filter(|v| v.is_table())
                .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
        }
        let table = node.as_table_mut().expect("walked through tables");
        if !table.contains_key(*last) && !(path.is_empty() && *last == "preset") && !optional_key(key) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
        table.insert(last.to_string(), parsed);
        root.try_into().map_err(|e: toml::de::Error| Error::Config(format!("{key}: {}", e.message())))
    }

    /// Applies `key=value` overrides in order, then validates once.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        overrides
            .iter()
            .try_fold(self.clone(), |cfg, kv| {
                let (k, v) = kv
                    .as_ref()
                    .split_once('=')
                    .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", kv.as_ref())))?;
                cfg.set_unchecked(k.trim(), v.trim())
            })?
            .finalize()
    }

    pub fn fingerprint(&self) -> String {
        hash_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }
}

/// Optional fields are absent from the serialized table until set.
fn optional_key(key: &str) -> bool {
    key == "paths.log"
}

pub fn hash_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{:02x}", b)).collect()
}
