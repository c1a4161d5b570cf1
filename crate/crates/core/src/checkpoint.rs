//! Single-file checkpoints: a JSON header followed by tensor blobs.
//!
//! Layout: `NFCK`, u32 version, u64 header length, header JSON, then one
//! tensor record per parameter in header order, then (if present) the first
//! and second Adam moments in the same order.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nutrifuse_tensor::{io as tensor_io, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::losses::TaskWeights;
use crate::model::NutritionModel;
use crate::nutrition::NUM_TASKS;
use crate::optim::Adam;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NFCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    epoch: usize,
    config: Config,
    config_fingerprint: String,
    arch_fingerprint: String,
    task_weights: TaskWeights,
    output_scale: [f64; NUM_TASKS],
    adam_step: Option<u64>,
    names: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub epoch: usize,
    pub config: Config,
    pub config_fingerprint: String,
    pub arch_fingerprint: String,
    pub task_weights: TaskWeights,
    pub output_scale: [f64; NUM_TASKS],
    pub params: Vec<(String, Tensor<T>)>,
    pub adam: Option<AdamState<T>>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn capture(
        model: &NutritionModel<T>,
        config: &Config,
        epoch: usize,
        task_weights: &TaskWeights,
        adam: Option<&Adam<T>>,
    ) -> Self {
        Checkpoint {
            epoch,
            config: config.clone(),
            config_fingerprint: config.fingerprint(),
            arch_fingerprint: model.params.fingerprint(),
            task_weights: task_weights.clone(),
            output_scale: model.output_scale(),
            params: model.params.iter().map(|(n, t)| (n.to_string(), t.detach())).collect(),
            adam: adam.map(|a| AdamState { step: a.step, m: a.m.clone(), v: a.v.clone() }),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            format_version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            config: self.config.clone(),
            config_fingerprint: self.config_fingerprint.clone(),
            arch_fingerprint: self.arch_fingerprint.clone(),
            task_weights: self.task_weights.clone(),
            output_scale: self.output_scale,
            adam_step: self.adam.as_ref().map(|a| a.step),
            names: self.params.iter().map(|(n, _)| n.clone()).collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.params {
            out.extend(tensor_io::encode(t));
        }
        if let Some(a) = &self.adam {
            for moments in [&a.m, &a.v] {
                for ((_, p), m) in self.params.iter().zip(moments) {
                    out.extend(tensor_io::encode(&Tensor::from_vec(p.shape(), m.clone())?));
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |d: &str| Error::data("checkpoint", d);
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported checkpoint version {version}")));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let json = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::data("checkpoint header", e))?;
        let mut rest = &bytes[16 + len..];
        let mut next = || -> Result<Tensor<T>> {
            let (t, _, r) = tensor_io::decode::<T>(rest).map_err(|e| Error::data("checkpoint tensor", e))?;
            rest = r;
            Ok(t)
        };
        let mut params = Vec::with_capacity(header.names.len());
        for name in &header.names {
            params.push((name.clone(), next()?));
        }
        let adam = match header.adam_step {
            None => None,
            Some(step) => {
                let mut read_all = || -> Result<Vec<Vec<T>>> { (0..params.len()).map(|_| Ok(next()?.to_vec())).collect() };
                let m = read_all()?;
                let v = read_all()?;
                Some(AdamState { step, m, v })
            }
        };
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            epoch: header.epoch,
            config: header.config,
            config_fingerprint: header.config_fingerprint,
            arch_fingerprint: header.arch_fingerprint,
            task_weights: header.task_weights,
            output_scale: header.output_scale,
            params,
            adam,
        })
    }

    /// Writes through a temporary file so a crash never leaves a partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()?).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::data(path.display().to_string(), e))
    }

    /// Rebuilds the model described by the stored config and loads its values.
    pub fn to_model(&self) -> Result<NutritionModel<T>> {
        let model = NutritionModel::new(&self.config.model, self.config.train.seed)?;
        self.load_into(&model)?;
        Ok(model)
    }

    /// Copies parameters and output scale into `model`; the architectures must match.
    pub fn load_into(&self, model: &NutritionModel<T>) -> Result<()> {
        model.params.load_named(&self.params)?;
        model.set_output_scale(self.output_scale)
    }

    pub fn restore_adam(&self, model: &NutritionModel<T>, lr: f64, weight_decay: f64) -> Adam<T> {
        let mut adam = Adam::new(&model.params.tensors(), lr, weight_decay);
        if let Some(a) = &self.adam {
            adam.step = a.step;
            adam.m = a.m.clone();
            adam.v = a.v.clone();
        }
        adam
    }
}
