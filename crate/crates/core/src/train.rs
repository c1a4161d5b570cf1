//! Training loop, evaluation, ablation and fine-tuning.

use std::io::Write;
use std::path::Path;

use nutrifuse_tensor::{no_grad, Scalar, Tensor, TensorError};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::dataset::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::fusion::alignment_loss;
use crate::losses::{kpi, nutri_loss, total_loss, ComparisonReport, PmaeReport, TaskWeights};
use crate::model::{NutritionModel, ABLATION_ROWS};
use crate::nutrition::{NutritionVector, NUM_TASKS};
use crate::optim::{cosine_lr, Adam};
use crate::synth::Split;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total objective over the epoch's batches.
    pub loss: f64,
    pub alignment: Option<f64>,
    /// Running PMAE per task (fraction) on the training batches.
    pub train_pmae: [f64; NUM_TASKS],
    pub val_mean_pmae: Option<f64>,
    /// Task weights after this epoch's update.
    pub weights: [f64; NUM_TASKS],
}

pub struct TrainOutcome<T: Scalar> {
    pub model: NutritionModel<T>,
    pub task_weights: TaskWeights,
    pub adam: Adam<T>,
    pub log: Vec<EpochLog>,
    /// Epoch (1-based) whose parameters were kept; 0 means the initial ones.
    pub best_epoch: usize,
}

impl<T: Scalar> TrainOutcome<T> {
    pub fn checkpoint(&self, cfg: &Config) -> Checkpoint<T> {
        Checkpoint::capture(&self.model, cfg, self.log.len(), &self.task_weights, Some(&self.adam))
    }
}

#[derive(Default)]
pub struct TrainOptions<'a, T: Scalar> {
    /// Start from these parameters and output scale instead of a fresh model.
    pub init: Option<&'a Checkpoint<T>>,
    /// Written every `train.checkpoint_every` epochs and on numeric failure.
    pub checkpoint_path: Option<&'a Path>,
    pub on_epoch: Option<&'a dyn Fn(&EpochLog)>,
}

fn numeric(context: String, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::NonFinite { .. }) | Error::Tensor(TensorError::NumericIntegrity { .. }) | Error::Numeric(_) => {
            Error::Numeric(format!("{context}: {e}"))
        }
        other => other,
    }
}

/// Scalar objective for one batch plus the alignment term's value.
pub fn batch_objective<T: Scalar>(
    model: &NutritionModel<T>,
    batch: &Batch<T>,
    tw: &TaskWeights,
    cfg: &Config,
) -> Result<(Tensor<T>, Tensor<T>, Option<f64>)> {
    let out = model.forward(&batch.rgb, Some(&batch.d_mono))?;
    let nutri = nutri_loss(&out.prediction, &batch.targets, tw)?;
    let align = out.alignment.map(|(r, d)| alignment_loss(&r, &d, cfg.loss.tau)).transpose()?;
    let mut total = total_loss(&nutri, align.as_ref(), cfg.loss.lambda)?;
    if let (Some(adapted), true) = (&out.adapted_depth, cfg.depth.aux_weight > 0.0) {
        let aux = adapted.sub(&batch.d_gt)?.square()?.mean()?;
        total = total.add(&aux.scale(T::from_f64_lossy(cfg.depth.aux_weight))?)?;
    }
    Ok((total, out.prediction, align.map(|a| a.item().to_f64().unwrap())))
}

fn check_architecture<T: Scalar>(model: &NutritionModel<T>, ckpt: &Checkpoint<T>) -> Result<()> {
    if model.params.fingerprint() != ckpt.arch_fingerprint {
        // load_named lists every differing name and shape
        model.params.load_named(&ckpt.params)?;
        return Err(Error::Incompatible("architecture fingerprints differ".into()));
    }
    Ok(())
}

pub fn train<T: Scalar>(cfg: &Config, data: &Dataset, opts: TrainOptions<'_, T>) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if data.size != cfg.model.input_size {
        return Err(Error::Config(format!("dataset is {} px but model.input_size is {}", data.size, cfg.model.input_size)));
    }
    let tc = &cfg.train;
    let model = NutritionModel::<T>::new(&cfg.model, tc.seed)?;
    match opts.init {
        Some(ckpt) => {
            check_architecture(&model, ckpt)?;
            ckpt.load_into(&model)?;
        }
        None => model.set_output_scale(data.target_means())?,
    }
    let (fit, val) = data.hold_out(tc.val_fraction, tc.seed ^ 0x7a1);
    let params = model.params.tensors();
    let mut tw = TaskWeights::new(cfg.loss.alpha)?;
    let mut adam = Adam::new(&params, tc.lr, tc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xa06);
    let mut order: Vec<usize> = (0..fit.len()).collect();
    let mut best = match &val {
        Some(v) => Some((evaluate(&model, v, tc.eval_batch_size)?.0.mean, model.params.snapshot(), 0)),
        None => None,
    };
    let mut log = Vec::with_capacity(tc.epochs);

    for epoch in 0..tc.epochs {
        adam.lr = cosine_lr(tc.lr, epoch, tc.epochs);
        order.shuffle(&mut rng);
        let (mut abs_err, mut tgt_sum) = ([0.0; NUM_TASKS], [0.0; NUM_TASKS]);
        let (mut loss_sum, mut align_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let result = (|| -> Result<(f64, Option<f64>, Vec<f64>, Vec<f64>)> {
                let symmetries: Option<Vec<u8>> = tc.augment.then(|| chunk.iter().map(|_| aug_rng.gen_range(0..8)).collect());
                let batch = fit.batch_transformed::<T>(chunk, symmetries.as_deref())?;
                model.params.zero_grad();
                let (total, pred, align) = batch_objective(&model, &batch, &tw, cfg)?;
                let value = total.item().to_f64().unwrap();
                if !value.is_finite() {
                    return Err(Error::Numeric("non-finite loss".into()));
                }
                total.backward()?;
                adam.step(&params)?;
                Ok((value, align, pred.to_f64_vec(), batch.targets.to_f64_vec()))
            })();
            let (value, align, pred, targets) = match result {
                Ok(r) => r,
                Err(e) => {
                    let e = numeric(format!("epoch {} batch {}", epoch + 1, b), e);
                    if let (Error::Numeric(_), Some(path)) = (&e, opts.checkpoint_path) {
                        // parameters are untouched by a failed step, so they are the last good ones
                        Checkpoint::capture(&model, cfg, epoch, &tw, Some(&adam)).save(path)?;
                        return Err(Error::Numeric(format!("{e}; last good state saved to {}", path.display())));
                    }
                    return Err(e);
                }
            };
            loss_sum += value;
            align_sum += align.unwrap_or(0.0);
            batches += 1;
            for (i, (p, t)) in pred.iter().zip(&targets).enumerate() {
                abs_err[i % NUM_TASKS] += (p - t).abs();
                tgt_sum[i % NUM_TASKS] += t;
            }
        }
        let train_pmae: [f64; NUM_TASKS] = std::array::from_fn(|j| abs_err[j] / tgt_sum[j].max(f64::MIN_POSITIVE));
        tw.update(train_pmae.map(kpi))?;
        let val_mean_pmae = match &val {
            Some(v) => Some(evaluate(&model, v, tc.eval_batch_size)?.0.mean),
            None => None,
        };
        if let (Some(m), Some((best_m, snap, best_e))) = (val_mean_pmae, best.as_mut()) {
            if m < *best_m {
                *best_m = m;
                *snap = model.params.snapshot();
                *best_e = epoch + 1;
            }
        }
        let entry = EpochLog {
            epoch: epoch + 1,
            lr: adam.lr,
            loss: loss_sum / batches.max(1) as f64,
            alignment: cfg.model.fafm.then_some(align_sum / batches.max(1) as f64),
            train_pmae,
            val_mean_pmae,
            weights: tw.w,
        };
        if let Some(f) = opts.on_epoch {
            f(&entry);
        }
        log.push(entry);
        if let (Some(path), k) = (opts.checkpoint_path, tc.checkpoint_every) {
            if k > 0 && (epoch + 1) % k == 0 {
                Checkpoint::capture(&model, cfg, epoch + 1, &tw, Some(&adam)).save(path)?;
            }
        }
    }
    let best_epoch = match best {
        Some((_, snap, e)) => {
            model.params.restore(&snap)?;
            e
        }
        None => tc.epochs,
    };
    Ok(TrainOutcome { model, task_weights: tw, adam, log, best_epoch })
}

/// Predictions for `rgb` (`N x 3 x S x S`) and optional provider depth.
pub fn predict_batch<T: Scalar>(model: &NutritionModel<T>, rgb: &Tensor<T>, d_mono: Option<&Tensor<T>>) -> Result<Vec<NutritionVector>> {
    let p = no_grad(|| model.forward(rgb, d_mono))?.prediction.to_f64_vec();
    Ok(p.chunks(NUM_TASKS).map(|c| NutritionVector::from_array(std::array::from_fn(|i| c[i]))).collect())
}

/// Dataset-level PMAE report plus the predictions in dataset order.
pub fn evaluate<T: Scalar>(model: &NutritionModel<T>, data: &Dataset, batch_size: usize) -> Result<(PmaeReport, Vec<NutritionVector>)> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut preds = Vec::with_capacity(data.len());
    for chunk in idx.chunks(batch_size.max(1)) {
        let b = data.batch::<T>(chunk)?;
        preds.extend(predict_batch(model, &b.rgb, Some(&b.d_mono))?);
    }
    Ok((PmaeReport::from_predictions(&data.targets(), &preds)?, preds))
}

/// Trains and tests the four cumulative module configurations under one seed.
pub fn ablate<T: Scalar>(cfg: &Config, train_set: &Dataset, test_set: &Dataset) -> Result<ComparisonReport> {
    let mut rows = Vec::new();
    for (label, toggles) in ABLATION_ROWS {
        let mut c = cfg.clone();
        c.preset = None;
        c.model = c.model.with_toggles(toggles);
        let out = train::<T>(&c, train_set, TrainOptions::default())?;
        rows.push((label.to_string(), evaluate(&out.model, test_set, c.train.eval_batch_size)?.0));
    }
    Ok(ComparisonReport { rows })
}

/// Continues from `ckpt` on a new dataset with fresh optimizer state and task
/// weights; the output scale is kept from the checkpoint.
pub fn finetune<T: Scalar>(ckpt: &Checkpoint<T>, cfg: &Config, data: &Dataset, checkpoint_path: Option<&Path>) -> Result<TrainOutcome<T>> {
    train(cfg, data, TrainOptions { init: Some(ckpt), checkpoint_path, on_epoch: None })
}

/// Loads one split of the corpus named by the config at model resolution.
pub fn load_split(cfg: &Config, split: Split) -> Result<Dataset> {
    Dataset::load(&cfg.paths.data, Some(split), cfg.model.input_size, &cfg.depth)
}

/// Appends one JSON line per epoch.
pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for entry in log {
        writeln!(f, "{}", serde_json::to_string(entry).expect("log serializes")).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
