//! PMAE metric, difficulty-driven task weights and the training objective.

use std::fmt;

use nutrifuse_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nutrition::{NutritionVector, NUM_TASKS, TASK_NAMES};

/// Smallest target mean accepted as a PMAE denominator.
pub const DENOMINATOR_EPS: f64 = 1e-8;

/// KPI clamps PMAE to `1 - KPI_EPS` so the weight stays finite.
pub const KPI_EPS: f64 = 1e-3;

/// Mean absolute error divided by the mean target, as a fraction.
pub fn pmae(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.is_empty() || y_true.len() != y_pred.len() {
        return Err(Error::Param(format!(
            "pmae needs equal nonempty inputs, got {} and {}",
            y_true.len(),
            y_pred.len()
        )));
    }
    let n = y_true.len() as f64;
    let mean = y_true.iter().sum::<f64>() / n;
    if mean <= DENOMINATOR_EPS {
        return Err(Error::DegenerateTarget(format!("target mean {mean:e} is too close to zero")));
    }
    let mae = y_true.iter().zip(y_pred).map(|(t, p)| (t - p).abs()).sum::<f64>() / n;
    Ok(mae / mean)
}

/// `1 / (1 - pmae)` with PMAE clamped to `[0, 1 - KPI_EPS]`.
pub fn kpi(pmae_val: f64) -> f64 {
    1.0 / (1.0 - pmae_val.clamp(0.0, 1.0 - KPI_EPS))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskWeights {
    pub w: [f64; NUM_TASKS],
    pub alpha: f64,
    pub t: u64,
}

impl TaskWeights {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::Param(format!("smoothing alpha must lie in (0, 1], got {alpha}")));
        }
        Ok(TaskWeights { w: [1.0; NUM_TASKS], alpha, t: 0 })
    }

    /// Exponential smoothing toward the KPIs, then rescaling so the weights
    /// sum to the task count.
    pub fn update(&mut self, kpis: [f64; NUM_TASKS]) -> Result<()> {
        if kpis.iter().any(|k| !(k.is_finite() && *k > 0.0)) {
            return Err(Error::Param(format!("KPIs must be positive, got {kpis:?}")));
        }
        let raw: [f64; NUM_TASKS] = std::array::from_fn(|i| self.alpha * kpis[i] + (1.0 - self.alpha) * self.w[i]);
        self.w = renormalized(raw);
        self.t += 1;
        Ok(())
    }
}

/// Scales `w` so it sums to `NUM_TASKS`.
pub fn renormalized(w: [f64; NUM_TASKS]) -> [f64; NUM_TASKS] {
    let s: f64 = w.iter().sum();
    w.map(|v| v * NUM_TASKS as f64 / s)
}

/// Per-task batch target means; errors if any is too close to zero.
pub fn batch_target_means(targets: &[f64], n: usize) -> Result<[f64; NUM_TASKS]> {
    let means: [f64; NUM_TASKS] =
        std::array::from_fn(|j| (0..n).map(|i| targets[i * NUM_TASKS + j]).sum::<f64>() / n as f64);
    if let Some(j) = means.iter().position(|m| *m <= DENOMINATOR_EPS) {
        return Err(Error::DegenerateTarget(format!(
            "batch mean of {} is {:e}; resample the batch or floor the denominator",
            TASK_NAMES[j], means[j]
        )));
    }
    Ok(means)
}

/// `sum_i w_i * mean_b |p_bi - t_bi| / mean_b t_bi` over an `N x 5` batch; the
/// denominators are constants.
pub fn nutri_loss<T: Scalar>(preds: &Tensor<T>, targets: &Tensor<T>, tw: &TaskWeights) -> Result<Tensor<T>> {
    if preds.rank() != 2 || preds.shape()[1] != NUM_TASKS || preds.shape() != targets.shape() || preds.shape()[0] == 0 {
        return Err(Error::Param(format!(
            "predictions {:?} and targets {:?} must both be N x {NUM_TASKS}",
            preds.shape(),
            targets.shape()
        )));
    }
    let n = preds.shape()[0];
    let means = batch_target_means(&targets.to_f64_vec(), n)?;
    let coef: Vec<T> = (0..n)
        .flat_map(|_| (0..NUM_TASKS).map(|j| T::from_f64_lossy(tw.w[j] / (n as f64 * means[j]))))
        .collect();
    let coef = Tensor::from_vec(&[n, NUM_TASKS], coef)?;
    Ok(preds.sub(&targets.detach())?.abs()?.mul(&coef)?.sum()?)
}

/// `nutri + lambda * align`.
pub fn total_loss<T: Scalar>(nutri: &Tensor<T>, align: Option<&Tensor<T>>, lambda: f64) -> Result<Tensor<T>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Param(format!("lambda must be nonnegative, got {lambda}")));
    }
    match align {
        Some(a) => Ok(nutri.add(&a.scale(T::from_f64_lossy(lambda))?)?),
        None => Ok(nutri.clone()),
    }
}

/// Dataset-level PMAE per task, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PmaeReport {
    pub per_task: [f64; NUM_TASKS],
    pub mean: f64,
    pub count: usize,
}

impl PmaeReport {
    pub fn from_predictions(y_true: &[NutritionVector], y_pred: &[NutritionVector]) -> Result<Self> {
        if y_true.len() != y_pred.len() || y_true.is_empty() {
            return Err(Error::Param(format!(
                "report needs matching nonempty sets, got {} targets and {} predictions",
                y_true.len(),
                y_pred.len()
            )));
        }
        let column = |v: &[NutritionVector], j: usize| v.iter().map(|x| x.to_array()[j]).collect::<Vec<_>>();
        let mut per_task = [0.0; NUM_TASKS];
        for (j, slot) in per_task.iter_mut().enumerate() {
            *slot = 100.0
                * pmae(&column(y_true, j), &column(y_pred, j)).map_err(|e| match e {
                    Error::DegenerateTarget(m) => Error::DegenerateTarget(format!("{}: {m}", TASK_NAMES[j])),
                    other => other,
                })?;
        }
        Ok(Self::from_per_task(per_task, y_true.len()))
    }

    pub fn from_per_task(per_task: [f64; NUM_TASKS], count: usize) -> Self {
        PmaeReport { per_task, mean: per_task.iter().sum::<f64>() / NUM_TASKS as f64, count }
    }

    /// PMAE of predicting the split mean for every sample: the mean absolute
    /// deviation over the mean, per task.
    pub fn mean_predictor(y_true: &[NutritionVector]) -> Result<Self> {
        if y_true.is_empty() {
            return Err(Error::Param("mean predictor needs at least one target".into()));
        }
        let n = y_true.len() as f64;
        let mut per_task = [0.0; NUM_TASKS];
        for (j, slot) in per_task.iter_mut().enumerate() {
            let col: Vec<f64> = y_true.iter().map(|x| x.to_array()[j]).collect();
            let mean = col.iter().sum::<f64>() / n;
            if mean <= DENOMINATOR_EPS {
                return Err(Error::DegenerateTarget(format!("{} mean is {mean:e}", TASK_NAMES[j])));
            }
            *slot = 100.0 * col.iter().map(|v| (v - mean).abs()).sum::<f64>() / n / mean;
        }
        Ok(Self::from_per_task(per_task, y_true.len()))
    }

    pub fn table_header() -> String {
        let mut s = format!("{:<10}", "");
        for name in TASK_NAMES.iter().chain(std::iter::once(&"Mean")) {
            s.push_str(&format!("{:>10}", name));
        }
        s
    }

    pub fn table_row(&self, label: &str) -> String {
        let mut s = format!("{:<10}", label);
        for v in self.per_task.iter().chain(std::iter::once(&self.mean)) {
            s.push_str(&format!("{:>10.2}", v));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::data("PMAE record", e))
    }
}

impl fmt::Display for PmaeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::table_header())?;
        write!(f, "{}", self.table_row("PMAE (%)"))
    }
}

/// Several labelled reports in a fixed row order, e.g. an ablation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<(String, PmaeReport)>,
}

impl ComparisonReport {
    pub fn table(&self) -> String {
        let mut lines = vec![PmaeReport::table_header()];
        lines.extend(self.rows.iter().map(|(name, r)| r.table_row(name)));
        lines.join("\n")
    }

    /// One JSON object per row: `{"row": name, "report": {...}}`.
    pub fn to_records(&self) -> String {
        self.rows
            .iter()
            .map(|(name, r)| serde_json::json!({ "row": name, "report": r }).to_string())
            .collect::<Vec<_>>()
            .join("\n")
    }

    pub fn from_records(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            row: String,
            report: PmaeReport,
        }
        let rows = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str::<Row>(l).map(|r| (r.row, r.report)))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::data("comparison records", e))?;
        Ok(ComparisonReport { rows })
    }
}
