//! Classification losses over logits and their logit gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Smallest denominator allowed in the logit-ratio losses.
pub const DLR_DENOM_FLOOR: f64 = 1e-12;

/// Per-sample attack/training objective, expressed on logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Loss {
    CrossEntropy,
    /// Untargeted difference of logits ratio.
    Dlr,
    /// Targeted difference of logits ratio towards `target`.
    TargetedDlr {
        target: usize,
    },
}

impl Loss {
    pub fn min_classes(&self) -> usize {
        match self {
            Loss::CrossEntropy => 2,
            Loss::Dlr => 3,
            Loss::TargetedDlr { .. } => 4,
        }
    }
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(row: ArrayView1<f64>) -> Array1<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = row.mapv(|v| (v - max).exp());
    let sum = out.sum();
    out /= sum;
    out
}

pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let s = softmax(row.view());
        row.assign(&s);
    }
    out
}

fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// `z_y - max_{i != y} z_i`; negative iff the sample is misclassified
/// (ties count as correct only when `y` is the smallest tied index).
pub fn margin(row: ArrayView1<f64>, label: usize) -> f64 {
    let other = row
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != label)
        .fold(f64::NEG_INFINITY, |m, (_, &v)| m.max(v));
    row[label] - other
}

/// Class indices sorted by descending logit (stable for ties).
fn descending_order(row: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    idx
}

fn max_other(row: ArrayView1<f64>, label: usize) -> usize {
    let mut best: Option<usize> = None;
    for i in 0..row.len() {
        if i == label {
            continue;
        }
        match best {
            Some(b) if row[i] <= row[b] => {}
            _ => best = Some(i),
        }
    }
    best.expect("at least two classes")
}

/// Loss value and gradient with respect to the logits for one sample.
pub fn loss_and_grad(row: ArrayView1<f64>, label: usize, loss: Loss) -> Result<(f64, Array1<f64>)> {
    let k = row.len();
    if label >= k {
        return Err(Error::invalid(format!(
            "label {label} out of range for {k} classes"
        )));
    }
    if k < loss.min_classes() {
        return Err(Error::invalid(format!(
            "{loss:?} needs at least {} classes, model has {k}; use cross-entropy instead",
            loss.min_classes()
        )));
    }
    match loss {
        Loss::CrossEntropy => {
            let value = log_sum_exp(row) - row[label];
            let mut grad = softmax(row);
            grad[label] -= 1.0;
            Ok((value, grad))
        }
        Loss::Dlr => {
            let order = descending_order(row);
            let m = max_other(row, label);
            let num = row[m] - row[label];
            let raw = row[order[0]] - row[order[2]];
            let mut grad = Array1::zeros(k);
            let denom = if raw < DLR_DENOM_FLOOR {
                DLR_DENOM_FLOOR
            } else {
                grad[order[0]] -= num / (raw * raw);
                grad[order[2]] += num / (raw * raw);
                raw
            };
            grad[m] += 1.0 / denom;
            grad[label] -= 1.0 / denom;
            Ok((num / denom, grad))
        }
        Loss::TargetedDlr { target } => {
            if target >= k || target == label {
                return Err(Error::invalid(format!(
                    "target {target} must be a class other than the label {label}"
                )));
            }
            let order = descending_order(row);
            let num = row[target] - row[label];
            let raw = row[order[0]] - 0.5 * (row[order[2]] + row[order[3]]);
            let mut grad = Array1::zeros(k);
            let denom = if raw < DLR_DENOM_FLOOR {
                DLR_DENOM_FLOOR
            } else {
                let c = num / (raw * raw);
                grad[order[0]] -= c;
                grad[order[2]] += 0.5 * c;
                grad[order[3]] += 0.5 * c;
                raw
            };
            grad[target] += 1.0 / denom;
            grad[label] -= 1.0 / denom;
            Ok((num / denom, grad))
        }
    }
}

/// Row-wise [`loss_and_grad`].
pub fn batch_loss_and_grad(
    logits: ArrayView2<f64>,
    labels: &[usize],
    losses: &[Loss],
) -> Result<(Array1<f64>, Array2<f64>)> {
    check_dim("labels per logit row", logits.nrows(), labels.len())?;
    check_dim("losses per logit row", logits.nrows(), losses.len())?;
    let mut values = Array1::zeros(logits.nrows());
    let mut grads = Array2::zeros(logits.raw_dim());
    for (i, row) in logits.axis_iter(Axis(0)).enumerate() {
        let (v, g) = loss_and_grad(row, labels[i], losses[i])?;
        values[i] = v;
        grads.row_mut(i).assign(&g);
    }
    Ok((values, grads))
}
