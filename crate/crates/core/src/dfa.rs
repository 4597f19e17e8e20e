//! Training of the defended head.
//!
//! `W3` always receives its exact local gradient. Below the projection the
//! error `e = p - onehot(y)` is either sent through the fixed feedback
//! matrix `B` straight to `a1` (direct feedback alignment), or, for the
//! backprop ablation, through the exact complex chain rule of the simulated
//! matrix. The sign derivative is relaxed to `tanh'` in both cases.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::loss::argmax;
use crate::model::{tanh_prime, AblationFlags, ForwardTrace, HiddenBackward, RopustParams};
use crate::optim::{Adam, AdamConfig};
use crate::opu::OpuHandle;
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Set from the experiment seeds, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    /// Train `b1` and `b3`; when off they stay at zero.
    pub use_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            epochs: 10,
            batch_size: 128,
            seed: 0,
            use_bias: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        Ok(())
    }
}

/// Raw parameter deltas (negative gradients) for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DfaUpdate {
    /// `probs - onehot(labels)`, one row per sample.
    pub e: Array2<f64>,
    pub delta_w3: Array2<f64>,
    pub delta_b3: Array1<f64>,
    pub delta_w1: Array2<f64>,
    pub delta_b1: Array1<f64>,
}

impl DfaUpdate {
    pub fn is_finite(&self) -> bool {
        self.delta_w1
            .iter()
            .chain(self.delta_w3.iter())
            .chain(self.delta_b1.iter())
            .chain(self.delta_b3.iter())
            .all(|v| v.is_finite())
    }
}

pub fn output_error(trace: &ForwardTrace, labels: &[usize]) -> Result<Array2<f64>> {
    check_dim("labels per sample", trace.probs.nrows(), labels.len())?;
    let mut e = trace.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        if y >= e.ncols() {
            return Err(Error::invalid(format!("label {y} out of range")));
        }
        e[[i, y]] -= 1.0;
    }
    Ok(e)
}

/// Mean cross-entropy of a forward trace.
pub fn batch_loss(trace: &ForwardTrace, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = trace.logits.row(i);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() - row[y]
        })
        .sum::<f64>()
        / n
}

fn top_deltas(trace: &ForwardTrace, e: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let n = e.nrows() as f64;
    let delta_w3 = -(e.t().dot(&trace.y_opu)) / n;
    let delta_b3 = -(e.sum_axis(Axis(0))) / n;
    (delta_w3, delta_b3)
}

fn bottom_deltas(trace: &ForwardTrace, g_a1: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let n = g_a1.nrows() as f64;
    (-(g_a1.t().dot(&trace.x)) / n, -(g_a1.sum_axis(Axis(0))) / n)
}

/// DFA deltas for a given output error.
pub fn dfa_deltas_from_error(
    params: &RopustParams,
    trace: &ForwardTrace,
    e: Array2<f64>,
    flags: AblationFlags,
) -> DfaUpdate {
    let (delta_w3, delta_b3) = top_deltas(trace, &e);
    let mut g_a1 = e.dot(&params.feedback.t());
    if flags.binarize {
        g_a1 *= &trace.a1.mapv(tanh_prime);
    }
    let (delta_w1, delta_b1) = bottom_deltas(trace, &g_a1);
    DfaUpdate {
        e,
        delta_w3,
        delta_b3,
        delta_w1,
        delta_b1,
    }
}

pub fn dfa_update(
    params: &RopustParams,
    trace: &ForwardTrace,
    labels: &[usize],
    flags: AblationFlags,
) -> Result<DfaUpdate> {
    let e = output_error(trace, labels)?;
    Ok(dfa_deltas_from_error(params, trace, e, flags))
}

/// Exact backprop deltas through the simulated matrix (sign relaxed to
/// `tanh'` when binarization is on).
pub fn bp_update(
    params: &RopustParams,
    opu: &OpuHandle,
    trace: &ForwardTrace,
    labels: &[usize],
    flags: AblationFlags,
) -> Result<DfaUpdate> {
    let m = opu.lab_matrix("backpropagation through the OPU needs the transmission matrix")?;
    let e = output_error(trace, labels)?;
    let (delta_w3, delta_b3) = top_deltas(trace, &e);
    let g_a1 = params.backward_to_a1(trace, e.view(), flags, HiddenBackward::Exact(m))?;
    let (delta_w1, delta_b1) = bottom_deltas(trace, &g_a1);
    Ok(DfaUpdate {
        e,
        delta_w3,
        delta_b3,
        delta_w1,
        delta_b1,
    })
}

/// Adam state for the four trainable tensors of a head.
#[derive(Debug, Clone)]
pub struct HeadOptimizer {
    adam: Adam,
    use_bias: bool,
}

impl HeadOptimizer {
    pub fn new(params: &RopustParams, cfg: &TrainConfig) -> Self {
        let sizes = [
            params.w1.len(),
            params.b1.len(),
            params.w3.len(),
            params.b3.len(),
        ];
        Self {
            adam: Adam::new(cfg.optimizer, &sizes),
            use_bias: cfg.use_bias,
        }
    }

    pub fn apply(&mut self, params: &mut RopustParams, update: &DfaUpdate) {
        let g_w1 = update.delta_w1.mapv(|v| -v);
        let g_w3 = update.delta_w3.mapv(|v| -v);
        let (g_b1, g_b3) = if self.use_bias {
            (update.delta_b1.mapv(|v| -v), update.delta_b3.mapv(|v| -v))
        } else {
            (
                Array1::zeros(params.b1.len()),
                Array1::zeros(params.b3.len()),
            )
        };
        let w1 = params.w1.as_slice_mut().expect("standard layout");
        let b1 = params.b1.as_slice_mut().expect("standard layout");
        let w3 = params.w3.as_slice_mut().expect("standard layout");
        let b3 = params.b3.as_slice_mut().expect("standard layout");
        self.adam.step(
            &mut [w1, b1, w3, b3],
            &[
                g_w1.as_slice().unwrap(),
                g_b1.as_slice().unwrap(),
                g_w3.as_slice().unwrap(),
                g_b3.as_slice().unwrap(),
            ],
        );
    }
}

/// Outcome of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub correct: usize,
}

fn finish_step(
    params: &mut RopustParams,
    opt: &mut HeadOptimizer,
    trace: &ForwardTrace,
    labels: &[usize],
    update: DfaUpdate,
) -> Result<StepStats> {
    let loss = batch_loss(trace, labels);
    if !loss.is_finite() || !update.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: 0,
            step: opt.adam.steps() as usize,
            detail: format!("batch loss {loss}, finite update: {}", update.is_finite()),
        });
    }
    opt.apply(params, &update);
    if !params.is_finite() {
        return Err(Error::TrainingDiverged {
            epoch: 0,
            step: opt.adam.steps() as usize,
            detail: "non-finite parameters after update".into(),
        });
    }
    let correct = trace
        .logits
        .axis_iter(Axis(0))
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    Ok(StepStats { loss, correct })
}

/// One DFA step on a batch (`x` holds frozen features, one row per sample).
pub fn dfa_step(
    params: &mut RopustParams,
    opt: &mut HeadOptimizer,
    opu: &OpuHandle,
    x: ArrayView2<f64>,
    labels: &[usize],
    flags: AblationFlags,
) -> Result<StepStats> {
    if !flags.train_with_dfa {
        return Err(Error::invalid("dfa_step called with train_with_dfa=false"));
    }
    let trace = params.forward(opu, x, flags)?;
    let update = dfa_update(params, &trace, labels, flags)?;
    finish_step(params, opt, &trace, labels, update)
}

/// One exact backprop step; only for the de-obfuscated, non-binarized head.
pub fn bp_step(
    params: &mut RopustParams,
    opt: &mut HeadOptimizer,
    opu: &OpuHandle,
    x: ArrayView2<f64>,
    labels: &[usize],
    flags: AblationFlags,
) -> Result<StepStats> {
    if flags.obfuscated {
        return Err(Error::CapabilityDisabled(
            "backprop training needs obfuscated=false",
        ));
    }
    if flags.train_with_dfa || flags.binarize {
        return Err(Error::invalid(
            "bp_step requires train_with_dfa=false and binarize=false",
        ));
    }
    let trace = params.forward(opu, x, flags)?;
    let update = bp_update(params, opu, &trace, labels, flags)?;
    finish_step(params, opt, &trace, labels, update)
}

/// Seeded minibatch order for one epoch.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, epoch as u64));
    idx.chunks(batch_size).map(|c| c.to_vec()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
}

/// Full training loop; the step rule follows `flags.train_with_dfa`.
pub fn train(
    params: &mut RopustParams,
    opu: &OpuHandle,
    x: ArrayView2<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
    flags: AblationFlags,
) -> Result<Vec<EpochMetrics>> {
    train_with(params, opu, x, labels, cfg, flags, |_| {})
}

/// [`train`] with a per-epoch callback.
pub fn train_with(
    params: &mut RopustParams,
    opu: &OpuHandle,
    x: ArrayView2<f64>,
    labels: &[usize],
    cfg: &TrainConfig,
    flags: AblationFlags,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    flags.validate()?;
    if x.nrows() == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    check_dim("labels per sample", x.nrows(), labels.len())?;
    let mut opt = HeadOptimizer::new(params, cfg);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in epoch_batches(x.nrows(), cfg.batch_size, cfg.seed, epoch) {
            let xb = x.select(Axis(0), &batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let stats = if flags.train_with_dfa {
                dfa_step(params, &mut opt, opu, xb.view(), &yb, flags)
            } else {
                bp_step(params, &mut opt, opu, xb.view(), &yb, flags)
            }
            .map_err(|e| match e {
                Error::TrainingDiverged { step, detail, .. } => Error::TrainingDiverged {
                    epoch,
                    step,
                    detail,
                },
                other => other,
            })?;
            loss_sum += stats.loss * yb.len() as f64;
            correct += stats.correct;
        }
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / x.nrows() as f64,
            accuracy: correct as f64 / x.nrows() as f64,
        };
        log::info!(
            "event=train_epoch model=ropust epoch={} loss={:.6} accuracy={:.4}",
            m.epoch,
            m.loss,
            m.accuracy
        );
        on_epoch(&m);
        curve.push(m);
    }
    Ok(curve)
}
