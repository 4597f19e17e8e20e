//! l-infinity evasion attacks and the sequential evaluation cascade.
//!
//! Gradient attacks talk to a [`Differentiable`] model (exact gradients for
//! plain networks, relaxed ones for the defended head). The Square attack
//! only accepts a [`Classifier`], which has no gradient method.
//!
//! Every attack keys its randomness on `(seed, sample id)`, so a sample's
//! result does not depend on which other samples share its batch.

mod apgd;
mod cascade;
mod square;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::loss::{argmax, Loss};
use crate::rng::stream_rng;

pub use apgd::{apgd, apgd_indexed, apgd_targeted, apgd_targeted_indexed, checkpoints};
pub use cascade::{
    auto_cascade, transfer_attack, AttackRecord, CascadeReport, StageSummary, TransferOptions,
    TransferReport,
};
pub use square::{p_selection, square_attack, square_attack_indexed};

/// A model that exposes logits only.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>>;

    fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.axis_iter(Axis(0)).map(argmax).collect())
    }
}

/// Logits, per-sample loss and loss gradient with respect to the input.
#[derive(Debug, Clone)]
pub struct GradientEval {
    pub logits: Array2<f64>,
    pub loss: Array1<f64>,
    pub grad: Array2<f64>,
}

/// A model that also provides (possibly surrogate) input gradients.
pub trait Differentiable: Classifier {
    fn loss_gradient(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        losses: &[Loss],
    ) -> Result<GradientEval>;
}

impl<T: Classifier + ?Sized> Classifier for &T {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        (**self).logits(x)
    }
}

impl<T: Differentiable + ?Sized> Differentiable for &T {
    fn loss_gradient(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        losses: &[Loss],
    ) -> Result<GradientEval> {
        (**self).loss_gradient(x, labels, losses)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Linf,
    /// Reserved; no attack implements it yet.
    L2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApgdParams {
    /// Momentum weight of the new step.
    pub alpha: f64,
    /// Required fraction of loss-improving steps between checkpoints.
    pub rho: f64,
    /// Initial step as a multiple of `eps`.
    pub initial_step: f64,
    /// Target classes tried by the targeted variant (capped by classes - 1).
    pub n_targets: usize,
}

impl Default for ApgdParams {
    fn default() -> Self {
        Self {
            alpha: 0.75,
            rho: 0.75,
            initial_step: 2.0,
            n_targets: 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SquareParams {
    /// Query budget per sample; 0 returns the clean input.
    pub n_queries: usize,
    pub p_init: f64,
    /// `(channels, height, width)`; inferred when absent.
    pub image_shape: Option<[usize; 3]>,
    /// Keep the per-iteration objective of every sample.
    pub record_trace: bool,
}

impl Default for SquareParams {
    fn default() -> Self {
        Self {
            n_queries: 1000,
            p_init: 0.8,
            image_shape: None,
            record_trace: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackConfig {
    pub norm: Norm,
    pub eps: f64,
    pub n_iter: usize,
    pub n_restarts: usize,
    /// Fixed PGD step; defaults to `2.5 eps / n_iter`.
    pub step_size: Option<f64>,
    /// Start the first restart from a uniform point of the ball.
    pub random_start: bool,
    /// Set from the experiment seeds, never read from config files.
    #[serde(skip)]
    pub seed: u64,
    pub apgd: ApgdParams,
    pub square: SquareParams,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            norm: Norm::Linf,
            eps: 0.1,
            n_iter: 100,
            n_restarts: 1,
            step_size: None,
            random_start: false,
            seed: 0,
            apgd: ApgdParams::default(),
            square: SquareParams::default(),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.norm != Norm::Linf {
            return Err(Error::invalid("only the l-infinity norm is implemented"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid(format!("eps must be > 0, got {}", self.eps)));
        }
        if self.n_iter == 0 || self.n_restarts == 0 {
            return Err(Error::invalid("n_iter and n_restarts must be at least 1"));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return Err(Error::invalid("step_size must be > 0"));
            }
        }
        Ok(())
    }

    pub fn pgd_step(&self) -> f64 {
        self.step_size
            .unwrap_or(2.5 * self.eps / self.n_iter as f64)
    }
}

/// Result of attacking a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub x_adv: Array2<f64>,
    /// Misclassified at `x_adv`.
    pub success: Vec<bool>,
    /// Model evaluations spent per sample.
    pub queries: Vec<usize>,
    /// Attack objective at `x_adv` (loss for gradient attacks, margin for Square).
    pub final_loss: Array1<f64>,
    /// Logit margin `z_y - max_{i != y} z_i` at `x_adv`.
    pub final_margin: Array1<f64>,
    /// Per-sample objective after every Square iteration, when requested.
    pub objective_trace: Option<Vec<Vec<f64>>>,
}

impl AttackOutcome {
    pub fn robust_accuracy(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|s| !**s).count() as f64 / self.success.len() as f64
    }
}

/// Signed unit step; `sign(0) = 0`.
pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projection onto `{|v - x|_inf <= eps} ∩ [0, 1]^d`.
pub(crate) fn project(v: &mut Array2<f64>, x: ArrayView2<f64>, eps: f64) {
    Zip::from(v).and(x).for_each(|v, &x| {
        *v = v.max(x - eps).min(x + eps).clamp(0.0, 1.0);
    });
}

/// Largest l-infinity distance and box violation of `x_adv` from `x`.
pub fn budget_violation(x_adv: ArrayView2<f64>, x: ArrayView2<f64>, eps: f64) -> f64 {
    let mut worst: f64 = 0.0;
    Zip::from(x_adv).and(x).for_each(|&a, &x| {
        worst = worst.max((a - x).abs() - eps).max(-a).max(a - 1.0);
    });
    worst
}

pub(crate) fn margins(logits: ArrayView2<f64>, labels: &[usize]) -> Array1<f64> {
    logits
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(r, &y)| crate::loss::margin(r, y))
        .collect()
}

pub(crate) fn misclassified(logits: ArrayView2<f64>, labels: &[usize]) -> Vec<bool> {
    logits
        .axis_iter(Axis(0))
        .zip(labels)
        .map(|(r, &y)| argmax(r) != y)
        .collect()
}

pub(crate) fn check_batch<M: Classifier + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    ids: &[usize],
) -> Result<()> {
    check_dim("attack input width", model.input_dim(), x.ncols())?;
    check_dim("labels per sample", x.nrows(), labels.len())?;
    check_dim("ids per sample", x.nrows(), ids.len())?;
    if let Some(&y) = labels.iter().find(|&&y| y >= model.num_classes()) {
        return Err(Error::invalid(format!("label {y} out of range")));
    }
    Ok(())
}

pub(crate) fn default_ids(n: usize) -> Vec<usize> {
    (0..n).collect()
}

/// Uniform start inside the ball, drawn from the sample's own stream.
pub(crate) fn random_start(
    x: ArrayView2<f64>,
    ids: &[usize],
    eps: f64,
    seed: u64,
    restart: usize,
) -> Array2<f64> {
    let mut out = x.to_owned();
    for (i, mut row) in out.axis_iter_mut(Axis(0)).enumerate() {
        let stream = ((restart as u64) << 40) ^ ids[i] as u64;
        let mut rng = stream_rng(seed, stream);
        for v in row.iter_mut() {
            *v = (*v + rng.random_range(-eps..=eps)).clamp(0.0, 1.0);
        }
    }
    out
}

/// Fast gradient sign method on the cross-entropy.
pub fn fgsm<M: Differentiable + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    eps: f64,
) -> Result<AttackOutcome> {
    check_batch(model, x, labels, &default_ids(x.nrows()))?;
    if eps < 0.0 {
        return Err(Error::invalid("eps must be nonnegative"));
    }
    let ce = vec![Loss::CrossEntropy; labels.len()];
    let g = model.loss_gradient(x, labels, &ce)?;
    let mut x_adv = x.to_owned();
    Zip::from(&mut x_adv)
        .and(&g.grad)
        .for_each(|v, &g| *v = (*v + eps * sign(g)).clamp(0.0, 1.0));
    let after = model.loss_gradient(x_adv.view(), labels, &ce)?;
    Ok(AttackOutcome {
        success: misclassified(after.logits.view(), labels),
        queries: vec![2; labels.len()],
        final_margin: margins(after.logits.view(), labels),
        final_loss: after.loss,
        x_adv,
        objective_trace: None,
    })
}

/// Sign-gradient ascent on the cross-entropy with projection after every
/// step. Keeps the highest-loss iterate over all steps and restarts.
pub fn pgd<M: Differentiable + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    pgd_indexed(model, x, labels, &default_ids(x.nrows()), cfg)
}

pub fn pgd_indexed<M: Differentiable + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    check_batch(model, x, labels, ids)?;
    let n = x.nrows();
    let step = cfg.pgd_step();
    let ce = vec![Loss::CrossEntropy; n];
    let mut best_x = x.to_owned();
    let mut best_loss = Array1::from_elem(n, f64::NEG_INFINITY);
    let mut best_logits = Array2::zeros((n, model.num_classes()));
    let mut queries = vec![0usize; n];
    for restart in 0..cfg.n_restarts {
        let mut cur = if restart > 0 || cfg.random_start {
            random_start(x, ids, cfg.eps, cfg.seed, restart)
        } else {
            x.to_owned()
        };
        let mut eval = model.loss_gradient(cur.view(), labels, &ce)?;
        for _ in 0..cfg.n_iter {
            Zip::from(&mut cur)
                .and(&eval.grad)
                .for_each(|v, &g| *v += step * sign(g));
            project(&mut cur, x, cfg.eps);
            eval = model.loss_gradient(cur.view(), labels, &ce)?;
            for i in 0..n {
                if eval.loss[i] > best_loss[i] {
                    best_loss[i] = eval.loss[i];
                    best_x.row_mut(i).assign(&cur.row(i));
                    best_logits.row_mut(i).assign(&eval.logits.row(i));
                }
            }
        }
        queries.iter_mut().for_each(|q| *q += cfg.n_iter + 1);
    }
    Ok(AttackOutcome {
        success: misclassified(best_logits.view(), labels),
        final_margin: margins(best_logits.view(), labels),
        final_loss: best_loss,
        x_adv: best_x,
        queries,
        objective_trace: None,
    })
}

/// Which attack a cascade stage runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
    ApgdCe,
    ApgdT,
    Square,
}

impl AttackKind {
    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::ApgdCe => "apgd-ce",
            AttackKind::ApgdT => "apgd-t",
            AttackKind::Square => "square",
        }
    }

    /// The default cascade order.
    pub fn cascade() -> Vec<AttackKind> {
        vec![AttackKind::ApgdCe, AttackKind::ApgdT, AttackKind::Square]
    }
}

/// Runs one attack of the suite on a batch with explicit sample ids.
pub fn run_attack<M: Differentiable + ?Sized>(
    kind: AttackKind,
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    match kind {
        AttackKind::Fgsm => fgsm(model, x, labels, cfg.eps),
        AttackKind::Pgd => pgd_indexed(model, x, labels, ids, cfg),
        AttackKind::ApgdCe => apgd_indexed(model, x, labels, ids, cfg),
        AttackKind::ApgdT => apgd_targeted_indexed(model, x, labels, ids, cfg),
        AttackKind::Square => square_attack_indexed(model, x, labels, ids, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn projection_respects_ball_and_box() {
        let x = array![[0.05, 0.5, 0.97]];
        let mut v = array![[-1.0, 0.9, 0.5]];
        project(&mut v, x.view(), 0.1);
        assert_eq!(v, array![[0.0, 0.6, 0.87]]);
        assert!(budget_violation(v.view(), x.view(), 0.1) <= 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = AttackConfig::default();
        cfg.validate().unwrap();
        cfg.eps = 0.0;
        assert!(cfg.validate().is_err());
        cfg.eps = 0.1;
        cfg.norm = Norm::L2;
        assert!(cfg.validate().is_err());
    }
}
