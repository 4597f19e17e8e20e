//! Desk-scale robust base network: a two-layer ReLU feature stack and a
//! linear classifier, trained with PGD adversarial training. Its frozen
//! feature stack is the input of the defended head.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::attacks::{pgd, AttackConfig, Classifier, Differentiable, GradientEval};
use crate::dfa::{epoch_batches, EpochMetrics};
use crate::error::{check_dim, Error, Result};
use crate::loss::{argmax, batch_loss_and_grad, Loss};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{derive_seed, uniform_matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseDims {
    pub input: usize,
    pub hidden: usize,
    pub feature: usize,
    pub classes: usize,
}

impl BaseDims {
    pub fn mnist(feature: usize) -> Self {
        Self {
            input: 784,
            hidden: 256,
            feature,
            classes: 10,
        }
    }
}

/// Fully connected layer `x W^T + b` with `W: out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn new(input: usize, output: usize, seed: u64) -> Self {
        Self {
            w: uniform_matrix(output, input, 1.0 / (input as f64).sqrt(), seed),
            b: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.w.t()) + &self.b
    }

    fn grads(&self, x: ArrayView2<f64>, g_out: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
        let n = x.nrows() as f64;
        (g_out.t().dot(&x) / n, g_out.sum_axis(Axis(0)) / n)
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// `relu(W2 relu(W1 x + b1) + b2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack {
    pub l1: Dense,
    pub l2: Dense,
}

struct StackCache {
    z1: Array2<f64>,
    h1: Array2<f64>,
    z2: Array2<f64>,
    features: Array2<f64>,
}

impl FeatureStack {
    pub fn input_dim(&self) -> usize {
        self.l1.w.ncols()
    }

    pub fn feature_dim(&self) -> usize {
        self.l2.w.nrows()
    }

    fn forward_cached(&self, x: ArrayView2<f64>) -> Result<StackCache> {
        check_dim("base input width", self.input_dim(), x.ncols())?;
        let z1 = self.l1.forward(x);
        let h1 = z1.mapv(relu);
        let z2 = self.l2.forward(h1.view());
        let features = z2.mapv(relu);
        Ok(StackCache {
            z1,
            h1,
            z2,
            features,
        })
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x)?.features)
    }

    /// Returns `(g_z1, g_z2)` for an upstream feature gradient.
    fn backward(&self, cache: &StackCache, g_features: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mut g_z2 = g_features.clone();
        g_z2.zip_mut_with(&cache.z2, |g, &z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        let mut g_z1 = g_z2.dot(&self.l2.w);
        g_z1.zip_mut_with(&cache.z1, |g, &z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        (g_z1, g_z2)
    }

    fn input_gradient(&self, cache: &StackCache, g_features: &Array2<f64>) -> Array2<f64> {
        let (g_z1, _) = self.backward(cache, g_features);
        g_z1.dot(&self.l1.w)
    }
}

/// Linear classifier over features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub layer: Dense,
}

impl LinearHead {
    pub fn new(feature: usize, classes: usize, seed: u64) -> Self {
        Self {
            layer: Dense::new(feature, classes, seed),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.layer.w.nrows()
    }

    pub fn logits(&self, f: ArrayView2<f64>) -> Result<Array2<f64>> {
        check_dim("head input width", self.layer.w.ncols(), f.ncols())?;
        Ok(self.layer.forward(f))
    }
}

impl Classifier for LinearHead {
    fn num_classes(&self) -> usize {
        LinearHead::num_classes(self)
    }

    fn input_dim(&self) -> usize {
        self.layer.w.ncols()
    }

    fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        LinearHead::logits(self, x)
    }
}

impl Differentiable for LinearHead {
    fn loss_gradient(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        losses: &[Loss],
    ) -> Result<GradientEval> {
        let logits = LinearHead::logits(self, x)?;
        let (loss, g) = batch_loss_and_grad(logits.view(), labels, losses)?;
        let grad = g.dot(&self.layer.w);
        Ok(GradientEval { logits, loss, grad })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BaseNet {
    pub dims: BaseDims,
    pub stack: FeatureStack,
    pub head: LinearHead,
}

impl BaseNet {
    pub fn new(dims: BaseDims, seed: u64) -> Result<Self> {
        if dims.input == 0 || dims.hidden == 0 || dims.feature == 0 || dims.classes < 2 {
            return Err(Error::invalid(format!("invalid base dims {dims:?}")));
        }
        Ok(Self {
            dims,
            stack: FeatureStack {
                l1: Dense::new(dims.input, dims.hidden, derive_seed(seed, "l1")),
                l2: Dense::new(dims.hidden, dims.feature, derive_seed(seed, "l2")),
            },
            head: LinearHead::new(dims.feature, dims.classes, derive_seed(seed, "head")),
        })
    }

    pub fn extract_features(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.stack.forward(x)
    }

    pub fn is_finite(&self) -> bool {
        [&self.stack.l1, &self.stack.l2, &self.head.layer]
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    fn slot_sizes(&self) -> [usize; 6] {
        [
            self.stack.l1.w.len(),
            self.stack.l1.b.len(),
            self.stack.l2.w.len(),
            self.stack.l2.b.len(),
            self.head.layer.w.len(),
            self.head.layer.b.len(),
        ]
    }

    /// Mean cross-entropy gradient of every parameter tensor, plus batch
    /// loss and correct count.
    fn param_gradients(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<(Vec<Array2<f64>>, Vec<Array1<f64>>, f64, usize)> {
        let cache = self.stack.forward_cached(x)?;
        let logits = self.head.layer.forward(cache.features.view());
        let ce = vec![Loss::CrossEntropy; labels.len()];
        let (loss, g_logits) = batch_loss_and_grad(logits.view(), labels, &ce)?;
        let correct = logits
            .axis_iter(Axis(0))
            .zip(labels)
            .filter(|(r, &y)| argmax(r.view()) == y)
            .count();
        let (gw3, gb3) = self.head.layer.grads(cache.features.view(), &g_logits);
        let g_features = g_logits.dot(&self.head.layer.w);
        let (g_z1, g_z2) = self.stack.backward(&cache, &g_features);
        let (gw2, gb2) = self.stack.l2.grads(cache.h1.view(), &g_z2);
        let (gw1, gb1) = self.stack.l1.grads(x, &g_z1);
        Ok((
            vec![gw1, gw2, gw3],
            vec![gb1, gb2, gb3],
            loss.mean().unwrap_or(0.0),
            correct,
        ))
    }
}

fn features_logits_gradient(
    stack: &FeatureStack,
    head: &LinearHead,
    x: ArrayView2<f64>,
    labels: &[usize],
    losses: &[Loss],
) -> Result<GradientEval> {
    let cache = stack.forward_cached(x)?;
    let logits = head.layer.forward(cache.features.view());
    let (loss, g_logits) = batch_loss_and_grad(logits.view(), labels, losses)?;
    let g_f = g_logits.dot(&head.layer.w);
    let grad = stack.input_gradient(&cache, &g_f);
    Ok(GradientEval { logits, loss, grad })
}

impl Classifier for BaseNet {
    fn num_classes(&self) -> usize {
        self.dims.classes
    }

    fn input_dim(&self) -> usize {
        self.dims.input
    }

    fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let f = self.stack.forward(x)?;
        self.head.logits(f.view())
    }
}

impl Differentiable for BaseNet {
    fn loss_gradient(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        losses: &[Loss],
    ) -> Result<GradientEval> {
        features_logits_gradient(&self.stack, &self.head, x, labels, losses)
    }
}

/// Read-only feature function of a trained base network.
#[derive(Debug, Clone)]
pub struct FrozenFeatures {
    stack: Arc<FeatureStack>,
}

pub fn freeze(net: &BaseNet) -> FrozenFeatures {
    FrozenFeatures {
        stack: Arc::new(net.stack.clone()),
    }
}

impl FrozenFeatures {
    pub fn input_dim(&self) -> usize {
        self.stack.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.stack.feature_dim()
    }

    pub fn extract(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.stack.forward(x)
    }

    /// Features together with a closure-free backward handle.
    pub fn extract_with_backward(&self, x: ArrayView2<f64>) -> Result<FeatureBackward<'_>> {
        let cache = self.stack.forward_cached(x)?;
        Ok(FeatureBackward {
            stack: &self.stack,
            cache,
        })
    }
}

/// Cached forward of the frozen stack, able to pull feature gradients back
/// to the input.
pub struct FeatureBackward<'a> {
    stack: &'a FeatureStack,
    cache: StackCache,
}

impl FeatureBackward<'_> {
    pub fn features(&self) -> &Array2<f64> {
        &self.cache.features
    }

    pub fn input_gradient(&self, g_features: &Array2<f64>) -> Array2<f64> {
        self.stack.input_gradient(&self.cache, g_features)
    }
}

/// Frozen robust features with a freshly trained plain linear head.
#[derive(Debug, Clone)]
pub struct DefenseFree {
    pub features: FrozenFeatures,
    pub head: LinearHead,
}

impl Classifier for DefenseFree {
    fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    fn input_dim(&self) -> usize {
        self.features.input_dim()
    }

    fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let f = self.features.extract(x)?;
        self.head.logits(f.view())
    }
}

impl Differentiable for DefenseFree {
    fn loss_gradient(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        losses: &[Loss],
    ) -> Result<GradientEval> {
        features_logits_gradient(&self.features.stack, &self.head, x, labels, losses)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdvTrainConfig {
    /// l-infinity budget; 0 means natural training.
    pub eps: f64,
    pub pgd_steps: usize,
    pub pgd_step_size: f64,
    pub random_start: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Set from the experiment seeds, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for AdvTrainConfig {
    fn default() -> Self {
        Self {
            eps: 0.1,
            pgd_steps: 10,
            pgd_step_size: 0.025,
            random_start: false,
            epochs: 5,
            batch_size: 100,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl AdvTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        if self.eps < 0.0 {
            return Err(Error::invalid("eps must be nonnegative"));
        }
        if self.eps > 0.0 {
            if self.pgd_steps == 0 {
                return Err(Error::invalid("pgd_steps must be at least 1"));
            }
            if !(self.pgd_step_size > 0.0 && self.pgd_step_size <= self.eps) {
                return Err(Error::invalid(format!(
                    "pgd_step_size must lie in (0, eps], got {} with eps {}",
                    self.pgd_step_size, self.eps
                )));
            }
        }
        Ok(())
    }
}

fn check_inputs(x: ArrayView2<f64>, labels: &[usize], classes: usize) -> Result<()> {
    if x.nrows() == 0 {
        return Err(Error::invalid("training set is empty"));
    }
    check_dim("labels per sample", x.nrows(), labels.len())?;
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::invalid(format!(
            "label {y} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// PGD adversarial training; each batch is replaced by PGD examples crafted
/// on the current network before the update. `eps = 0` is natural training.
pub fn adv_train(
    net: &mut BaseNet,
    x: ArrayView2<f64>,
    labels: &[usize],
    cfg: &AdvTrainConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    check_inputs(x, labels, net.dims.classes)?;
    let mut adam = Adam::new(cfg.optimizer, &net.slot_sizes());
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for (step, batch) in epoch_batches(x.nrows(), cfg.batch_size, cfg.seed, epoch)
            .into_iter()
            .enumerate()
        {
            let clean = x.select(Axis(0), &batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let xb = if cfg.eps > 0.0 {
                let attack = AttackConfig {
                    eps: cfg.eps,
                    n_iter: cfg.pgd_steps,
                    n_restarts: 1,
                    step_size: Some(cfg.pgd_step_size),
                    random_start: cfg.random_start,
                    seed: derive_seed(cfg.seed, &format!("pgd/{epoch}/{step}")),
                    ..AttackConfig::default()
                };
                pgd(&*net, clean.view(), &yb, &attack)?.x_adv
            } else {
                clean
            };
            let (gw, gb, loss, c) = net.param_gradients(xb.view(), &yb)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    step,
                    detail: format!("base loss {loss}"),
                });
            }
            let (l1, l2, l3) = (&mut net.stack.l1, &mut net.stack.l2, &mut net.head.layer);
            adam.step(
                &mut [
                    l1.w.as_slice_mut().unwrap(),
                    l1.b.as_slice_mut().unwrap(),
                    l2.w.as_slice_mut().unwrap(),
                    l2.b.as_slice_mut().unwrap(),
                    l3.w.as_slice_mut().unwrap(),
                    l3.b.as_slice_mut().unwrap(),
                ],
                &[
                    gw[0].as_slice().unwrap(),
                    gb[0].as_slice().unwrap(),
                    gw[1].as_slice().unwrap(),
                    gb[1].as_slice().unwrap(),
                    gw[2].as_slice().unwrap(),
                    gb[2].as_slice().unwrap(),
                ],
            );
            if !net.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    step,
                    detail: "non-finite base parameters".into(),
                });
            }
            loss_sum += loss * yb.len() as f64;
            correct += c;
        }
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / x.nrows() as f64,
            accuracy: correct as f64 / x.nrows() as f64,
        };
        log::info!(
            "event=train_epoch model=base eps={} epoch={} loss={:.6} accuracy={:.4}",
            cfg.eps,
            m.epoch,
            m.loss,
            m.accuracy
        );
        curve.push(m);
    }
    Ok(curve)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Set from the experiment seeds, never read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            optimizer: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Trains a new linear head from scratch on natural features.
pub fn retrain_plain_classifier(
    frozen: &FrozenFeatures,
    x: ArrayView2<f64>,
    labels: &[usize],
    classes: usize,
    cfg: &HeadTrainConfig,
) -> Result<LinearHead> {
    let features = frozen.extract(x)?;
    train_linear_head(features.view(), labels, classes, cfg)
}

/// Minibatch Adam on softmax regression over precomputed features.
pub fn train_linear_head(
    features: ArrayView2<f64>,
    labels: &[usize],
    classes: usize,
    cfg: &HeadTrainConfig,
) -> Result<LinearHead> {
    cfg.optimizer.validate()?;
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::invalid("epochs and batch_size must be at least 1"));
    }
    check_inputs(features, labels, classes)?;
    let mut head = LinearHead::new(features.ncols(), classes, derive_seed(cfg.seed, "head"));
    let mut adam = Adam::new(cfg.optimizer, &[head.layer.w.len(), head.layer.b.len()]);
    for epoch in 0..cfg.epochs {
        for batch in epoch_batches(features.nrows(), cfg.batch_size, cfg.seed, epoch) {
            let fb = features.select(Axis(0), &batch);
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let logits = head.layer.forward(fb.view());
            let ce = vec![Loss::CrossEntropy; yb.len()];
            let (_, g) = batch_loss_and_grad(logits.view(), &yb, &ce)?;
            let (gw, gb) = head.layer.grads(fb.view(), &g);
            adam.step(
                &mut [
                    head.layer.w.as_slice_mut().unwrap(),
                    head.layer.b.as_slice_mut().unwrap(),
                ],
                &[gw.as_slice().unwrap(), gb.as_slice().unwrap()],
            );
        }
    }
    Ok(head)
}
