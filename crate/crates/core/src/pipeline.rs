//! The defended classifier as the attack suite sees it: frozen features,
//! the ROPUST head and the simulated OPU behind one input-to-logits map.

use ndarray::{Array2, ArrayView2};

use crate::attacks::{Classifier, Differentiable, GradientEval};
use crate::base::FrozenFeatures;
use crate::error::{check_dim, Result};
use crate::loss::Loss;
use crate::model::{AblationFlags, HiddenBackward, RopustParams};
use crate::opu::{ComplexMatrix, OpuHandle};

/// How the attacker pulls gradients through the projection.
#[derive(Debug, Clone, Copy)]
pub enum AttackerBackward<'a> {
    /// Surrogate `R` when obfuscated, the true matrix otherwise.
    FromFlags,
    /// Exact chain rule through an attacker-held matrix.
    Matrix(&'a ComplexMatrix),
}

#[derive(Debug, Clone, Copy)]
pub struct RopustClassifier<'a> {
    /// `None` feeds inputs straight into the head.
    pub features: Option<&'a FrozenFeatures>,
    pub params: &'a RopustParams,
    pub opu: &'a OpuHandle,
    pub flags: AblationFlags,
    pub backward: AttackerBackward<'a>,
}

impl<'a> RopustClassifier<'a> {
    pub fn new(
        features: Option<&'a FrozenFeatures>,
        params: &'a RopustParams,
        opu: &'a OpuHandle,
        flags: AblationFlags,
    ) -> Result<Self> {
        flags.validate()?;
        if let Some(f) = features {
            check_dim("feature width", params.dims.feature, f.feature_dim())?;
        }
        Ok(Self {
            features,
            params,
            opu,
            flags,
            backward: AttackerBackward::FromFlags,
        })
    }

    pub fn with_backward(mut self, backward: AttackerBackward<'a>) -> Self {
        self.backward = backward;
        self
    }
}

impl Classifier for RopustClassifier<'_> {
    fn num_classes(&self) -> usize {
        self.params.dims.classes
    }

    fn input_dim(&self) -> usize {
        match self.features {
            Some(f) => f.input_dim(),
            None => self.params.dims.feature,
        }
    }

    fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let trace = match self.features {
            Some(f) => self
                .params
                .forward(self.opu, f.extract(x)?.view(), self.flags)?,
            None => self.params.forward(self.opu, x, self.flags)?,
        };
        Ok(trace.logits)
    }
}

impl Differentiable for RopustClassifier<'_> {
    fn loss_gradient(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        losses: &[Loss],
    ) -> Result<GradientEval> {
        let head_grad = |f: ArrayView2<f64>| -> Result<_> {
            let trace = self.params.forward(self.opu, f, self.flags)?;
            let (loss, g) = match self.backward {
                AttackerBackward::FromFlags => self
                    .params
                    .input_gradient(self.opu, &trace, labels, losses, self.flags)?,
                AttackerBackward::Matrix(m) => self.params.input_gradient_with(
                    &trace,
                    labels,
                    losses,
                    self.flags,
                    HiddenBackward::Exact(m),
                )?,
            };
            Ok((trace.logits, loss, g))
        };
        match self.features {
            None => {
                let (logits, loss, grad) = head_grad(x)?;
                Ok(GradientEval { logits, loss, grad })
            }
            Some(f) => {
                let fb = f.extract_with_backward(x)?;
                let (logits, loss, g_f) = head_grad(fb.features().view())?;
                Ok(GradientEval {
                    logits,
                    loss,
                    grad: fb.input_gradient(&g_f),
                })
            }
        }
    }
}
