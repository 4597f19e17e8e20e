//! The defended classifier head: `softmax(W3 |U sign(W1 x + b1)|^2 + b3)`.
//!
//! Forward passes run through the OPU handle. Input gradients use the
//! relaxed backward: `d sign / da` is replaced by `tanh'(a) = sech^2(a)` and,
//! unless the ablation flags de-obfuscate the head, `U^T` is replaced by the
//! fixed random matrix `R` with the modulus factor `2 sqrt(y)` taken from
//! the observed outputs. The quantizer is treated as identity in backward.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::loss::{argmax, batch_loss_and_grad, softmax_rows, Loss};
use crate::opu::{ComplexMatrix, OpuHandle};
use crate::rng::{gaussian_matrix, uniform_matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RopustDims {
    pub feature: usize,
    pub opu_in: usize,
    pub opu_out: usize,
    pub classes: usize,
}

impl RopustDims {
    pub fn validate(&self) -> Result<()> {
        if self.feature == 0 || self.opu_in == 0 || self.opu_out == 0 || self.classes < 2 {
            return Err(Error::invalid(format!(
                "head dims must be positive with at least two classes: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Single-component removal switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// `false` feeds the real-valued `a1` to the projection.
    pub binarize: bool,
    /// `false` replaces `|U h|^2` by `Re(U h)`.
    pub square_nonlinearity: bool,
    /// `false` hands the attacker the true `U` for the backward pass.
    pub obfuscated: bool,
    /// `false` trains `W1` by backpropagation through the simulated `U`.
    pub train_with_dfa: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self {
            binarize: true,
            square_nonlinearity: true,
            obfuscated: true,
            train_with_dfa: true,
        }
    }
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if !self.train_with_dfa && self.obfuscated {
            return Err(Error::invalid(
                "train_with_dfa=false requires obfuscated=false: backpropagation needs U",
            ));
        }
        Ok(())
    }

    /// Label used in reports, e.g. `ablation:no-binarize`.
    pub fn tag(&self) -> String {
        let mut parts = Vec::new();
        if !self.binarize {
            parts.push("no-binarize");
        }
        if !self.square_nonlinearity {
            parts.push("no-square");
        }
        if !self.obfuscated {
            parts.push("no-obfuscation");
        }
        if !self.train_with_dfa {
            parts.push("no-dfa");
        }
        if parts.is_empty() {
            "ropust".to_string()
        } else {
            format!("ablation:{}", parts.join("+"))
        }
    }

    /// Whether the forward pass needs the simulated matrix directly.
    pub fn needs_lab_forward(&self) -> bool {
        !self.binarize || !self.square_nonlinearity
    }
}

/// Trainable weights plus the fixed backward surrogate `R` and the fixed
/// feedback matrix `B`, both regenerated from their seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct RopustParams {
    pub dims: RopustDims,
    /// `opu_in x feature`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `classes x opu_out`
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
    /// `opu_in x opu_out`, stands in for `U^T`.
    pub r: Array2<f64>,
    /// `opu_in x classes`
    pub feedback: Array2<f64>,
    pub seed_r: u64,
    pub seed_b: u64,
}

impl RopustParams {
    pub fn new(dims: RopustDims, init_seed: u64, seed_r: u64, seed_b: u64) -> Result<Self> {
        dims.validate()?;
        let w1 = uniform_matrix(
            dims.opu_in,
            dims.feature,
            1.0 / (dims.feature as f64).sqrt(),
            init_seed,
        );
        let w3 = uniform_matrix(
            dims.classes,
            dims.opu_out,
            1.0 / (dims.opu_out as f64).sqrt(),
            init_seed ^ 0x5bd1_e995,
        );
        Ok(Self {
            dims,
            w1,
            b1: Array1::zeros(dims.opu_in),
            w3,
            b3: Array1::zeros(dims.classes),
            r: Self::surrogate(dims, seed_r),
            feedback: Self::feedback_matrix(dims, seed_b),
            seed_r,
            seed_b,
        })
    }

    pub(crate) fn surrogate(dims: RopustDims, seed: u64) -> Array2<f64> {
        gaussian_matrix(
            dims.opu_in,
            dims.opu_out,
            1.0 / (dims.opu_out as f64).sqrt(),
            seed,
        )
    }

    pub(crate) fn feedback_matrix(dims: RopustDims, seed: u64) -> Array2<f64> {
        gaussian_matrix(
            dims.opu_in,
            dims.classes,
            1.0 / (dims.classes as f64).sqrt(),
            seed,
        )
    }

    pub fn is_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(self.w3.iter())
            .chain(self.b1.iter())
            .chain(self.b3.iter())
            .all(|v| v.is_finite())
    }

    fn check_opu(&self, opu: &OpuHandle) -> Result<()> {
        check_dim("OPU input dim", self.dims.opu_in, opu.input_dim())?;
        check_dim("OPU output dim", self.dims.opu_out, opu.output_dim())
    }

    pub fn forward(
        &self,
        opu: &OpuHandle,
        x: ArrayView2<f64>,
        flags: AblationFlags,
    ) -> Result<ForwardTrace> {
        self.check_opu(opu)?;
        check_dim("feature width", self.dims.feature, x.ncols())?;
        let a1 = x.dot(&self.w1.t()) + &self.b1;
        let h = if flags.binarize {
            a1.mapv(binarize)
        } else {
            a1.clone()
        };
        let y_opu = if !flags.needs_lab_forward() {
            opu.forward_batch(h.view())?
        } else {
            let m = opu.lab_matrix("real-valued or non-squared projection needs a lab OPU")?;
            if flags.square_nonlinearity {
                m.intensity(h.view())?
            } else {
                m.project(h.view())?.0
            }
        };
        let logits = y_opu.dot(&self.w3.t()) + &self.b3;
        let probs = softmax_rows(logits.view());
        Ok(ForwardTrace {
            x: x.to_owned(),
            a1,
            h,
            y_opu,
            logits,
            probs,
        })
    }

    /// Relaxed input gradient; the hidden backward follows `flags.obfuscated`.
    pub fn input_gradient(
        &self,
        opu: &OpuHandle,
        trace: &ForwardTrace,
        labels: &[usize],
        losses: &[Loss],
        flags: AblationFlags,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        self.check_opu(opu)?;
        if !opu.is_calibrated() {
            return Err(Error::State(
                "OPU must be calibrated before attacking".into(),
            ));
        }
        let backward = if flags.obfuscated {
            HiddenBackward::Surrogate
        } else {
            HiddenBackward::Exact(opu.lab_matrix("exact backward needs the transmission matrix")?)
        };
        self.input_gradient_with(trace, labels, losses, flags, backward)
    }

    /// Input gradient with an explicit hidden-layer backward.
    pub fn input_gradient_with(
        &self,
        trace: &ForwardTrace,
        labels: &[usize],
        losses: &[Loss],
        flags: AblationFlags,
        backward: HiddenBackward<'_>,
    ) -> Result<(Array1<f64>, Array2<f64>)> {
        let (values, g_logits) = batch_loss_and_grad(trace.logits.view(), labels, losses)?;
        let g_a1 = self.backward_to_a1(trace, g_logits.view(), flags, backward)?;
        Ok((values, g_a1.dot(&self.w1)))
    }

    /// Gradient signal at `a1` for a given logit gradient.
    pub(crate) fn backward_to_a1(
        &self,
        trace: &ForwardTrace,
        g_logits: ArrayView2<f64>,
        flags: AblationFlags,
        backward: HiddenBackward<'_>,
    ) -> Result<Array2<f64>> {
        let g_y = g_logits.dot(&self.w3);
        let g_h = match backward {
            HiddenBackward::Surrogate => {
                let upstream = if flags.square_nonlinearity {
                    &g_y * &trace.y_opu.mapv(|y| 2.0 * y.max(0.0).sqrt())
                } else {
                    g_y
                };
                upstream.dot(&self.r.t())
            }
            HiddenBackward::Exact(m) => {
                check_dim("backward matrix rows", self.dims.opu_out, m.rows())?;
                check_dim("backward matrix cols", self.dims.opu_in, m.cols())?;
                if flags.square_nonlinearity {
                    // Re(M^H (2 z * g)) with z = M h
                    let (zr, zi) = m.project(trace.h.view())?;
                    let gr = 2.0 * &zr * &g_y;
                    let gi = 2.0 * &zi * &g_y;
                    gr.dot(m.re()) + gi.dot(m.im())
                } else {
                    g_y.dot(m.re())
                }
            }
        };
        Ok(if flags.binarize {
            g_h * &trace.a1.mapv(tanh_prime)
        } else {
            g_h
        })
    }

    pub fn predict(
        &self,
        opu: &OpuHandle,
        x: ArrayView2<f64>,
        flags: AblationFlags,
    ) -> Result<Vec<usize>> {
        if x.nrows() == 0 {
            return Err(Error::invalid("cannot predict on an empty batch"));
        }
        Ok(self.forward(opu, x, flags)?.predictions())
    }

    pub fn accuracy(
        &self,
        opu: &OpuHandle,
        x: ArrayView2<f64>,
        labels: &[usize],
        flags: AblationFlags,
    ) -> Result<f64> {
        let pred = self.predict(opu, x, flags)?;
        accuracy(&pred, labels)
    }
}

/// Which matrix carries the gradient through the projection.
#[derive(Debug, Clone, Copy)]
pub enum HiddenBackward<'a> {
    /// Fixed random `R` with the observable modulus factor.
    Surrogate,
    /// Exact complex chain rule through the given matrix.
    Exact(&'a ComplexMatrix),
}

/// Intermediate values of one forward pass, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub x: Array2<f64>,
    pub a1: Array2<f64>,
    pub h: Array2<f64>,
    pub y_opu: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
}

impl ForwardTrace {
    pub fn predictions(&self) -> Vec<usize> {
        self.probs.axis_iter(Axis(0)).map(argmax).collect()
    }
}

/// `sign` mapped to `{0, 1}` with `sign(0) = +1`.
pub fn binarize(a: f64) -> f64 {
    if a >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// `d/da tanh(a)`, evaluated as `sech^2(a)`.
pub fn tanh_prime(a: f64) -> f64 {
    let c = a.cosh();
    1.0 / (c * c)
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::invalid("accuracy of an empty batch"));
    }
    check_dim("labels per prediction", pred.len(), labels.len())?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / pred.len() as f64)
}
