//! Idealized matrix-retrieval attacker: a matrix `U'` that interpolates
//! between the true transmission matrix and an independent decoy on a
//! subset of retrieved columns, used for an exact backward pass.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::attacks::{apgd, AttackConfig};
use crate::base::FrozenFeatures;
use crate::error::{check_dim, Error, Result};
use crate::loss::Loss;
use crate::model::{AblationFlags, ForwardTrace, HiddenBackward, RopustParams};
use crate::opu::{ComplexMatrix, OpuHandle};
use crate::pipeline::{AttackerBackward, RopustClassifier};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalSeeds {
    pub mask: u64,
    pub decoy: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalModel {
    pub alpha: f64,
    pub col_fraction: f64,
    /// One flag per input column of `U`.
    pub mask: Vec<bool>,
    pub decoy: ComplexMatrix,
    pub u_prime: ComplexMatrix,
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!(
            "{name} must lie in [0, 1], got {v}"
        )));
    }
    Ok(())
}

/// Retrieved columns for a fraction: a prefix of one seeded permutation, so
/// larger fractions retrieve supersets of smaller ones.
pub fn column_mask(cols: usize, fraction: f64, seed: u64) -> Result<Vec<bool>> {
    check_unit("column fraction", fraction)?;
    let k = (fraction * cols as f64).floor() as usize;
    let order = sample(&mut stream_rng(seed, 0), cols, cols);
    let mut mask = vec![false; cols];
    for c in order.iter().take(k) {
        mask[c] = true;
    }
    Ok(mask)
}

/// `U' = alpha (U . M) + (1 - alpha) R'` on retrieved columns, `R'` elsewhere.
pub fn build_retrieved(
    opu: &OpuHandle,
    alpha: f64,
    col_fraction: f64,
    seeds: RetrievalSeeds,
) -> Result<RetrievalModel> {
    check_unit("alpha", alpha)?;
    let u = opu.unseal_for_test()?.as_complex();
    let mask = column_mask(u.cols(), col_fraction, seeds.mask)?;
    let decoy = ComplexMatrix::gaussian(u.rows(), u.cols(), seeds.decoy);
    let mix = |u: &Array2<f64>, r: &Array2<f64>| {
        let mut out = r.clone();
        for ((row, col), v) in out.indexed_iter_mut() {
            if mask[col] {
                let (a, b) = (u[[row, col]], r[[row, col]]);
                *v = if alpha == 1.0 {
                    a
                } else if alpha == 0.0 {
                    b
                } else {
                    alpha * a + (1.0 - alpha) * b
                };
            }
        }
        out
    };
    let u_prime = ComplexMatrix::from_parts(mix(u.re(), decoy.re()), mix(u.im(), decoy.im()))?;
    Ok(RetrievalModel {
        alpha,
        col_fraction,
        mask,
        decoy,
        u_prime,
    })
}

/// Input gradient of the head with the exact backward through `U'`.
pub fn retrieval_gradient(
    params: &RopustParams,
    u_prime: &ComplexMatrix,
    trace: &ForwardTrace,
    labels: &[usize],
    losses: &[Loss],
    flags: AblationFlags,
) -> Result<Array2<f64>> {
    check_dim("retrieved matrix rows", params.dims.opu_out, u_prime.rows())?;
    check_dim("retrieved matrix cols", params.dims.opu_in, u_prime.cols())?;
    Ok(params
        .input_gradient_with(trace, labels, losses, flags, HiddenBackward::Exact(u_prime))?
        .1)
}

fn unit_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub alphas: Vec<f64>,
    pub fractions: Vec<f64>,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            alphas: unit_grid(),
            fractions: unit_grid(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.fractions.is_empty() {
            return Err(Error::invalid(
                "retrieval grid needs at least one alpha and fraction",
            ));
        }
        for &a in &self.alphas {
            check_unit("alpha", a)?;
        }
        for &f in &self.fractions {
            check_unit("column fraction", f)?;
        }
        Ok(())
    }
}

/// Robust accuracy over the grid, `robust_accuracy[alpha][fraction]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub fractions: Vec<f64>,
    pub robust_accuracy: Vec<Vec<f64>>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub n_samples: usize,
    /// Accuracy at the first alpha and fraction of the grid.
    pub corner_min_knowledge: f64,
    /// Accuracy at the last alpha and fraction of the grid.
    pub corner_max_knowledge: f64,
    pub alpha_zero_row: Option<Vec<f64>>,
    pub full_knowledge: Option<f64>,
}

impl SweepGrid {
    pub fn cell(&self, alpha: f64, fraction: f64) -> Option<f64> {
        let i = self.alphas.iter().position(|&a| a == alpha)?;
        let j = self.fractions.iter().position(|&f| f == fraction)?;
        Some(self.robust_accuracy[i][j])
    }

    pub fn summary(&self) -> SweepSummary {
        let last = |v: &Vec<f64>| *v.last().expect("non-empty grid");
        SweepSummary {
            n_samples: self.n_samples,
            corner_min_knowledge: self.robust_accuracy[0][0],
            corner_max_knowledge: last(self.robust_accuracy.last().expect("non-empty grid")),
            alpha_zero_row: self
                .alphas
                .iter()
                .position(|&a| a == 0.0)
                .map(|i| self.robust_accuracy[i].clone()),
            full_knowledge: self.cell(1.0, 1.0),
        }
    }

    /// Largest increase of accuracy between neighbouring cells along either
    /// axis; both axes are sorted ascending by construction of the grid.
    pub fn worst_monotonicity_step(&self) -> f64 {
        let acc = &self.robust_accuracy;
        let mut worst = f64::NEG_INFINITY;
        for i in 0..acc.len() {
            for j in 0..acc[i].len() {
                if i + 1 < acc.len() {
                    worst = worst.max(acc[i + 1][j] - acc[i][j]);
                }
                if j + 1 < acc[i].len() {
                    worst = worst.max(acc[i][j + 1] - acc[i][j]);
                }
            }
        }
        worst
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Validation(format!("{other:?}")),
        })?;
        w.write_record(["alpha", "fraction", "robust_accuracy", "n_samples"])?;
        for (i, &a) in self.alphas.iter().enumerate() {
            for (j, &f) in self.fractions.iter().enumerate() {
                w.write_record([
                    a.to_string(),
                    f.to_string(),
                    self.robust_accuracy[i][j].to_string(),
                    self.n_samples.to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Robust accuracy under APGD-CE with the retrieved matrix in the backward,
/// at every grid cell.
#[allow(clippy::too_many_arguments)]
pub fn sweep(
    features: Option<&FrozenFeatures>,
    params: &RopustParams,
    opu: &OpuHandle,
    flags: AblationFlags,
    x: ArrayView2<f64>,
    labels: &[usize],
    grid: &GridSpec,
    cfg: &AttackConfig,
    seeds: RetrievalSeeds,
) -> Result<SweepGrid> {
    grid.validate()?;
    let mut alphas = grid.alphas.clone();
    let mut fractions = grid.fractions.clone();
    alphas.sort_by(f64::total_cmp);
    fractions.sort_by(f64::total_cmp);
    let base = RopustClassifier::new(features, params, opu, flags)?;
    check_dim("sweep labels", x.nrows(), labels.len())?;
    let mut rows = Vec::with_capacity(alphas.len());
    for &a in &alphas {
        let mut row = Vec::with_capacity(fractions.len());
        for &f in &fractions {
            let rm = build_retrieved(opu, a, f, seeds)?;
            let model = base.with_backward(AttackerBackward::Matrix(&rm.u_prime));
            let out = apgd(&model, x, labels, cfg)?;
            let acc = out.robust_accuracy();
            log::info!("event=sweep_cell alpha={a} fraction={f} robust_accuracy={acc:.4}");
            row.push(acc);
        }
        rows.push(row);
    }
    Ok(SweepGrid {
        alphas,
        fractions,
        robust_accuracy: rows,
        n_samples: x.nrows(),
    })
}

/// Two-sided two-proportion z statistic with pooled variance.
pub fn two_proportion_z(p1: f64, n1: usize, p2: f64, n2: usize) -> f64 {
    let (n1f, n2f) = (n1 as f64, n2 as f64);
    let pooled = (p1 * n1f + p2 * n2f) / (n1f + n2f);
    let se = (pooled * (1.0 - pooled) * (1.0 / n1f + 1.0 / n2f)).sqrt();
    if se == 0.0 {
        0.0
    } else {
        (p1 - p2) / se
    }
}
