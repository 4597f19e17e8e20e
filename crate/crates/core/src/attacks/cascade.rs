//! Sequential attack cascade and transfer evaluation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::apgd::apgd_scheduled;
use super::{
    check_batch, margins, misclassified, run_attack, AttackConfig, AttackKind, Classifier,
    Differentiable,
};
use crate::error::{check_dim, Result};

/// Outcome for one sample at one stage. Stage `"clean"` marks samples that
/// were misclassified before any attack ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRecord {
    pub stage: String,
    pub sample_id: usize,
    pub success: bool,
    pub iterations: usize,
    pub final_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: String,
    pub attacked: usize,
    pub successes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CascadeReport {
    pub n_samples: usize,
    pub clean_correct: usize,
    /// Survivors of every stage.
    pub robust: Vec<bool>,
    /// Stage 0 (`"clean"`) followed by one entry per attack.
    pub stages: Vec<StageSummary>,
    pub records: Vec<AttackRecord>,
    /// The successful perturbation, or the last stage's attempt for survivors.
    pub x_adv: Array2<f64>,
}

impl CascadeReport {
    pub fn clean_accuracy(&self) -> f64 {
        ratio(self.clean_correct, self.n_samples)
    }

    pub fn robust_accuracy(&self) -> f64 {
        ratio(self.robust.iter().filter(|r| **r).count(), self.n_samples)
    }

    pub fn total_successes(&self) -> usize {
        self.stages.iter().map(|s| s.successes).sum()
    }

    /// Joins reports of consecutive chunks run with the same stages.
    pub fn concat(parts: Vec<CascadeReport>) -> Result<CascadeReport> {
        let mut iter = parts.into_iter();
        let Some(mut out) = iter.next() else {
            return Err(crate::error::Error::invalid("no cascade reports to join"));
        };
        for p in iter {
            check_dim("cascade stage count", out.stages.len(), p.stages.len())?;
            for (a, b) in out.stages.iter_mut().zip(&p.stages) {
                a.attacked += b.attacked;
                a.successes += b.successes;
            }
            out.n_samples += p.n_samples;
            out.clean_correct += p.clean_correct;
            out.robust.extend(p.robust);
            out.records.extend(p.records);
            out.x_adv
                .append(Axis(0), p.x_adv.view())
                .map_err(|e| crate::error::Error::invalid(e.to_string()))?;
        }
        Ok(out)
    }
}

fn ratio(k: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        k as f64 / n as f64
    }
}

/// Runs `stages` in order; each stage only sees the samples every previous
/// stage failed on. Misclassified clean samples count as stage-0 successes.
pub fn auto_cascade<M: Differentiable + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
    stages: &[AttackKind],
) -> Result<CascadeReport> {
    run_cascade(model, None, None, x, labels, ids, cfg, stages)
}

#[allow(clippy::too_many_arguments)]
fn run_cascade<M: Differentiable + ?Sized>(
    model: &M,
    judge: Option<&dyn Classifier>,
    schedule: Option<&dyn Classifier>,
    x: ArrayView2<f64>,
    labels: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
    stages: &[AttackKind],
) -> Result<CascadeReport> {
    cfg.validate()?;
    check_batch(model, x, labels, ids)?;
    let n = x.nrows();
    let clean = model.logits(x)?;
    let clean_mis = misclassified(clean.view(), labels);
    let clean_margin = margins(clean.view(), labels);
    let mut alive: Vec<bool> = clean_mis.iter().map(|m| !m).collect();
    let mut records = Vec::new();
    for i in (0..n).filter(|&i| clean_mis[i]) {
        records.push(AttackRecord {
            stage: "clean".into(),
            sample_id: ids[i],
            success: true,
            iterations: 0,
            final_margin: clean_margin[i],
        });
    }
    let clean_correct = alive.iter().filter(|a| **a).count();
    let mut summaries = vec![StageSummary {
        stage: "clean".into(),
        attacked: n,
        successes: n - clean_correct,
    }];
    let mut x_adv = x.to_owned();

    for &kind in stages {
        let todo: Vec<usize> = (0..n).filter(|&i| alive[i]).collect();
        let mut summary = StageSummary {
            stage: kind.name().into(),
            attacked: todo.len(),
            successes: 0,
        };
        if !todo.is_empty() {
            let xs = x.select(Axis(0), &todo);
            let ys: Vec<usize> = todo.iter().map(|&i| labels[i]).collect();
            let is: Vec<usize> = todo.iter().map(|&i| ids[i]).collect();
            let out = match (kind, schedule) {
                (AttackKind::ApgdCe, Some(s)) => {
                    apgd_scheduled(model, Some(s), xs.view(), &ys, &is, cfg)?
                }
                _ => run_attack(kind, model, xs.view(), &ys, &is, cfg)?,
            };
            let success = match judge {
                None => out.success.clone(),
                Some(j) => misclassified(j.logits(out.x_adv.view())?.view(), &ys),
            };
            for (r, &i) in todo.iter().enumerate() {
                x_adv.row_mut(i).assign(&out.x_adv.row(r));
                if success[r] {
                    alive[i] = false;
                    summary.successes += 1;
                }
                records.push(AttackRecord {
                    stage: kind.name().into(),
                    sample_id: ids[i],
                    success: success[r],
                    iterations: out.queries[r],
                    final_margin: out.final_margin[r],
                });
            }
        }
        summaries.push(summary);
    }
    Ok(CascadeReport {
        n_samples: n,
        clean_correct,
        robust: alive,
        stages: summaries,
        records,
        x_adv,
    })
}

/// Optional transfer variants, both driven by the target model.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferOptions {
    /// Drop a sample from later stages once the target misclassifies it.
    pub target_removal: bool,
    /// Drive the APGD-CE step schedule with the target's cross-entropy.
    pub target_schedule: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransferReport {
    pub source: CascadeReport,
    /// Target correct on the transferred inputs.
    pub target_correct: Vec<bool>,
    pub target_margin: Array1<f64>,
}

impl TransferReport {
    pub fn robust_accuracy(&self) -> f64 {
        ratio(
            self.target_correct.iter().filter(|c| **c).count(),
            self.target_correct.len(),
        )
    }
}

/// Crafts adversarial inputs with the cascade on `source` and evaluates
/// `target` on them.
#[allow(clippy::too_many_arguments)]
pub fn transfer_attack<S: Differentiable + ?Sized, T: Classifier + ?Sized>(
    source: &S,
    target: &T,
    x: ArrayView2<f64>,
    labels: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
    stages: &[AttackKind],
    opts: TransferOptions,
) -> Result<TransferReport> {
    check_dim(
        "transfer target input width",
        source.input_dim(),
        target.input_dim(),
    )?;
    check_dim(
        "transfer target classes",
        source.num_classes(),
        target.num_classes(),
    )?;
    let target_dyn = DynClassifier(target);
    let judge = opts
        .target_removal
        .then_some(&target_dyn as &dyn Classifier);
    let schedule = opts
        .target_schedule
        .then_some(&target_dyn as &dyn Classifier);
    let report = run_cascade(source, judge, schedule, x, labels, ids, cfg, stages)?;
    let logits = target.logits(report.x_adv.view())?;
    let target_correct = misclassified(logits.view(), labels)
        .into_iter()
        .map(|m| !m)
        .collect();
    Ok(TransferReport {
        target_margin: margins(logits.view(), labels),
        target_correct,
        source: report,
    })
}

struct DynClassifier<'a, T: ?Sized>(&'a T);

impl<T: Classifier + ?Sized> Classifier for DynClassifier<'_, T> {
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }
    fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.0.logits(x)
    }
}
