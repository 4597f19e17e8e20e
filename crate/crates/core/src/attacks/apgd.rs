//! Auto-PGD: momentum sign-gradient ascent whose step halves at checkpoints
//! where too few steps improved the loss, restarting from the best iterate.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{
    check_batch, default_ids, margins, misclassified, project, random_start, sign, AttackConfig,
    AttackOutcome, Classifier, Differentiable,
};
use crate::error::{Error, Result};
use crate::loss::Loss;

/// Checkpoint iterations `w_1 < w_2 < ... <= n_iter`: `p_0 = 0`,
/// `p_1 = 0.22`, `p_{j+1} = p_j + max(p_j - p_{j-1} - 0.03, 0.06)`.
pub fn checkpoints(n_iter: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let (mut prev, mut cur) = (0.0f64, 0.22f64);
    while cur <= 1.0 {
        let w = (cur * n_iter as f64 - 1e-9).ceil() as usize;
        if w >= 1 && out.last().is_none_or(|&l| w > l) {
            out.push(w);
        }
        let next = cur + (cur - prev - 0.03).max(0.06);
        prev = cur;
        cur = next;
    }
    out
}

struct Run {
    x_adv: Array2<f64>,
    success: Vec<bool>,
    best_loss: Array1<f64>,
    queries: Vec<usize>,
}

/// One APGD run over the samples in `active` (rows of `x`).
#[allow(clippy::too_many_arguments)]
fn apgd_run<M: Differentiable + ?Sized>(
    model: &M,
    schedule: Option<&dyn Classifier>,
    x: ArrayView2<f64>,
    labels: &[usize],
    losses: &[Loss],
    start: Array2<f64>,
    cfg: &AttackConfig,
) -> Result<Run> {
    let n = x.nrows();
    let p = cfg.apgd;
    let checks = checkpoints(cfg.n_iter);
    let mut eta = Array1::from_elem(n, p.initial_step * cfg.eps);
    let mut cur = start;
    let eval = model.loss_gradient(cur.view(), labels, losses)?;
    let mut grad = eval.grad;
    let mut loss = schedule_loss(schedule, cur.view(), labels, eval.loss)?;
    let mut prev = cur.clone();
    let mut best_x = cur.clone();
    let mut best_loss = loss.clone();
    let mut best_grad = grad.clone();
    let mut success = misclassified(eval.logits.view(), labels);
    let mut success_x = cur.clone();
    let mut queries = vec![1usize; n];
    let mut improved = vec![0usize; n];
    let (mut last_check, mut next_check) = (0usize, 0usize);

    for k in 0..cfg.n_iter {
        let active: Vec<usize> = (0..n).filter(|&i| !success[i]).collect();
        if active.is_empty() {
            break;
        }
        let mut next = cur.select(Axis(0), &active);
        for (r, &i) in active.iter().enumerate() {
            let mut row = next.row_mut(r);
            for j in 0..row.len() {
                let xk = cur[[i, j]];
                let z = (xk + eta[i] * sign(grad[[i, j]]))
                    .max(x[[i, j]] - cfg.eps)
                    .min(x[[i, j]] + cfg.eps)
                    .clamp(0.0, 1.0);
                row[j] = if k == 0 {
                    z
                } else {
                    xk + p.alpha * (z - xk) + (1.0 - p.alpha) * (xk - prev[[i, j]])
                };
            }
        }
        let x_act = x.select(Axis(0), &active);
        project(&mut next, x_act.view(), cfg.eps);
        let lab: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
        let los: Vec<Loss> = active.iter().map(|&i| losses[i]).collect();
        let ev = model.loss_gradient(next.view(), &lab, &los)?;
        let new_loss = schedule_loss(schedule, next.view(), &lab, ev.loss.clone())?;
        let mis = misclassified(ev.logits.view(), &lab);
        for (r, &i) in active.iter().enumerate() {
            queries[i] += 1;
            prev.row_mut(i).assign(&cur.row(i));
            cur.row_mut(i).assign(&next.row(r));
            grad.row_mut(i).assign(&ev.grad.row(r));
            if new_loss[r] > loss[i] {
                improved[i] += 1;
            }
            loss[i] = new_loss[r];
            if new_loss[r] > best_loss[i] {
                best_loss[i] = new_loss[r];
                best_x.row_mut(i).assign(&next.row(r));
                best_grad.row_mut(i).assign(&ev.grad.row(r));
            }
            if mis[r] {
                success[i] = true;
                success_x.row_mut(i).assign(&next.row(r));
            }
        }
        if next_check < checks.len() && k + 1 == checks[next_check] {
            let window = (checks[next_check] - last_check) as f64;
            for i in 0..n {
                if !success[i] && (improved[i] as f64) < p.rho * window {
                    eta[i] /= 2.0;
                    cur.row_mut(i).assign(&best_x.row(i));
                    grad.row_mut(i).assign(&best_grad.row(i));
                    loss[i] = best_loss[i];
                }
                improved[i] = 0;
            }
            last_check = checks[next_check];
            next_check += 1;
        }
    }
    let mut x_adv = best_x;
    for i in 0..n {
        if success[i] {
            x_adv.row_mut(i).assign(&success_x.row(i));
        }
    }
    Ok(Run {
        x_adv,
        success,
        best_loss,
        queries,
    })
}

fn schedule_loss(
    schedule: Option<&dyn Classifier>,
    x: ArrayView2<f64>,
    labels: &[usize],
    model_loss: Array1<f64>,
) -> Result<Array1<f64>> {
    match schedule {
        None => Ok(model_loss),
        Some(m) => {
            let logits = m.logits(x)?;
            let ce = vec![Loss::CrossEntropy; labels.len()];
            Ok(crate::loss::batch_loss_and_grad(logits.view(), labels, &ce)?.0)
        }
    }
}

fn finish<M: Classifier + ?Sized>(
    model: &M,
    x_adv: Array2<f64>,
    labels: &[usize],
    final_loss: Array1<f64>,
    queries: Vec<usize>,
) -> Result<AttackOutcome> {
    let logits = model.logits(x_adv.view())?;
    Ok(AttackOutcome {
        success: misclassified(logits.view(), labels),
        final_margin: margins(logits.view(), labels),
        final_loss,
        x_adv,
        queries,
        objective_trace: None,
    })
}

/// APGD with the cross-entropy loss.
pub fn apgd<M: Differentiable + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    apgd_indexed(model, x, labels, &default_ids(x.nrows()), cfg)
}

pub fn apgd_indexed<M: Differentiable + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    apgd_scheduled(model, None, x, labels, ids, cfg)
}

/// APGD-CE whose step schedule follows the cross-entropy of `schedule`
/// instead of the attacked model (transfer variant).
pub(crate) fn apgd_scheduled<M: Differentiable + ?Sized>(
    model: &M,
    schedule: Option<&dyn Classifier>,
    x: ArrayView2<f64>,
    labels: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    check_batch(model, x, labels, ids)?;
    let n = x.nrows();
    let ce = vec![Loss::CrossEntropy; n];
    let mut x_adv = x.to_owned();
    let mut success = vec![false; n];
    let mut best = Array1::from_elem(n, f64::NEG_INFINITY);
    let mut queries = vec![0usize; n];
    for restart in 0..cfg.n_restarts {
        let todo: Vec<usize> = (0..n).filter(|&i| !success[i]).collect();
        if todo.is_empty() {
            break;
        }
        let xs = x.select(Axis(0), &todo);
        let ys: Vec<usize> = todo.iter().map(|&i| labels[i]).collect();
        let is: Vec<usize> = todo.iter().map(|&i| ids[i]).collect();
        let start = if restart > 0 || cfg.random_start {
            random_start(xs.view(), &is, cfg.eps, cfg.seed, restart)
        } else {
            xs.clone()
        };
        let ls: Vec<Loss> = todo.iter().map(|&i| ce[i]).collect();
        let run = apgd_run(model, schedule, xs.view(), &ys, &ls, start, cfg)?;
        merge(
            &mut x_adv,
            &mut success,
            &mut best,
            &mut queries,
            &todo,
            run,
        );
    }
    finish(model, x_adv, labels, best, queries)
}

fn merge(
    x_adv: &mut Array2<f64>,
    success: &mut [bool],
    best: &mut Array1<f64>,
    queries: &mut [usize],
    todo: &[usize],
    run: Run,
) {
    for (r, &i) in todo.iter().enumerate() {
        queries[i] += run.queries[r];
        if run.success[r] || run.best_loss[r] > best[i] {
            x_adv.row_mut(i).assign(&run.x_adv.row(r));
            best[i] = run.best_loss[r];
        }
        success[i] |= run.success[r];
    }
}

/// APGD with the targeted logit-ratio loss, looping over the top
/// `min(n_targets, classes - 1)` runner-up classes of the clean input.
pub fn apgd_targeted<M: Differentiable + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    apgd_targeted_indexed(model, x, labels, &default_ids(x.nrows()), cfg)
}

pub fn apgd_targeted_indexed<M: Differentiable + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    check_batch(model, x, labels, ids)?;
    let classes = model.num_classes();
    if classes < 4 {
        return Err(Error::invalid(format!(
            "targeted logit-ratio loss needs at least 4 classes, model has {classes}; use APGD-CE"
        )));
    }
    let n = x.nrows();
    let clean = model.logits(x)?;
    let order: Vec<Vec<usize>> = clean
        .axis_iter(Axis(0))
        .map(|r| {
            let mut idx: Vec<usize> = (0..classes).collect();
            idx.sort_by(|&a, &b| r[b].total_cmp(&r[a]));
            idx
        })
        .collect();
    let mut x_adv = x.to_owned();
    let mut success = misclassified(clean.view(), labels);
    let mut best = Array1::from_elem(n, f64::NEG_INFINITY);
    let mut queries = vec![1usize; n];
    let n_targets = cfg.apgd.n_targets.min(classes - 1);
    for t in 1..=n_targets {
        for restart in 0..cfg.n_restarts {
            let todo: Vec<usize> = (0..n).filter(|&i| !success[i]).collect();
            if todo.is_empty() {
                break;
            }
            let xs = x.select(Axis(0), &todo);
            let ys: Vec<usize> = todo.iter().map(|&i| labels[i]).collect();
            let is: Vec<usize> = todo.iter().map(|&i| ids[i]).collect();
            let ls: Vec<Loss> = todo
                .iter()
                .map(|&i| {
                    // runner-up classes, skipping the label wherever it sits
                    let target = order[i]
                        .iter()
                        .copied()
                        .filter(|&c| c != labels[i])
                        .nth(t - 1)
                        .expect("enough classes");
                    Loss::TargetedDlr { target }
                })
                .collect();
            let start = if restart > 0 || cfg.random_start {
                random_start(
                    xs.view(),
                    &is,
                    cfg.eps,
                    cfg.seed ^ (t as u64) << 32,
                    restart,
                )
            } else {
                xs.clone()
            };
            let run = apgd_run(model, None, xs.view(), &ys, &ls, start, cfg)?;
            merge(
                &mut x_adv,
                &mut success,
                &mut best,
                &mut queries,
                &todo,
                run,
            );
        }
    }
    finish(model, x_adv, labels, best, queries)
}
