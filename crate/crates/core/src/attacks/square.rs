//! Square attack: score-based random search over square patches set to the
//! corners of the l-infinity ball.

use ndarray::{Array1, ArrayView2, Axis};
use rand::seq::IndexedRandom;
use rand::Rng;

use super::{
    check_batch, default_ids, margins, misclassified, AttackConfig, AttackOutcome, Classifier,
};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, stream_rng, StreamRng};

/// Patch fraction at iteration `it` of `n_iters`: `p_init` halves at the
/// rescaled iterations 10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000 of 10000.
pub fn p_selection(p_init: f64, it: usize, n_iters: usize) -> f64 {
    let it = if n_iters == 0 {
        0
    } else {
        (it as f64 / n_iters as f64 * 10000.0) as usize
    };
    let halvings = match it {
        0..=10 => 0,
        11..=50 => 1,
        51..=200 => 2,
        201..=500 => 3,
        501..=1000 => 4,
        1001..=2000 => 5,
        2001..=4000 => 6,
        4001..=6000 => 7,
        6001..=8000 => 8,
        8001..=10000 => 9,
        _ => 0,
    };
    p_init / f64::from(1u32 << halvings)
}

fn image_shape(cfg: &AttackConfig, d: usize) -> Result<[usize; 3]> {
    if let Some(shape) = cfg.square.image_shape {
        if shape.iter().product::<usize>() != d || shape.contains(&0) {
            return Err(Error::Dimension {
                what: "square attack image shape",
                expected: d,
                got: shape.iter().product(),
            });
        }
        return Ok(shape);
    }
    let side = (d as f64).sqrt().round() as usize;
    Ok(if side * side == d {
        [1, side, side]
    } else {
        [1, 1, d]
    })
}

pub fn square_attack<M: Classifier + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    square_attack_indexed(model, x, labels, &default_ids(x.nrows()), cfg)
}

pub fn square_attack_indexed<M: Classifier + ?Sized>(
    model: &M,
    x: ArrayView2<f64>,
    labels: &[usize],
    ids: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackOutcome> {
    cfg.validate()?;
    check_batch(model, x, labels, ids)?;
    let sq = cfg.square;
    if !(sq.p_init > 0.0 && sq.p_init <= 1.0) {
        return Err(Error::invalid(format!(
            "p_init must lie in (0, 1], got {}",
            sq.p_init
        )));
    }
    let n = x.nrows();
    let d = x.ncols();
    let [c, h, w] = image_shape(cfg, d)?;
    let eps = cfg.eps;
    let trace_on = sq.record_trace;

    if sq.n_queries == 0 || n == 0 {
        let logits = model.logits(x)?;
        let m = margins(logits.view(), labels);
        return Ok(AttackOutcome {
            x_adv: x.to_owned(),
            success: misclassified(logits.view(), labels),
            queries: vec![0; n],
            final_loss: m.clone(),
            final_margin: m,
            objective_trace: trace_on.then(|| vec![Vec::new(); n]),
        });
    }

    let seed = derive_seed(cfg.seed, "square");
    let mut rngs: Vec<StreamRng> = ids.iter().map(|&id| stream_rng(seed, id as u64)).collect();
    let at = |ch: usize, r: usize, col: usize| (ch * h + r) * w + col;
    let lo = x.mapv(|v| (v - eps).max(0.0));
    let hi = x.mapv(|v| (v + eps).min(1.0));
    let signs = [-eps, eps];

    // vertical stripes: one sign per (channel, column)
    let mut best = x.to_owned();
    for i in 0..n {
        for ch in 0..c {
            for col in 0..w {
                let s = *signs.choose(&mut rngs[i]).expect("two signs");
                for r in 0..h {
                    let j = at(ch, r, col);
                    best[[i, j]] = (x[[i, j]] + s).clamp(0.0, 1.0);
                }
            }
        }
    }
    let logits = model.logits(best.view())?;
    let mut margin = margins(logits.view(), labels);
    let mut fooled = misclassified(logits.view(), labels);
    let mut queries = vec![1usize; n];
    let mut trace: Vec<Vec<f64>> = if trace_on {
        margin.iter().map(|&m| vec![m]).collect()
    } else {
        Vec::new()
    };

    let max_side = h.min(w).saturating_sub(1).max(1);
    for it in 1..sq.n_queries {
        let active: Vec<usize> = (0..n).filter(|&i| !fooled[i]).collect();
        if active.is_empty() {
            break;
        }
        let p = p_selection(sq.p_init, it, sq.n_queries);
        let side = ((p * d as f64 / c as f64).sqrt().round() as usize).clamp(1, max_side);
        let mut cand = best.select(Axis(0), &active);
        for (r, &i) in active.iter().enumerate() {
            let rng = &mut rngs[i];
            let top = rng.random_range(0..=h - side);
            let left = rng.random_range(0..=w - side);
            // resample the patch signs until the window actually changes
            for _ in 0..64 {
                let mut changed = false;
                for ch in 0..c {
                    let s = *signs.choose(rng).expect("two signs");
                    for rr in top..top + side {
                        for cc in left..left + side {
                            let j = at(ch, rr, cc);
                            let v = if s > 0.0 { hi[[i, j]] } else { lo[[i, j]] };
                            changed |= (v - best[[i, j]]).abs() >= 1e-7;
                            cand[[r, j]] = v;
                        }
                    }
                }
                if changed {
                    break;
                }
            }
        }
        let logits = model.logits(cand.view())?;
        let lab: Vec<usize> = active.iter().map(|&i| labels[i]).collect();
        let m = margins(logits.view(), &lab);
        let mis = misclassified(logits.view(), &lab);
        for (r, &i) in active.iter().enumerate() {
            queries[i] += 1;
            if m[r] < margin[i] {
                margin[i] = m[r];
                fooled[i] = mis[r];
                best.row_mut(i).assign(&cand.row(r));
            }
        }
        if trace_on {
            for &i in &active {
                trace[i].push(margin[i]);
            }
        }
    }

    let logits = model.logits(best.view())?;
    let final_margin: Array1<f64> = margins(logits.view(), labels);
    Ok(AttackOutcome {
        success: misclassified(logits.view(), labels),
        final_loss: final_margin.clone(),
        final_margin,
        x_adv: best,
        queries,
        objective_trace: trace_on.then_some(trace),
    })
}
