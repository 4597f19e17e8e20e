use ndarray::{array, Array1, Array2, ArrayView2, Axis};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use ropust::attacks::{
    apgd, apgd_targeted, auto_cascade, budget_violation, fgsm, pgd, run_attack, square_attack,
    transfer_attack, AttackConfig, AttackKind, CascadeReport, Classifier, Differentiable,
    SquareParams, TransferOptions,
};
use ropust::base::{adv_train, AdvTrainConfig, BaseDims, BaseNet, Dense, LinearHead};
use ropust::loss::Loss;
use ropust::rng::stream_rng;
use ropust::Result;

fn linear(w: Array2<f64>, b: Array1<f64>) -> LinearHead {
    LinearHead {
        layer: Dense { w, b },
    }
}

fn random_linear(input: usize, classes: usize, scale: f64, seed: u64) -> LinearHead {
    let mut rng = stream_rng(seed, 0);
    let w = Array2::from_shape_fn((classes, input), |_| rng.random_range(-scale..scale));
    let b = Array1::from_shape_fn(classes, |_| rng.random_range(-0.1..0.1));
    linear(w, b)
}

fn uniform_inputs(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = stream_rng(seed, 1);
    Array2::from_shape_fn((n, d), |_| rng.random_range(0.0..1.0))
}

fn predicted(model: &dyn Classifier, x: ArrayView2<f64>) -> Vec<usize> {
    model.predict(x).unwrap()
}

fn success_rate(s: &[bool]) -> f64 {
    s.iter().filter(|v| **v).count() as f64 / s.len() as f64
}

/// Noisy class prototypes in the unit box.
fn prototype_data(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let (d, classes) = (16, 4);
    let mut proto_rng = stream_rng(77, 2);
    let protos = Array2::from_shape_fn((classes, d), |_| proto_rng.random_range(0.25..0.75));
    let mut rng = stream_rng(seed, 3);
    let noise = Normal::new(0.0f64, 0.12).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let x = Array2::from_shape_fn((n, d), |(i, j)| {
        (protos[[labels[i], j]] + noise.sample(&mut rng)).clamp(0.0, 1.0)
    });
    (x, labels)
}

fn toy_base() -> BaseNet {
    let dims = BaseDims {
        input: 16,
        hidden: 32,
        feature: 16,
        classes: 4,
    };
    let mut net = BaseNet::new(dims, 5).unwrap();
    let (x, y) = prototype_data(2000, 1);
    let cfg = AdvTrainConfig {
        eps: 0.0,
        epochs: 10,
        batch_size: 50,
        seed: 2,
        ..Default::default()
    };
    adv_train(&mut net, x.view(), &y, &cfg).unwrap();
    net
}

#[test]
fn fgsm_with_zero_budget_is_the_identity() {
    let m = random_linear(5, 3, 1.0, 1);
    let x = uniform_inputs(10, 5, 2);
    let y: Vec<usize> = (0..10).map(|i| i % 3).collect();
    assert_eq!(fgsm(&m, x.view(), &y, 0.0).unwrap().x_adv, x);
}

#[test]
fn fgsm_on_a_one_dimensional_logistic_model() {
    let m = linear(array![[-2.0], [2.0]], array![0.0, 0.0]);
    let x = array![[0.5], [0.5], [0.03]];
    let out = fgsm(&m, x.view(), &[1, 0, 1], 0.1).unwrap();
    assert_eq!(out.x_adv, array![[0.5 - 0.1], [0.5 + 0.1], [0.0]]);
}

#[test]
fn one_step_pgd_is_fgsm() {
    let m = random_linear(12, 4, 1.0, 3);
    let x = uniform_inputs(50, 12, 4);
    let y: Vec<usize> = (0..50).map(|i| i % 4).collect();
    let cfg = AttackConfig {
        eps: 0.07,
        n_iter: 1,
        step_size: Some(0.07),
        ..Default::default()
    };
    let p = pgd(&m, x.view(), &y, &cfg).unwrap();
    let f = fgsm(&m, x.view(), &y, 0.07).unwrap();
    assert_eq!(p.x_adv, f.x_adv);
    assert_eq!(p.success, f.success);
    assert_eq!(p.final_loss, f.final_loss);
}

#[test]
fn longer_pgd_never_loses_to_fgsm_on_a_linear_model() {
    let m = random_linear(10, 2, 1.0, 5);
    let x = uniform_inputs(200, 10, 6);
    let y: Vec<usize> = (0..200).map(|i| i % 2).collect();
    let cfg = AttackConfig {
        eps: 0.1,
        n_iter: 20,
        ..Default::default()
    };
    let p = pgd(&m, x.view(), &y, &cfg).unwrap();
    let f = fgsm(&m, x.view(), &y, 0.1).unwrap();
    for i in 0..200 {
        assert!(p.final_loss[i] >= f.final_loss[i] - 1e-12, "sample {i}");
    }
}

/// Momentum sign-gradient ascent without step halving, stopping at the first
/// misclassified iterate and otherwise returning the best-loss iterate.
fn momentum_pgd_oracle(m: &LinearHead, x: &[f64], y: usize, cfg: &AttackConfig) -> Vec<f64> {
    let eval = |v: &[f64]| {
        let row = Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
        let g = m
            .loss_gradient(row.view(), &[y], &[Loss::CrossEntropy])
            .unwrap();
        let mis = ropust::loss::argmax(g.logits.row(0)) != y;
        (g.loss[0], g.grad.row(0).to_vec(), mis)
    };
    let sign = |v: f64| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    };
    let proj = |v: f64, x0: f64| v.max(x0 - cfg.eps).min(x0 + cfg.eps).clamp(0.0, 1.0);
    let eta = cfg.apgd.initial_step * cfg.eps;
    let (alpha, d) = (cfg.apgd.alpha, x.len());
    let (mut cur, mut prev) = (x.to_vec(), x.to_vec());
    let (mut loss, mut grad, _) = eval(&cur);
    let mut best = (loss, cur.clone());
    for k in 0..cfg.n_iter {
        let next: Vec<f64> = (0..d)
            .map(|j| {
                let z = proj(cur[j] + eta * sign(grad[j]), x[j]);
                let v = if k == 0 {
                    z
                } else {
                    cur[j] + alpha * (z - cur[j]) + (1.0 - alpha) * (cur[j] - prev[j])
                };
                proj(v, x[j])
            })
            .collect();
        prev = std::mem::replace(&mut cur, next);
        let mis;
        (loss, grad, mis) = eval(&cur);
        if mis {
            return cur;
        }
        if loss > best.0 {
            best = (loss, cur.clone());
        }
    }
    best.1
}

#[test]
fn apgd_without_halving_matches_momentum_pgd() {
    // rho = 0: the improvement condition holds at every checkpoint
    let m = random_linear(6, 3, 2.0, 7);
    let x = uniform_inputs(40, 6, 8);
    let y = predicted(&m, x.view());
    let mut cfg = AttackConfig {
        eps: 0.05,
        n_iter: 30,
        ..Default::default()
    };
    cfg.apgd.rho = 0.0;
    let out = apgd(&m, x.view(), &y, &cfg).unwrap();
    for i in 0..40 {
        let want = momentum_pgd_oracle(&m, x.row(i).as_slice().unwrap(), y[i], &cfg);
        for (a, b) in out.x_adv.row(i).iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12, "sample {i}: {a} vs {b}");
        }
    }
}

#[test]
fn flat_model_leaves_inputs_unchanged() {
    let m = linear(Array2::zeros((3, 5)), Array1::zeros(3));
    let x = uniform_inputs(8, 5, 9);
    let y = vec![0usize; 8];
    let cfg = AttackConfig::default();
    for out in [
        apgd(&m, x.view(), &y, &cfg).unwrap(),
        pgd(&m, x.view(), &y, &cfg).unwrap(),
        fgsm(&m, x.view(), &y, 0.1).unwrap(),
    ] {
        assert_eq!(out.x_adv, x);
        assert!(out.success.iter().all(|s| !s));
    }
}

#[test]
fn targeted_apgd_needs_four_classes() {
    let m = random_linear(4, 3, 1.0, 10);
    let x = uniform_inputs(2, 4, 11);
    assert!(apgd_targeted(&m, x.view(), &[0, 1], &AttackConfig::default()).is_err());
}

struct Constant {
    input: usize,
    classes: usize,
}

impl Classifier for Constant {
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn input_dim(&self) -> usize {
        self.input
    }
    fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(Array2::from_shape_fn(
            (x.nrows(), self.classes),
            |(_, c)| {
                if c == 0 {
                    1.0
                } else {
                    0.0
                }
            },
        ))
    }
}

#[test]
fn square_attack_runs_on_a_logits_only_model() {
    let m = Constant {
        input: 9,
        classes: 3,
    };
    let x = uniform_inputs(4, 9, 12);
    let out = square_attack(&m, x.view(), &[0, 1, 0, 2], &AttackConfig::default()).unwrap();
    assert_eq!(out.success, vec![false, true, false, true]);
}

#[test]
fn square_attack_without_queries_returns_the_input() {
    let m = random_linear(16, 4, 1.0, 13);
    let x = uniform_inputs(5, 16, 14);
    let cfg = AttackConfig {
        square: SquareParams {
            n_queries: 0,
            ..Default::default()
        },
        ..Default::default()
    };
    assert_eq!(
        square_attack(&m, x.view(), &[0, 1, 2, 3, 0], &cfg)
            .unwrap()
            .x_adv,
        x
    );
}

#[test]
fn square_objective_never_increases() {
    let m = random_linear(16, 4, 1.0, 15);
    let x = uniform_inputs(30, 16, 16);
    let y = predicted(&m, x.view());
    let cfg = AttackConfig {
        eps: 0.05,
        square: SquareParams {
            n_queries: 300,
            record_trace: true,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = square_attack(&m, x.view(), &y, &cfg).unwrap();
    for trace in out.objective_trace.unwrap() {
        assert!(!trace.is_empty());
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
    }
}

#[test]
fn square_attack_tracks_fgsm_on_a_linear_model() {
    let m = random_linear(16, 2, 1.0, 17);
    let x = uniform_inputs(500, 16, 18);
    let y = predicted(&m, x.view());
    let eps = 0.1;
    let f = fgsm(&m, x.view(), &y, eps).unwrap();
    let s = square_attack(
        &m,
        x.view(),
        &y,
        &AttackConfig {
            eps,
            ..Default::default()
        },
    )
    .unwrap();
    let (fr, sr) = (success_rate(&f.success), success_rate(&s.success));
    assert!(fr > 0.05 && fr < 0.95, "FGSM success {fr} is uninformative");
    assert!((fr - sr).abs() <= 0.05, "FGSM {fr} vs Square {sr}");
}

#[test]
fn apgd_is_not_materially_worse_than_pgd_on_the_toy_base() {
    let net = toy_base();
    let (x, y) = prototype_data(500, 20);
    let cfg = AttackConfig {
        eps: 0.1,
        n_iter: 100,
        ..Default::default()
    };
    let a = success_rate(&apgd(&net, x.view(), &y, &cfg).unwrap().success);
    let p = success_rate(&pgd(&net, x.view(), &y, &cfg).unwrap().success);
    assert!(p > 0.05 && p < 0.95, "PGD success {p} is uninformative");
    assert!(a >= p - 0.01, "APGD-CE {a} vs PGD-100 {p}");
}

fn cascade_cfg() -> AttackConfig {
    AttackConfig {
        eps: 0.1,
        n_iter: 20,
        seed: 21,
        square: SquareParams {
            n_queries: 200,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn check_bookkeeping(r: &CascadeReport) {
    let survivors = r.robust.iter().filter(|v| **v).count();
    assert_eq!(r.total_successes() + survivors, r.n_samples);
    for w in r.stages.windows(2) {
        assert_eq!(w[1].attacked, w[0].attacked - w[0].successes);
    }
    let mut seen = std::collections::HashSet::new();
    for rec in &r.records {
        assert!(
            !seen.contains(&rec.sample_id),
            "sample {} attacked after success",
            rec.sample_id
        );
        if rec.success {
            seen.insert(rec.sample_id);
        }
    }
}

#[test]
fn cascade_bookkeeping_and_union_bound() {
    let net = toy_base();
    let (x, y) = prototype_data(200, 22);
    let ids: Vec<usize> = (0..200).collect();
    let cfg = cascade_cfg();
    let stages = AttackKind::cascade();
    let r = auto_cascade(&net, x.view(), &y, &ids, &cfg, &stages).unwrap();
    check_bookkeeping(&r);
    assert!(budget_violation(r.x_adv.view(), x.view(), cfg.eps) <= 1e-9);
    for kind in stages {
        let single = run_attack(kind, &net, x.view(), &y, &ids, &cfg).unwrap();
        assert!(
            r.robust_accuracy() <= single.robust_accuracy(),
            "{}",
            kind.name()
        );
    }
}

#[test]
fn cascade_skips_attacks_when_nothing_is_correct() {
    let m = linear(Array2::zeros((4, 6)), array![1.0, 0.0, 0.0, 0.0]);
    let x = uniform_inputs(10, 6, 23);
    let y = vec![2usize; 10];
    let ids: Vec<usize> = (0..10).collect();
    let r = auto_cascade(
        &m,
        x.view(),
        &y,
        &ids,
        &cascade_cfg(),
        &AttackKind::cascade(),
    )
    .unwrap();
    assert_eq!(r.robust_accuracy(), 0.0);
    assert_eq!(r.stages[0].successes, 10);
    assert!(r.stages[1..].iter().all(|s| s.attacked == 0));
    assert!(r.records.iter().all(|rec| rec.stage == "clean"));
}

#[test]
fn identity_transfer_equals_the_direct_cascade() {
    let net = toy_base();
    let (x, y) = prototype_data(100, 24);
    let ids: Vec<usize> = (0..100).collect();
    let cfg = cascade_cfg();
    let stages = AttackKind::cascade();
    let direct = auto_cascade(&net, x.view(), &y, &ids, &cfg, &stages).unwrap();
    let t = transfer_attack(
        &net,
        &net,
        x.view(),
        &y,
        &ids,
        &cfg,
        &stages,
        TransferOptions::default(),
    )
    .unwrap();
    assert_eq!(t.robust_accuracy(), direct.robust_accuracy());
    assert_eq!(t.target_correct, direct.robust);
}

#[test]
fn transfer_to_a_constant_model_gives_the_class_prior() {
    let net = toy_base();
    let (x, y) = prototype_data(100, 25);
    let ids: Vec<usize> = (0..100).collect();
    let target = Constant {
        input: 16,
        classes: 4,
    };
    let t = transfer_attack(
        &net,
        &target,
        x.view(),
        &y,
        &ids,
        &cascade_cfg(),
        &AttackKind::cascade(),
        TransferOptions::default(),
    )
    .unwrap();
    let prior = y.iter().filter(|&&c| c == 0).count() as f64 / 100.0;
    assert_eq!(t.robust_accuracy(), prior);
}

#[test]
fn cascade_is_deterministic_and_chunk_invariant() {
    let net = toy_base();
    let (x, y) = prototype_data(60, 26);
    let ids: Vec<usize> = (0..60).collect();
    let cfg = AttackConfig {
        random_start: true,
        ..cascade_cfg()
    };
    let stages = AttackKind::cascade();
    let whole = auto_cascade(&net, x.view(), &y, &ids, &cfg, &stages).unwrap();
    let again = auto_cascade(&net, x.view(), &y, &ids, &cfg, &stages).unwrap();
    assert_eq!(whole.x_adv, again.x_adv);
    assert_eq!(whole.records, again.records);
    let parts = [0..25, 25..60]
        .into_iter()
        .map(|r| {
            let idx: Vec<usize> = r.collect();
            let ys: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
            auto_cascade(
                &net,
                x.select(Axis(0), &idx).view(),
                &ys,
                &idx,
                &cfg,
                &stages,
            )
            .unwrap()
        })
        .collect();
    let joined = CascadeReport::concat(parts).unwrap();
    assert_eq!(joined.robust, whole.robust);
    assert_eq!(joined.x_adv, whole.x_adv);
    assert_eq!(joined.stages, whole.stages);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn every_attack_respects_the_budget(seed in any::<u64>(), eps in 0.01f64..0.3) {
        let m = random_linear(9, 4, 3.0, seed);
        let x = uniform_inputs(6, 9, seed ^ 1);
        let y: Vec<usize> = (0..6).map(|i| (i + seed as usize) % 4).collect();
        let ids: Vec<usize> = (0..6).collect();
        let cfg = AttackConfig {
            eps,
            n_iter: 10,
            random_start: true,
            seed,
            square: SquareParams { n_queries: 50, ..Default::default() },
            ..Default::default()
        };
        for kind in [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::ApgdCe, AttackKind::ApgdT, AttackKind::Square] {
            let out = run_attack(kind, &m, x.view(), &y, &ids, &cfg).unwrap();
            prop_assert!(budget_violation(out.x_adv.view(), x.view(), eps) <= 1e-9, "{}", kind.name());
        }
    }
}
