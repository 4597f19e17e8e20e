use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use ropust::attacks::{pgd, AttackConfig, Classifier};
use ropust::base::{
    adv_train, freeze, retrain_plain_classifier, AdvTrainConfig, BaseDims, BaseNet, DefenseFree,
    HeadTrainConfig,
};
use ropust::dfa::{train, TrainConfig};
use ropust::model::{binarize, AblationFlags, RopustDims, RopustParams};
use ropust::opu::opu_new;
use ropust::rng::stream_rng;

const DIMS: BaseDims = BaseDims {
    input: 16,
    hidden: 32,
    feature: 16,
    classes: 4,
};

fn prototype_data(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
    let mut proto_rng = stream_rng(77, 2);
    let protos = Array2::from_shape_fn((4, 16), |_| proto_rng.random_range(0.25..0.75));
    let mut rng = stream_rng(seed, 3);
    let noise = Normal::new(0.0f64, 0.12).unwrap();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
    let x = Array2::from_shape_fn((n, 16), |(i, j)| {
        (protos[[labels[i], j]] + noise.sample(&mut rng)).clamp(0.0, 1.0)
    });
    (x, labels)
}

fn trained(cfg: &AdvTrainConfig) -> BaseNet {
    let mut net = BaseNet::new(DIMS, 5).unwrap();
    let (x, y) = prototype_data(2000, 1);
    adv_train(&mut net, x.view(), &y, cfg).unwrap();
    net
}

fn natural_cfg() -> AdvTrainConfig {
    AdvTrainConfig {
        eps: 0.0,
        epochs: 10,
        batch_size: 50,
        seed: 2,
        ..Default::default()
    }
}

fn accuracy(model: &dyn Classifier, x: ArrayView2<f64>, y: &[usize]) -> f64 {
    let p = model.predict(x).unwrap();
    p.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64
}

fn robust_accuracy(net: &BaseNet, x: ArrayView2<f64>, y: &[usize], eps: f64) -> f64 {
    let cfg = AttackConfig {
        eps,
        n_iter: 40,
        ..Default::default()
    };
    pgd(net, x, y, &cfg).unwrap().robust_accuracy()
}

#[test]
fn zero_budget_ignores_the_attack_settings() {
    let a = trained(&natural_cfg());
    let b = trained(&AdvTrainConfig {
        pgd_steps: 1,
        pgd_step_size: 0.3,
        random_start: true,
        ..natural_cfg()
    });
    assert_eq!(a, b);
}

#[test]
fn adversarial_training_beats_the_natural_twin() {
    let eps = 0.15;
    let natural = trained(&natural_cfg());
    let pgd_trained = trained(&AdvTrainConfig {
        eps,
        pgd_steps: 10,
        pgd_step_size: eps / 4.0,
        ..natural_cfg()
    });
    let fgsm_trained = trained(&AdvTrainConfig {
        eps,
        pgd_steps: 1,
        pgd_step_size: eps,
        ..natural_cfg()
    });
    let (x, y) = prototype_data(500, 9);
    let base = robust_accuracy(&natural, x.view(), &y, eps);
    for net in [&pgd_trained, &fgsm_trained] {
        assert!(robust_accuracy(net, x.view(), &y, eps) > base);
        assert!(accuracy(net, x.view(), &y) >= accuracy(&natural, x.view(), &y) - 0.10);
    }
}

#[test]
fn frozen_features_are_pure_and_survive_head_training() {
    let net = trained(&natural_cfg());
    let frozen = freeze(&net);
    let (x, y) = prototype_data(300, 4);
    let before = frozen.extract(x.view()).unwrap();
    assert_eq!(before, frozen.extract(x.view()).unwrap());
    assert_eq!(before, net.extract_features(x.view()).unwrap());
    let dims = RopustDims {
        feature: 16,
        opu_in: 16,
        opu_out: 64,
        classes: 4,
    };
    let mut head = RopustParams::new(dims, 1, 2, 3).unwrap();
    let mut opu = opu_new(16, 64, 4).unwrap();
    opu.calibrate((before.dot(&head.w1.t()) + &head.b1).mapv(binarize).view())
        .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 32,
        ..Default::default()
    };
    train(
        &mut head,
        &opu,
        before.view(),
        &y,
        &cfg,
        AblationFlags::default(),
    )
    .unwrap();
    assert_eq!(before, frozen.extract(x.view()).unwrap());
}

fn head_cfg() -> HeadTrainConfig {
    HeadTrainConfig {
        epochs: 20,
        batch_size: 50,
        seed: 6,
        ..Default::default()
    }
}

#[test]
fn retrained_head_matches_the_original_head() {
    let net = trained(&natural_cfg());
    let (x, y) = prototype_data(2000, 1);
    let (tx, ty) = prototype_data(1000, 7);
    let head = retrain_plain_classifier(&freeze(&net), x.view(), &y, 4, &head_cfg()).unwrap();
    let free = DefenseFree {
        features: freeze(&net),
        head,
    };
    let a = accuracy(&free, tx.view(), &ty);
    let b = accuracy(&net, tx.view(), &ty);
    assert!((a - b).abs() <= 0.01, "retrained {a} vs original {b}");
}

#[test]
fn random_labels_give_chance_accuracy() {
    let net = trained(&natural_cfg());
    let (x, _) = prototype_data(2000, 1);
    let mut rng = stream_rng(8, 0);
    let noise: Vec<usize> = (0..2000).map(|_| rng.random_range(0..4)).collect();
    let head = retrain_plain_classifier(&freeze(&net), x.view(), &noise, 4, &head_cfg()).unwrap();
    let free = DefenseFree {
        features: freeze(&net),
        head,
    };
    let (tx, _) = prototype_data(1000, 7);
    let fresh: Vec<usize> = (0..1000).map(|_| rng.random_range(0..4)).collect();
    let acc = accuracy(&free, tx.view(), &fresh);
    let sd = (0.25f64 * 0.75 / 1000.0).sqrt();
    assert!((acc - 0.25).abs() <= 3.0 * sd, "accuracy {acc}");
}

/// Full-batch gradient descent on softmax regression, run to convergence.
fn softmax_regression(
    f: ArrayView2<f64>,
    y: &[usize],
    classes: usize,
) -> (Array2<f64>, Array1<f64>) {
    let (n, d) = f.dim();
    let mut w = Array2::<f64>::zeros((classes, d));
    let mut b = Array1::<f64>::zeros(classes);
    let scale = f.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let lr = 1.0 / (scale * scale * d as f64);
    for _ in 0..3000 {
        let mut g = f.dot(&w.t()) + &b;
        for (i, mut row) in g.axis_iter_mut(Axis(0)).enumerate() {
            let m = row.fold(f64::NEG_INFINITY, |a, &v| a.max(v));
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            row /= s;
            row[y[i]] -= 1.0;
        }
        w = w - g.t().dot(&f) * (lr / n as f64);
        b = b - g.sum_axis(Axis(0)) * (lr / n as f64);
    }
    (w, b)
}

#[test]
fn retrained_head_matches_a_convex_oracle() {
    let net = trained(&natural_cfg());
    let frozen = freeze(&net);
    let (x, y) = prototype_data(2000, 1);
    let (tx, ty) = prototype_data(1000, 7);
    let f = frozen.extract(x.view()).unwrap();
    let (w, b) = softmax_regression(f.view(), &y, 4);
    let tf = frozen.extract(tx.view()).unwrap();
    let logits = tf.dot(&w.t()) + &b;
    let oracle = logits
        .axis_iter(Axis(0))
        .zip(&ty)
        .filter(|(r, &t)| ropust::loss::argmax(r.view()) == t)
        .count() as f64
        / ty.len() as f64;
    let head = retrain_plain_classifier(&frozen, x.view(), &y, 4, &head_cfg()).unwrap();
    let free = DefenseFree {
        features: frozen,
        head,
    };
    let acc = accuracy(&free, tx.view(), &ty);
    assert!(
        (acc - oracle).abs() <= 0.01,
        "retrained {acc} vs oracle {oracle}"
    );
}
