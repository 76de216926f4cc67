//! Directional experiments beyond the acceptance gate: reconstruction
//! accuracy with and without random initialization, invalid white-box
//! candidates, empirical smoothed robustness, and separable-data training.

use std::sync::OnceLock;

use preempt_core::attack::{randomized_pgd, PgdConfig};
use preempt_core::diffnet::{Activation, Classifier};
use preempt_core::geometry::{NormP, PerturbSpec};
use preempt_core::preempt::{robustify, InitMode, RobustOptimizer, RobustifyConfig};
use preempt_core::recon::{eval_whitebox, reconstruct, whitebox_attack, WhiteboxConfig};
use preempt_core::rngstream;
use preempt_core::smooth::{robustify_smoothed, smoothed_predict, SmoothConfig};
use preempt_core::train::{train, CheckpointRule, TrainConfig, TrainMode};
use preempt_core::{Scalar, Vec64};

use preempt_harness::dataset::{gen_dataset, DataKind, Dataset};

struct Fixture {
    model: Classifier<Scalar>,
    dataset: Dataset,
    spec: PerturbSpec<Scalar>,
}

fn fixture() -> &'static Fixture {
    static FX: OnceLock<Fixture> = OnceLock::new();
    FX.get_or_init(|| {
        let dataset = gen_dataset(DataKind::Gauss2, 300, 8, 7, 0.5).unwrap();
        let spec = PerturbSpec::new(NormP::L2, 0.4, 0.4).unwrap();
        let mut tcfg = TrainConfig::standard(TrainMode::PreemptRobust, spec);
        tcfg.epochs = 15;
        tcfg.checkpoint = CheckpointRule::Latest;
        let mut mrng = rngstream::derive(7, "init", &[]);
        let init =
            Classifier::random_mlp(&[8, 16, 16, 2], Activation::Tanh, &mut mrng).unwrap();
        let mut trng = rngstream::derive(7, "train", &[]);
        let model = train(init, &dataset.train_set(), &dataset.test_set(), &tcfg, &mut trng)
            .unwrap()
            .model;
        Fixture {
            model,
            dataset,
            spec,
        }
    })
}

fn recon_cfg(spec: &PerturbSpec<Scalar>, init: InitMode) -> RobustifyConfig<Scalar> {
    let mut cfg = RobustifyConfig::standard(spec);
    cfg.lr = 0.01;
    cfg.init_mode = init;
    cfg.optimizer = RobustOptimizer::ProjectedGd;
    cfg
}

/// Robustification started at the original is easy to invert: the adversary
/// reconstructs to well within the attack budget. A random start inside the
/// defender ball destroys that accuracy.
#[test]
fn reconstruction_accuracy_depends_on_initialization() {
    let fx = fixture();
    let test = fx.dataset.test_set();
    let eps = fx.spec.eps;

    let median_recon_dist = |init: InitMode, tag: &str| {
        let cfg = recon_cfg(&fx.spec, init);
        let mut dists: Vec<f64> = test
            .iter()
            .take(40)
            .enumerate()
            .map(|(i, (x_o, _))| {
                let mut drng = rngstream::derive(7, "defend", &[i as u64, init as u64]);
                let x_r = robustify(&fx.model, x_o, &fx.spec, &cfg, &mut drng)
                    .unwrap()
                    .x_r;
                let mut arng = rngstream::derive(7, tag, &[i as u64]);
                let x_hat = reconstruct(&fx.model, &x_r, &fx.spec, &cfg, &mut arng).unwrap();
                fx.spec.p.distance(&x_hat, x_o)
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        dists[dists.len() / 2]
    };

    let exact_init = median_recon_dist(InitMode::AtOriginal, "adv-a");
    let random_init = median_recon_dist(InitMode::RandomInDeltaBall, "adv-b");
    assert!(
        exact_init < 0.5 * eps,
        "deterministic-init reconstruction should be accurate, median {exact_init}"
    );
    assert!(
        random_init > exact_init,
        "random init should hurt reconstruction ({random_init} vs {exact_init})"
    );
}

/// Some white-box candidates misclassify but land outside the ball around
/// the true original; the evaluation must count them as invalid.
#[test]
fn whitebox_attack_produces_invalid_candidates() {
    let fx = fixture();
    let test = fx.dataset.test_set();
    let mut wb_cfg = WhiteboxConfig::standard(&fx.spec);
    wb_cfg.recon = recon_cfg(&fx.spec, InitMode::RandomInDeltaBall);
    wb_cfg.attack = PgdConfig::standard(fx.spec.eps).with_restarts(3);
    let defender = recon_cfg(&fx.spec, InitMode::RandomInDeltaBall);

    let mut invalid_misclassified = 0usize;
    let mut candidates = 0usize;
    for (i, (x_o, y_o)) in test.iter().take(30).enumerate() {
        let mut drng = rngstream::derive(8, "defend", &[i as u64]);
        let x_r = robustify(&fx.model, x_o, &fx.spec, &defender, &mut drng)
            .unwrap()
            .x_r;
        let mut wrng = rngstream::derive(8, "whitebox", &[i as u64]);
        let outcome = whitebox_attack(&fx.model, &x_r, *y_o, &fx.spec, &wb_cfg, &mut wrng).unwrap();
        let verdict = eval_whitebox(&fx.model, &outcome.candidates, x_o, *y_o, &fx.spec).unwrap();
        for c in &verdict.candidates {
            candidates += 1;
            if c.misclassified && !c.valid {
                invalid_misclassified += 1;
            }
        }
    }
    assert!(
        invalid_misclassified > 0,
        "expected some misclassifying-but-invalid candidates among {candidates}"
    );
}

/// Empirical smoothed robustness: randomized-PGD accuracy of robustified
/// points exceeds that of the raw points.
#[test]
fn smoothed_empirical_robustness_improves() {
    let fx = fixture();
    let test = fx.dataset.test_set();
    let spec = PerturbSpec::new(NormP::L2, 0.3, 0.3).unwrap();
    let s_cfg = SmoothConfig {
        sigma: 0.1,
        n_pred: 30,
        n_cert: 100,
        m: 5,
        conf_alpha: 0.001,
    };
    let mut r_cfg = RobustifyConfig::standard(&spec);
    r_cfg.lr = 0.05;
    r_cfg.optimizer = RobustOptimizer::ProjectedGd;
    let atk = PgdConfig::standard(spec.eps);

    let accuracy = |points: &[(Vec64, usize)], tag: &str| {
        let mut correct = 0usize;
        for (i, (x, y)) in points.iter().enumerate() {
            let mut rng = rngstream::derive(9, tag, &[i as u64]);
            let target = fx.model.predict(x).unwrap();
            let adv =
                randomized_pgd(&fx.model, x, target, &spec, &atk, s_cfg.sigma, s_cfg.m, &mut rng)
                    .unwrap();
            let mut vrng = rngstream::derive(9, "vote", &[i as u64]);
            let clean_ok = fx.model.predict(x).unwrap() == *y;
            if clean_ok && smoothed_predict(&fx.model, &adv, &s_cfg, &mut vrng).unwrap() == *y {
                correct += 1;
            }
        }
        correct as f64 / points.len() as f64
    };

    let raw: Vec<(Vec64, usize)> = test.iter().take(40).cloned().collect();
    let robustified: Vec<(Vec64, usize)> = raw
        .iter()
        .enumerate()
        .map(|(i, (x, y))| {
            let mut rng = rngstream::derive(9, "sm-defend", &[i as u64]);
            let x_r = robustify_smoothed(&fx.model, x, &spec, &r_cfg, &s_cfg, &mut rng)
                .unwrap()
                .x_r;
            (x_r, *y)
        })
        .collect();

    let raw_acc = accuracy(&raw, "atk-raw");
    let rob_acc = accuracy(&robustified, "atk-rob");
    assert!(
        rob_acc > raw_acc,
        "smoothed robust accuracy did not improve: {raw_acc} -> {rob_acc}"
    );
}

/// The blob dataset is effectively separable, so plain training reaches
/// full training accuracy quickly.
#[test]
fn plain_training_saturates_on_separable_blobs() {
    let ds = gen_dataset(DataKind::Gauss2, 200, 8, 3, 0.5).unwrap();
    let spec = PerturbSpec::new(NormP::LInf, 0.1, 0.1).unwrap();
    let mut cfg = TrainConfig::standard(TrainMode::Plain, spec);
    cfg.epochs = 12;
    cfg.checkpoint = CheckpointRule::Latest;
    let mut mrng = rngstream::derive(3, "init", &[]);
    let init = Classifier::<Scalar>::random_mlp(&[8, 16, 2], Activation::Tanh, &mut mrng).unwrap();
    let mut trng = rngstream::derive(3, "train", &[]);
    let out = train(init, &ds.train_set(), &ds.test_set(), &cfg, &mut trng).unwrap();
    let final_acc = out.history.last().unwrap().train_acc;
    assert_eq!(final_acc, 1.0, "plain training should fit separable blobs");
}
