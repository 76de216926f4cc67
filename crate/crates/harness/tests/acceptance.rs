//! Acceptance suite: one test per criterion, each printing a pass line with
//! the measured quantities (visible under `cargo test -- --nocapture`).
//!
//! The heavyweight fixtures (trained models, full pipeline runs) are
//! computed once and shared.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;

use preempt_core::attack::{pgd_trace, randomized_pgd, randomized_pgd_trace, PgdConfig};
use preempt_core::diffnet::{Activation, Classifier, Layer, ParamGrads};
use preempt_core::geometry::{NormP, PerturbSpec};
use preempt_core::preempt::{
    lemma2_jacobian, lemma2_jacobian_with, prop1_bound_check, robustify, GradMode,
    RobustOptimizer, RobustifyConfig,
};
use preempt_core::rngstream;
use preempt_core::smooth::{
    certify, robustify_smoothed, smoothed_predict, smoothed_soft, CertOutcome, SmoothConfig,
};
use preempt_core::stats::clopper_pearson_lower;
use preempt_core::train::{train, CheckpointRule, TrainConfig, TrainMode};
use preempt_core::{Scalar, Vec64};

use preempt_harness::config::Config;
use preempt_harness::dataset::{gen_dataset, DataKind};
use preempt_harness::pipeline::{run_pipeline, EvalReport};

fn pass(line: impl AsRef<str>) {
    println!("[PASS] {}", line.as_ref());
}

// ---------------------------------------------------------------- fixtures

const LINF_PIPELINE_CONFIG: &str = "\
seed = 7
[model]
hidden = 16,16
[train]
data_kind = gauss2
data_dim = 8
data_per_class = 1000
epochs = 30
[perturb]
p = inf
eps = 0.15
[attack]
eval_count = 200
";

const L2_PIPELINE_CONFIG: &str = "\
seed = 7
[model]
hidden = 16,16
[train]
data_kind = gauss2
data_dim = 8
data_per_class = 1000
epochs = 30
[perturb]
p = 2
eps = 0.4
[robustify]
init = random_in_delta_ball
beta = 0.01
[attack]
eval_count = 200
";

fn linf_pipeline() -> &'static EvalReport {
    static REPORT: OnceLock<EvalReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let cfg = Config::from_text(LINF_PIPELINE_CONFIG).expect("fixture config");
        run_pipeline(&cfg).expect("l-inf pipeline")
    })
}

fn l2_pipeline() -> &'static EvalReport {
    static REPORT: OnceLock<EvalReport> = OnceLock::new();
    REPORT.get_or_init(|| {
        let cfg = Config::from_text(L2_PIPELINE_CONFIG).expect("fixture config");
        run_pipeline(&cfg).expect("l2 pipeline")
    })
}

fn rebuild_with_params(model: &Classifier<Scalar>, params: &ParamGrads<Scalar>) -> Classifier<Scalar> {
    let layers: Vec<Layer<Scalar>> = model
        .layers()
        .iter()
        .zip(&params.layers)
        .map(|(l, (w, b))| {
            Layer::new(l.rows(), l.cols(), l.activation(), w.clone(), b.clone()).unwrap()
        })
        .collect();
    Classifier::new(layers).unwrap()
}

// -------------------------------------------------------------- criterion 1

#[test]
fn criterion_01_gradient_oracle() {
    let started = Instant::now();
    let activations = [Activation::Tanh, Activation::Relu, Activation::Identity];
    let mut checked_inputs = 0usize;
    let mut checked_params = 0usize;
    let mut worst: f64 = 0.0;

    let rel_err = |got: f64, fd: f64| (got - fd).abs() / fd.abs().max(1e-8);

    for case in 0..100u64 {
        let mut rng = rngstream::derive(1000, "grad-oracle", &[case]);
        let dim = rng.gen_range(2..=16usize);
        let hidden = rng.gen_range(3..=10usize);
        let classes = rng.gen_range(2..=5usize);
        let act = activations[case as usize % activations.len()];
        let model = Classifier::<Scalar>::random_mlp(&[dim, hidden, classes], act, &mut rng).unwrap();
        let x: Vec64 = (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y = rng.gen_range(0..classes);

        // Input gradient against central differences of the loss value.
        let grads = model.loss_grads(&x, y).unwrap();
        let h = 1e-5;
        for j in 0..dim {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let fd = (model.cross_entropy(&xp, y).unwrap() - model.cross_entropy(&xm, y).unwrap())
                / (2.0 * h);
            let e = rel_err(grads.input[j], fd);
            worst = worst.max(e);
            assert!(
                e < 1e-4,
                "criterion 1: input grad mismatch case={case} j={j} got={} fd={fd}",
                grads.input[j]
            );
            checked_inputs += 1;
        }

        // Parameter gradients against central differences over each weight.
        let base = model.params();
        for (li, (w, b)) in base.layers.iter().enumerate() {
            let n_w = w.dim();
            let n_b = b.dim();
            for k in 0..n_w + n_b {
                let mut up = base.clone();
                let mut dn = base.clone();
                if k < n_w {
                    up.layers[li].0[k] += h;
                    dn.layers[li].0[k] -= h;
                } else {
                    up.layers[li].1[k - n_w] += h;
                    dn.layers[li].1[k - n_w] -= h;
                }
                let lp = rebuild_with_params(&model, &up)
                    .cross_entropy(&x, y)
                    .unwrap();
                let lm = rebuild_with_params(&model, &dn)
                    .cross_entropy(&x, y)
                    .unwrap();
                let fd = (lp - lm) / (2.0 * h);
                let got = if k < n_w {
                    grads.params.layers[li].0[k]
                } else {
                    grads.params.layers[li].1[k - n_w]
                };
                let e = rel_err(got, fd);
                worst = worst.max(e);
                assert!(
                    e < 1e-4,
                    "criterion 1: param grad mismatch case={case} layer={li} k={k} got={got} fd={fd}"
                );
                checked_params += 1;
            }
        }
    }

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 10.0, "criterion 1: runtime {secs:.2}s >= 10s");
    pass(format!(
        "criterion 1: gradient oracle on 100 random models ({checked_inputs} input + {checked_params} param coords), worst rel err {worst:.2e} < 1e-4, {secs:.2}s < 10s"
    ));
}

// -------------------------------------------------------------- criterion 2

#[test]
fn criterion_02_dynamics_jacobian() {
    let started = Instant::now();

    // Zero-Hessian oracle: constant gradient makes the Jacobian exactly I.
    let c: Vec64 = vec![0.4, -0.2, 0.7].into();
    let grad_fn =
        move |_: &Vec64| -> preempt_core::Result<Vec64> { Ok(c.clone()) };
    let check = lemma2_jacobian_with(&grad_fn, &vec![0.3, 0.4, 0.5].into(), 0.2).unwrap();
    assert_eq!(
        check.analytic,
        preempt_core::linalg::Mat::identity(3),
        "criterion 2: zero-Hessian Jacobian must be the identity exactly"
    );

    let mut done = 0usize;
    let mut seed = 0u64;
    let mut worst: f64 = 0.0;
    while done < 20 {
        let mut rng = rngstream::derive(2000, "lemma2", &[seed]);
        seed += 1;
        let dim = rng.gen_range(2..=8usize);
        let hidden = rng.gen_range(4..=8usize);
        let model =
            Classifier::<Scalar>::random_mlp(&[dim, hidden, 3], Activation::Tanh, &mut rng)
                .unwrap();
        let x: Vec64 = (0..dim).map(|_| rng.gen_range(0.1..0.9)).collect();
        let alpha = rng.gen_range(0.05..0.3);
        match lemma2_jacobian(&model, &x, rng.gen_range(0..3), alpha) {
            Ok(check) => {
                worst = worst.max(check.max_abs_diff);
                assert!(
                    check.max_abs_diff < 1e-3,
                    "criterion 2: |analytic - fd| = {} on seed {seed}",
                    check.max_abs_diff
                );
                assert!(check.bound_factor >= 1.0);
                done += 1;
            }
            Err(preempt_core::Error::GradNormTooSmall { .. }) => {} // redraw
            Err(e) => panic!("criterion 2: unexpected error {e}"),
        }
    }

    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 30.0, "criterion 2: runtime {secs:.2}s >= 30s");
    pass(format!(
        "criterion 2: analytic dynamics Jacobian vs finite differences on 20 tanh models, worst abs err {worst:.2e} < 1e-3; zero-Hessian case exactly identity; {secs:.2}s < 30s"
    ));
}

// -------------------------------------------------------------- criterion 3

#[test]
fn criterion_03_operator_norm_bound() {
    let started = Instant::now();
    let mut done = 0usize;
    let mut seed = 0u64;
    let mut min_slack = f64::INFINITY;
    while done < 200 {
        let mut rng = rngstream::derive(3000, "prop1", &[seed]);
        seed += 1;
        let dim = rng.gen_range(2..=8usize);
        let hidden = rng.gen_range(4..=8usize);
        let model =
            Classifier::<Scalar>::random_mlp(&[dim, hidden, 2], Activation::Tanh, &mut rng)
                .unwrap();
        let x: Vec64 = (0..dim).map(|_| rng.gen_range(0.1..0.9)).collect();
        let a: Vec64 = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let alpha = rng.gen_range(0.01..0.5);
        let k = rng.gen_range(0.05..=1.0);
        match prop1_bound_check(&model, &x, rng.gen_range(0..2), alpha, &a, k) {
            Ok(report) => {
                assert!(
                    report.satisfied,
                    "criterion 3: bound violated on seed {seed}: lhs={} rhs={}",
                    report.lhs, report.rhs
                );
                min_slack = min_slack.min(report.slack);
                done += 1;
            }
            Err(preempt_core::Error::GradNormTooSmall { .. }) => {}
            Err(e) => panic!("criterion 3: unexpected error {e}"),
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "criterion 3: runtime {secs:.2}s >= 60s");
    pass(format!(
        "criterion 3: operator-norm bound held on 200/200 random draws (min slack {min_slack:.2e}); {secs:.2}s < 60s"
    ));
}

// -------------------------------------------------------------- criterion 4

#[test]
fn criterion_04_certificate_soundness() {
    let report = linf_pipeline();
    assert!(
        !report.lemma1.is_empty(),
        "criterion 4: no certificate rows collected"
    );
    let n = report.lemma1.len();
    let satisfied = report.lemma1.iter().filter(|r| r.satisfied).count();
    for r in &report.lemma1 {
        assert!(
            !r.satisfied || r.pred_preserved,
            "criterion 4: certificate violated at example {} (h_tilde={})",
            r.example_id,
            r.h_tilde
        );
        if r.satisfied {
            assert!(r.implied_bound >= r.h_tilde);
        }
    }
    let frac = satisfied as f64 / n as f64;
    assert!(
        frac >= 0.95,
        "criterion 4: only {frac:.3} of robustified points satisfy the worst-case-loss condition"
    );
    pass(format!(
        "criterion 4: certificate condition satisfied on {satisfied}/{n} robustified points ({frac:.3} >= 0.95), zero prediction-preservation violations"
    ));
}

// -------------------------------------------------------------- criterion 5

#[test]
fn criterion_05_robustification_effectiveness() {
    let started = Instant::now();
    let report = linf_pipeline();
    let pre_none = report.row(TrainMode::PreemptRobust, false);
    let pre_ours = report.row(TrainMode::PreemptRobust, true);
    let adv_none = report.row(TrainMode::Adversarial, false);

    let gap = pre_ours.grey_pgd - pre_none.grey_pgd;
    assert!(
        gap >= 0.20,
        "criterion 5: grey-box gain {gap:.3} below 20 points (ours {} vs none {})",
        pre_ours.grey_pgd,
        pre_none.grey_pgd
    );
    assert!(
        pre_ours.clean >= adv_none.clean,
        "criterion 5: preemptively robust model clean acc {} below adversarial model {}",
        pre_ours.clean,
        adv_none.clean
    );
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 300.0, "criterion 5: runtime {secs:.1}s >= 5min");
    pass(format!(
        "criterion 5: grey-box accuracy {:.3} robustified vs {:.3} raw (+{:.1} points >= 20); clean {:.3} (preempt) >= {:.3} (adversarial); {secs:.1}s < 300s",
        pre_ours.grey_pgd,
        pre_none.grey_pgd,
        gap * 100.0,
        pre_ours.clean,
        adv_none.clean
    ));
}

// -------------------------------------------------------------- criterion 6

#[test]
fn criterion_06_linear_model_oracle() {
    // Binary linear classifier: the optimum moves delta along the margin
    // direction (sign pattern for l-inf), computed in closed form.
    let w: Vec64 = vec![1.2, -0.8, 0.5, 0.9].into();
    let x_o: Vec64 = vec![0.55, 0.5, 0.5, 0.5].into();
    let model = Classifier::binary_linear(&w, 0.0).unwrap();
    let y = model.predict(&x_o).unwrap();
    assert_eq!(y, 1, "fixture: x_o should start on the positive side");

    // p = 2: x* = x_o + delta * w/||w||.
    let spec = PerturbSpec::new(NormP::L2, 0.15, 0.15).unwrap();
    let mut cfg = RobustifyConfig::standard(&spec);
    cfg.max_iter = 300;
    cfg.lr = 0.01;
    let mut rng = rngstream::derive(6000, "linear-l2", &[]);
    let got = robustify(&model, &x_o, &spec, &cfg, &mut rng).unwrap().x_r;
    let expect = x_o.axpy(spec.delta / w.norm_l2(), &w);
    let err_l2 = got.sub(&expect).norm_l2();
    assert!(
        err_l2 <= 1e-3,
        "criterion 6 (l2): distance to closed-form optimum {err_l2:.2e}"
    );

    // p = inf: x* = x_o + delta * sgn(w), via the tanh route.
    let spec = PerturbSpec::new(NormP::LInf, 0.15, 0.15).unwrap();
    let mut cfg = RobustifyConfig::standard(&spec);
    cfg.max_iter = 200;
    let mut rng = rngstream::derive(6000, "linear-linf", &[]);
    let got = robustify(&model, &x_o, &spec, &cfg, &mut rng).unwrap().x_r;
    let expect: Vec64 = x_o
        .iter()
        .zip(w.iter())
        .map(|(&xi, &wi)| xi + spec.delta * wi.signum())
        .collect();
    let err_linf = got.sub(&expect).norm_l2();
    assert!(
        err_linf <= 1e-3,
        "criterion 6 (l-inf): distance to closed-form optimum {err_linf:.2e}"
    );

    pass(format!(
        "criterion 6: robustify reaches the closed-form linear optimum (l2 err {err_l2:.2e}, l-inf err {err_linf:.2e}, both <= 1e-3)"
    ));
}

// -------------------------------------------------------------- criterion 7

#[test]
fn criterion_07_whitebox_semantics() {
    let report = l2_pipeline();
    let eps = 0.4;

    let recon = &report.distance_stats.recon_dists;
    assert!(
        recon.len() >= 100,
        "criterion 7: too few reconstructions ({})",
        recon.len()
    );
    let far = recon.iter().filter(|&&d| d > 0.75 * eps).count();
    let frac = far as f64 / recon.len() as f64;
    assert!(
        frac >= 0.5,
        "criterion 7: only {frac:.3} of reconstructions beyond 0.75 eps"
    );

    let pre_ours = report.row(TrainMode::PreemptRobust, true);
    let pre_none = report.row(TrainMode::PreemptRobust, false);
    assert!(
        pre_ours.white_pgd >= pre_none.grey_pgd_restarts,
        "criterion 7: white-box accuracy {} below no-preemption grey-box {}",
        pre_ours.white_pgd,
        pre_none.grey_pgd_restarts
    );
    pass(format!(
        "criterion 7: {:.1}% of reconstructions at distance > 0.75 eps (>= 50%); white-box acc {:.3} >= no-preemption grey-box {:.3}",
        frac * 100.0,
        pre_ours.white_pgd,
        pre_none.grey_pgd_restarts
    ));
}

// -------------------------------------------------------------- criterion 8

fn sharpened_model(seed: u64) -> Classifier<Scalar> {
    let mut rng = rngstream::derive(seed, "m", &[]);
    let base = Classifier::<Scalar>::random_mlp(&[6, 12, 2], Activation::Tanh, &mut rng).unwrap();
    // A steep hidden layer puts interior loss maxima inside the ball, where
    // the inner gradients vanish while curvature does not.
    let layers: Vec<Layer<Scalar>> = base
        .layers()
        .iter()
        .enumerate()
        .map(|(k, l)| {
            let s = if k == 0 { 25.0 } else { 1.0 };
            Layer::new(
                l.rows(),
                l.cols(),
                l.activation(),
                l.weights().scale(s),
                l.bias().clone(),
            )
            .unwrap()
        })
        .collect();
    Classifier::new(layers).unwrap()
}

#[test]
fn criterion_08_exploding_update_gradient() {
    let spec = PerturbSpec::new(NormP::L2, 0.8, 0.8).unwrap();
    let mut cfg = RobustifyConfig::standard(&spec);
    cfg.max_iter = 50;
    cfg.lr = 0.03;
    cfg.optimizer = RobustOptimizer::ProjectedGd;

    let mut any_explosion = false;
    let mut ratios = Vec::new();
    for seed in 0..5u64 {
        let model = sharpened_model(seed);
        let mut xr = rngstream::derive(seed, "x", &[]);
        let x_o: Vec64 = (0..6).map(|_| xr.gen_range(0.25..0.75)).collect();

        cfg.grad_mode = GradMode::FirstOrder;
        let mut rng = rngstream::derive(200, "g", &[seed]);
        let fo = robustify(&model, &x_o, &spec, &cfg, &mut rng)
            .expect("criterion 8: first-order run must complete");
        assert!(
            fo.grad_norms.iter().all(|v| v.is_finite()),
            "criterion 8: non-finite first-order gradient at seed {seed}"
        );
        let max_fo = fo.grad_norms.iter().cloned().fold(0.0f64, f64::max);

        cfg.grad_mode = GradMode::Exact;
        let mut rng = rngstream::derive(200, "g", &[seed]);
        let (exact_trace, aborted) = match robustify(&model, &x_o, &spec, &cfg, &mut rng) {
            Ok(rep) => (rep.grad_norms, false),
            Err(preempt_core::Error::NonFiniteUpdate { trace, .. }) => (trace, true),
            Err(e) => panic!("criterion 8: unexpected error {e}"),
        };
        let max_ex = exact_trace
            .iter()
            .cloned()
            .filter(|v| v.is_finite())
            .fold(0.0f64, f64::max);
        let ratio = max_ex / max_fo.max(f64::MIN_POSITIVE);
        ratios.push(ratio);
        if aborted || ratio >= 10.0 {
            any_explosion = true;
        }
    }
    assert!(
        any_explosion,
        "criterion 8: no exact-mode explosion in 5 seeded runs (ratios {ratios:?})"
    );
    pass(format!(
        "criterion 8: exact-mode update-gradient spikes reproduced (max/first-order ratios {:?}, threshold 10x); first-order traces finite in 5/5 runs",
        ratios.iter().map(|r| format!("{r:.0}")).collect::<Vec<_>>()
    ));
}

// -------------------------------------------------------------- criterion 9

/// Exact binomial upper tail `P(X >= k)` by direct summation; shares no code
/// with the incomplete-beta route in the implementation.
fn binomial_tail_ge(k: u64, n: u64, p: f64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return 1.0;
    }
    let ln_p = p.ln();
    let ln_q = (1.0 - p).ln();
    // ln C(n, k) built from scratch.
    let mut ln_c = 0.0f64;
    for j in 1..=k {
        ln_c += ((n - k + j) as f64).ln() - (j as f64).ln();
    }
    let mut sum = 0.0f64;
    let mut i = k;
    loop {
        sum += (ln_c + i as f64 * ln_p + (n - i) as f64 * ln_q).exp();
        if i == n {
            break;
        }
        // C(n, i+1) = C(n, i) * (n - i) / (i + 1)
        ln_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
        i += 1;
    }
    sum.min(1.0)
}

fn clopper_pearson_oracle(k: u64, n: u64, alpha: f64) -> f64 {
    if k == 0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if binomial_tail_ge(k, n, mid) < alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct SmoothFixture {
    model: Classifier<Scalar>,
    s_cfg: SmoothConfig<Scalar>,
    raw_certified: usize,
    rob_certified: usize,
    n_eval: usize,
    certified_points: Vec<(Vec64, usize, Scalar)>,
}

fn smooth_fixture() -> &'static SmoothFixture {
    static FIXTURE: OnceLock<SmoothFixture> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let ds = gen_dataset(DataKind::Gauss2, 600, 4, 11, 0.5).unwrap();
        // The defender needs more budget than the certification radius so
        // certified points keep a margin reserve above 0.95 R.
        let spec = PerturbSpec::new(NormP::L2, 0.25, 0.5).unwrap();
        let mut tcfg = TrainConfig::standard(TrainMode::Plain, spec);
        tcfg.epochs = 10;
        tcfg.checkpoint = CheckpointRule::Latest;
        let mut mrng = rngstream::derive(11, "init", &[]);
        let init =
            Classifier::<Scalar>::random_mlp(&[4, 12, 2], Activation::Tanh, &mut mrng).unwrap();
        let mut trng = rngstream::derive(11, "train", &[]);
        let model = train(init, &ds.train_set(), &ds.test_set(), &tcfg, &mut trng)
            .unwrap()
            .model;

        let s_cfg = SmoothConfig {
            sigma: 0.1,
            n_pred: 50,
            n_cert: 10_000,
            m: 5,
            conf_alpha: 0.001,
        };
        let mut r_cfg = RobustifyConfig::standard(&spec);
        r_cfg.lr = 0.05;
        r_cfg.optimizer = RobustOptimizer::ProjectedGd;

        let test = ds.test_set();
        let eval = &test[..220.min(test.len())];

        let mut raw_certified = 0usize;
        for (i, (x, y)) in eval.iter().enumerate() {
            let mut rng = rngstream::derive(11, "cert-raw", &[i as u64]);
            if let CertOutcome::Certified { class, radius, .. } =
                certify(&model, x, &s_cfg, &mut rng).unwrap()
            {
                if class == *y && radius >= spec.eps {
                    raw_certified += 1;
                }
            }
        }

        let mut rob_certified = 0usize;
        let mut certified_points = Vec::new();
        for (i, (x, y)) in eval.iter().enumerate() {
            let mut rng = rngstream::derive(11, "sm-defend", &[i as u64]);
            let x_r = robustify_smoothed(&model, x, &spec, &r_cfg, &s_cfg, &mut rng)
                .unwrap()
                .x_r;
            let mut rng = rngstream::derive(11, "cert-rob", &[i as u64]);
            if let CertOutcome::Certified { class, radius, .. } =
                certify(&model, &x_r, &s_cfg, &mut rng).unwrap()
            {
                if class == *y && radius >= spec.eps {
                    rob_certified += 1;
                }
                certified_points.push((x_r, class, radius));
            }
        }

        SmoothFixture {
            model,
            s_cfg,
            raw_certified,
            rob_certified,
            n_eval: eval.len(),
            certified_points,
        }
    })
}

#[test]
fn criterion_09a_clopper_pearson_oracle() {
    let alpha = 0.001;
    let mut cases = 0usize;
    let mut worst: f64 = 0.0;
    for &n in &[50u64, 1000, 10_000] {
        let ks: Vec<u64> = match n {
            50 => vec![0, 1, 2, 5, 10, 13, 20, 25, 26, 30, 37, 40, 44, 48, 49, 50],
            1000 => vec![
                0, 1, 2, 10, 50, 100, 250, 400, 500, 501, 600, 700, 800, 900, 950, 990, 999, 1000,
            ],
            _ => vec![
                0, 1, 2, 77, 500, 1234, 2500, 5000, 5001, 6000, 7500, 8000, 9000, 9300, 9500,
                9700, 9899, 9900, 9950, 9990, 9995, 9999, 10_000,
            ],
        };
        for k in ks {
            let got = clopper_pearson_lower(k, n, alpha);
            let want = clopper_pearson_oracle(k, n, alpha);
            let diff = (got - want).abs();
            worst = worst.max(diff);
            assert!(
                diff <= 1e-10,
                "criterion 9a: CP bound mismatch at k={k} n={n}: impl {got} oracle {want}"
            );
            cases += 1;
        }
    }
    // The headline configuration quoted with the exact oracle.
    let vote = clopper_pearson_lower(9990, 10_000, alpha);
    assert!((vote - clopper_pearson_oracle(9990, 10_000, alpha)).abs() <= 1e-10);
    assert!(cases >= 50);
    pass(format!(
        "criterion 9a: Clopper-Pearson bound matches the exact binomial-tail oracle on {cases} vote configurations (worst abs diff {worst:.1e} <= 1e-10); 9990/10000 -> {vote:.6}"
    ));
}

#[test]
fn criterion_09b_certified_soundness_spot_check() {
    let fx = smooth_fixture();
    assert!(
        fx.certified_points.len() >= 200,
        "criterion 9b: only {} certified points",
        fx.certified_points.len()
    );
    let mut attacks = 0usize;
    let mut flips = 0usize;
    for (j, (x_r, class, radius)) in fx.certified_points.iter().enumerate() {
        let budget = 0.95 * radius;
        if budget <= 0.0 {
            continue;
        }
        let aspec = PerturbSpec::new(NormP::L2, budget, budget).unwrap();
        let acfg = PgdConfig::standard(budget);
        for a in 0..50u64 {
            let mut rng = rngstream::derive(11, "spot", &[j as u64, a]);
            let adv = randomized_pgd(
                &fx.model, x_r, *class, &aspec, &acfg, fx.s_cfg.sigma, fx.s_cfg.m, &mut rng,
            )
            .unwrap();
            let mut vote_rng = rngstream::derive(11, "spot-vote", &[j as u64, a]);
            let pred = smoothed_predict(&fx.model, &adv, &fx.s_cfg, &mut vote_rng).unwrap();
            attacks += 1;
            if pred != *class {
                flips += 1;
            }
        }
    }
    assert_eq!(
        flips, 0,
        "criterion 9b: {flips} prediction flips below the certified radius in {attacks} attacks"
    );
    pass(format!(
        "criterion 9b: zero prediction flips under randomized PGD at 0.95x certified radius ({} certified points, {attacks} attacks)",
        fx.certified_points.len()
    ));
}

#[test]
fn criterion_09c_certified_accuracy_improves() {
    let fx = smooth_fixture();
    assert!(
        fx.rob_certified > fx.raw_certified,
        "criterion 9c: certified accuracy did not improve ({} -> {})",
        fx.raw_certified,
        fx.rob_certified
    );
    pass(format!(
        "criterion 9c: certified accuracy at radius eps {:.3} raw -> {:.3} robustified (strict improvement on {} points)",
        fx.raw_certified as f64 / fx.n_eval as f64,
        fx.rob_certified as f64 / fx.n_eval as f64,
        fx.n_eval
    ));
}

// ------------------------------------------------------------- criterion 10

#[test]
fn criterion_10_degeneracy_equivalences() {
    let ds = gen_dataset(DataKind::Gauss2, 40, 4, 21, 0.5).unwrap();
    let train_set = ds.train_set();
    let holdout = ds.test_set();
    let spec_pos = PerturbSpec::new(NormP::LInf, 0.05, 0.05).unwrap();
    let base_cfg = |mode| {
        let mut c = TrainConfig::standard(mode, spec_pos);
        c.epochs = 3;
        c.inner_max_steps = 4;
        c.batch_size = 8;
        c.checkpoint = CheckpointRule::Latest;
        c
    };
    let init = || {
        let mut rng = rngstream::derive(22, "init", &[]);
        Classifier::<Scalar>::random_mlp(&[4, 6, 2], Activation::Tanh, &mut rng).unwrap()
    };

    // (i) preempt_robust with L = 0, delta = 0 bit-equals adversarial.
    let adv_cfg = base_cfg(TrainMode::Adversarial);
    let mut pre_cfg = base_cfg(TrainMode::PreemptRobust);
    pre_cfg.inner_min_steps = 0;
    pre_cfg.spec = PerturbSpec::new(NormP::LInf, 0.05, 0.0).unwrap();
    let mut rng_a = rngstream::derive(23, "t", &[]);
    let mut rng_b = rngstream::derive(23, "t", &[]);
    let out_adv = train(init(), &train_set, &holdout, &adv_cfg, &mut rng_a).unwrap();
    let out_pre = train(init(), &train_set, &holdout, &pre_cfg, &mut rng_b).unwrap();
    assert_eq!(
        out_adv.history, out_pre.history,
        "criterion 10: preempt(L=0, delta=0) history differs from adversarial"
    );
    assert_eq!(
        preempt_core::diffnet::io::to_string(&out_adv.model),
        preempt_core::diffnet::io::to_string(&out_pre.model),
        "criterion 10: preempt(L=0, delta=0) parameters differ from adversarial"
    );

    // (ii) adversarial with K = 0 bit-equals plain.
    let plain_cfg = base_cfg(TrainMode::Plain);
    let mut adv0_cfg = base_cfg(TrainMode::Adversarial);
    adv0_cfg.inner_max_steps = 0;
    let mut rng_a = rngstream::derive(24, "t", &[]);
    let mut rng_b = rngstream::derive(24, "t", &[]);
    let out_plain = train(init(), &train_set, &holdout, &plain_cfg, &mut rng_a).unwrap();
    let out_adv0 = train(init(), &train_set, &holdout, &adv0_cfg, &mut rng_b).unwrap();
    assert_eq!(out_plain.history, out_adv0.history);
    assert_eq!(
        preempt_core::diffnet::io::to_string(&out_plain.model),
        preempt_core::diffnet::io::to_string(&out_adv0.model)
    );

    // (iii) sigma = 0 smoothed ops bit-equal base ops on a shared stream.
    let model = out_plain.model;
    let s0 = SmoothConfig::standard(0.0);
    let spec = PerturbSpec::new(NormP::L2, 0.2, 0.2).unwrap();
    let cfg = PgdConfig::standard(0.2);
    for (i, (x, _)) in holdout.iter().enumerate().take(10) {
        let i = i as u64;
        let mut rng = rngstream::derive(25, "s", &[i]);
        assert_eq!(
            smoothed_predict(&model, x, &s0, &mut rng).unwrap(),
            model.predict(x).unwrap()
        );
        let (p, g) = smoothed_soft(&model, x, 0, &s0, &mut rng).unwrap();
        let (pb, gb) = model.soft_prob_grad(x, 0).unwrap();
        assert_eq!(p, pb);
        assert_eq!(g, gb);

        let mut rng_a = rngstream::derive(26, "s", &[i]);
        let mut rng_b = rngstream::derive(26, "s", &[i]);
        let base = pgd_trace(&model, x, 0, &spec, &cfg, &mut rng_a).unwrap();
        let smooth = randomized_pgd_trace(&model, x, 0, &spec, &cfg, 0.0, 5, &mut rng_b).unwrap();
        assert_eq!(base.final_point(), smooth.final_point());
        assert_eq!(base.final_loss, smooth.final_loss);
        assert_eq!(rng_a, rng_b, "criterion 10: streams diverged at sigma = 0");
    }

    pass("criterion 10: degeneracy equivalences bit-exact (preempt(L=0,d=0) == adversarial; adversarial(K=0) == plain; sigma=0 smoothed ops == base ops)");
}

// ------------------------------------------------------------- criterion 11

#[test]
fn criterion_11_selftest_determinism() {
    let bin = env!("CARGO_BIN_EXE_preempt");
    let dir1 = tempfile::tempdir().unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    for dir in [&dir1, &dir2] {
        let status = std::process::Command::new(bin)
            .args(["selftest", "--out-dir"])
            .arg(dir.path())
            .status()
            .expect("selftest runs");
        assert!(
            status.success(),
            "criterion 11: selftest exited with {status:?}"
        );
    }
    let mut compared = 0usize;
    for sub in ["run_a", "run_b"] {
        let dir = dir1.path().join(sub);
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().and_then(|e| e.to_str()) != Some("csv") {
                continue;
            }
            let name = path.file_name().unwrap();
            let other = dir2.path().join(sub).join(name);
            let a = std::fs::read(&path).unwrap();
            let b = std::fs::read(&other).unwrap();
            assert_eq!(
                a,
                b,
                "criterion 11: {} differs between selftest invocations",
                name.to_string_lossy()
            );
            compared += 1;
        }
    }
    assert!(compared >= 10, "criterion 11: too few CSVs compared");
    pass(format!(
        "criterion 11: two selftest invocations produced byte-identical CSVs ({compared} files compared)"
    ));
}
