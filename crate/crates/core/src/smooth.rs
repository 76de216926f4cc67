//! Randomized smoothing: majority-vote prediction, the smoothed soft
//! classifier, preemptive robustification against smoothed models, and
//! certification with Clopper-Pearson bounds.
//!
//! Everything degenerates exactly to the base classifier at `sigma == 0`
//! without consuming randomness, so degenerate configurations stay on the
//! same stream as their base counterparts.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attack::Objective;
use crate::diffnet::Classifier;
use crate::error::{Error, Result};
use crate::geometry::{sample_gaussian, PerturbSpec};
use crate::num::{real, Real};
use crate::preempt::{bilevel_loop, GradMode, RobustifyConfig, RobustifyReport};
use crate::stats::{clopper_pearson_lower, norm_quantile};
use crate::vector::Vector;

/// Sampling and certification parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SmoothConfig<R> {
    /// Gaussian noise level.
    pub sigma: R,
    /// Samples for majority-vote prediction.
    pub n_pred: usize,
    /// Samples for the certification bound.
    pub n_cert: usize,
    /// Per-step samples for randomized PGD and the smoothed soft loss.
    pub m: usize,
    /// Certification failure probability.
    pub conf_alpha: f64,
}

impl<R: Real> SmoothConfig<R> {
    pub fn standard(sigma: R) -> Self {
        Self {
            sigma,
            n_pred: 50,
            n_cert: 10_000,
            m: 5,
            conf_alpha: 0.001,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma < R::zero() {
            return Err(Error::InvalidConfig("sigma must be non-negative".into()));
        }
        if self.n_pred == 0 || self.n_cert == 0 || self.m == 0 {
            return Err(Error::InvalidConfig(
                "sample counts must be positive".into(),
            ));
        }
        if !(0.0 < self.conf_alpha && self.conf_alpha < 1.0) {
            return Err(Error::InvalidConfig(
                "conf_alpha must be in (0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Majority vote over `n_pred` Gaussian perturbations; ties go to the
/// lowest class index. At `sigma == 0` this is exactly the base prediction.
pub fn smoothed_predict<R: Real, G: Rng>(
    model: &Classifier<R>,
    x: &Vector<R>,
    cfg: &SmoothConfig<R>,
    rng: &mut G,
) -> Result<usize> {
    if cfg.sigma == R::zero() {
        return model.predict(x);
    }
    let mut votes = vec![0u64; model.num_classes()];
    for _ in 0..cfg.n_pred {
        let xi = sample_gaussian(x.dim(), cfg.sigma, rng);
        votes[model.predict(&x.add(&xi))?] += 1;
    }
    Ok(majority(&votes))
}

fn majority(votes: &[u64]) -> usize {
    let mut best = 0;
    for (i, &v) in votes.iter().enumerate().skip(1) {
        if v > votes[best] {
            best = i;
        }
    }
    best
}

/// Monte-Carlo estimate of the smoothed soft probability of class `y` and
/// the gradient of that estimator, for a fixed set of noise draws.
pub fn smoothed_soft_with_noise<R: Real>(
    model: &Classifier<R>,
    x: &Vector<R>,
    y: usize,
    noises: &[Vector<R>],
) -> Result<(R, Vector<R>)> {
    assert!(!noises.is_empty());
    let mut p_sum = R::zero();
    let mut g_sum = Vector::zeros(x.dim());
    for xi in noises {
        let (p, g) = model.soft_prob_grad(&x.add(xi), y)?;
        p_sum += p;
        g_sum.add_assign(&g);
    }
    let inv = R::one() / real(noises.len() as f64);
    Ok((p_sum * inv, g_sum.scale(inv)))
}

/// Smoothed soft probability `mean_m C(x + xi)_y` and its gradient, with
/// fresh noise. `sigma == 0` returns exactly the base soft probability.
pub fn smoothed_soft<R: Real, G: Rng>(
    model: &Classifier<R>,
    x: &Vector<R>,
    y: usize,
    cfg: &SmoothConfig<R>,
    rng: &mut G,
) -> Result<(R, Vector<R>)> {
    if cfg.sigma == R::zero() {
        return model.soft_prob_grad(x, y);
    }
    let noises: Vec<Vector<R>> = (0..cfg.m)
        .map(|_| sample_gaussian(x.dim(), cfg.sigma, rng))
        .collect();
    smoothed_soft_with_noise(model, x, y, &noises)
}

/// Cross-entropy of the smoothed soft classifier,
/// `-log(mean_m C(x + xi)_y)`, as an ascent objective for randomized PGD.
///
/// At `sigma == 0` the loss and gradient delegate to the base cross-entropy
/// computation, making runs bit-identical to the unsmoothed ones.
pub struct SmoothedCeObjective<'a, R> {
    model: &'a Classifier<R>,
    target: usize,
    sigma: R,
    m: usize,
}

impl<'a, R: Real> SmoothedCeObjective<'a, R> {
    pub fn new(model: &'a Classifier<R>, target: usize, sigma: R, m: usize) -> Self {
        assert!(m >= 1);
        Self {
            model,
            target,
            sigma,
            m,
        }
    }

    fn cfg(&self) -> SmoothConfig<R> {
        SmoothConfig {
            sigma: self.sigma,
            n_pred: 1,
            n_cert: 1,
            m: self.m,
            conf_alpha: 0.5,
        }
    }
}

impl<R: Real> Objective<R> for SmoothedCeObjective<'_, R> {
    fn loss<G: Rng>(&self, x: &Vector<R>, rng: &mut G) -> Result<R> {
        if self.sigma == R::zero() {
            return self.model.cross_entropy(x, self.target);
        }
        let (p, _) = smoothed_soft(self.model, x, self.target, &self.cfg(), rng)?;
        Ok(-p.ln())
    }

    fn loss_and_grad<G: Rng>(&self, x: &Vector<R>, rng: &mut G) -> Result<(R, Vector<R>)> {
        if self.sigma == R::zero() {
            let lg = self.model.loss_grads(x, self.target)?;
            return Ok((lg.loss, lg.input));
        }
        let (p, gp) = smoothed_soft(self.model, x, self.target, &self.cfg(), rng)?;
        if p == R::zero() {
            // All samples underflowed; the direction is undefined and the
            // step guards treat a zero gradient as a no-op.
            return Ok((R::infinity(), Vector::zeros(x.dim())));
        }
        Ok((-p.ln(), gp.scale(-R::one() / p)))
    }
}

/// Robustification against the smoothed classifier: the inner adversary is
/// randomized PGD on the smoothed soft loss, and the first-order update
/// gradient is the smoothed-loss gradient at the adversarial points.
///
/// With `sigma == 0` this is exactly [`crate::preempt::robustify`]. The
/// exact update-gradient mode is not defined for the Monte-Carlo loss.
pub fn robustify_smoothed<R: Real, G: Rng>(
    model: &Classifier<R>,
    x_o: &Vector<R>,
    spec: &PerturbSpec<R>,
    r_cfg: &RobustifyConfig<R>,
    s_cfg: &SmoothConfig<R>,
    rng: &mut G,
) -> Result<RobustifyReport<R>> {
    s_cfg.validate()?;
    if s_cfg.sigma == R::zero() {
        return crate::preempt::robustify(model, x_o, spec, r_cfg, rng);
    }
    if r_cfg.grad_mode == GradMode::Exact {
        return Err(Error::InvalidConfig(
            "exact update gradients are not defined for the smoothed loss".into(),
        ));
    }
    r_cfg.validate(spec, x_o.dim())?;

    let target = model.predict(x_o)?;
    let obj = SmoothedCeObjective::new(model, target, s_cfg.sigma, s_cfg.m);
    let inner = crate::attack::PgdConfig {
        restarts: 1,
        ..r_cfg.inner
    };

    let mut attack = |x_r: &Vector<R>, rng: &mut G| {
        crate::attack::pgd_with(&obj, x_r, spec.eps, spec.p, &inner, rng)
    };
    let mut update = |traces: &[crate::attack::PgdTrace<R>], rng: &mut G| {
        let mut sum = Vector::zeros(x_o.dim());
        for trace in traces {
            let (_, g) = obj.loss_and_grad(trace.final_point(), rng)?;
            sum.add_assign(&g);
        }
        Ok(sum.scale(R::one() / real(traces.len() as f64)))
    };
    let (x_r, grad_norms) = bilevel_loop(
        x_o,
        spec,
        r_cfg,
        false,
        r_cfg.optimizer,
        rng,
        &mut attack,
        &mut update,
    )?;
    Ok(RobustifyReport {
        x_r,
        target,
        grad_norms,
    })
}

/// Certification outcome: either a class with an l2 radius that provably
/// cannot change the smoothed prediction (at the configured confidence), or
/// an abstention.
#[derive(Debug, Clone, PartialEq)]
pub enum CertOutcome<R> {
    Certified {
        class: usize,
        p_lower: f64,
        radius: R,
    },
    Abstain {
        class: usize,
        p_lower: f64,
    },
}

impl<R: Real> CertOutcome<R> {
    pub fn class(&self) -> usize {
        match *self {
            CertOutcome::Certified { class, .. } | CertOutcome::Abstain { class, .. } => class,
        }
    }

    pub fn radius(&self) -> Option<R> {
        match *self {
            CertOutcome::Certified { radius, .. } => Some(radius),
            CertOutcome::Abstain { .. } => None,
        }
    }

    pub fn is_abstain(&self) -> bool {
        matches!(self, CertOutcome::Abstain { .. })
    }
}

/// Two-stage Monte-Carlo certification: select the candidate class with
/// `n_pred` samples, then lower-bound its probability with `n_cert` fresh
/// samples via the one-sided Clopper-Pearson bound and return the radius
/// `sigma * Phi^-1(p_lower)`, abstaining unless `p_lower > 1/2`.
///
/// The two stages run on disjoint streams derived from `rng`.
pub fn certify<R: Real, G: Rng>(
    model: &Classifier<R>,
    x: &Vector<R>,
    cfg: &SmoothConfig<R>,
    rng: &mut G,
) -> Result<CertOutcome<R>> {
    cfg.validate()?;
    if cfg.sigma == R::zero() {
        // Noiseless smoothing: every vote is the base prediction.
        let class = model.predict(x)?;
        let p_lower = clopper_pearson_lower(cfg.n_cert as u64, cfg.n_cert as u64, cfg.conf_alpha);
        return Ok(if p_lower > 0.5 {
            CertOutcome::Certified {
                class,
                p_lower,
                radius: R::zero(),
            }
        } else {
            CertOutcome::Abstain { class, p_lower }
        });
    }

    let mut select_rng = ChaCha8Rng::seed_from_u64(rng.gen());
    let mut bound_rng = ChaCha8Rng::seed_from_u64(rng.gen());

    let mut votes = vec![0u64; model.num_classes()];
    for _ in 0..cfg.n_pred {
        let xi = sample_gaussian(x.dim(), cfg.sigma, &mut select_rng);
        votes[model.predict(&x.add(&xi))?] += 1;
    }
    let candidate = majority(&votes);

    let mut hits = 0u64;
    for _ in 0..cfg.n_cert {
        let xi = sample_gaussian(x.dim(), cfg.sigma, &mut bound_rng);
        if model.predict(&x.add(&xi))? == candidate {
            hits += 1;
        }
    }
    let p_lower = clopper_pearson_lower(hits, cfg.n_cert as u64, cfg.conf_alpha);
    if p_lower > 0.5 {
        Ok(CertOutcome::Certified {
            class: candidate,
            p_lower,
            radius: cfg.sigma * real(norm_quantile(p_lower)),
        })
    } else {
        Ok(CertOutcome::Abstain {
            class: candidate,
            p_lower,
        })
    }
}

/// One certification row of the evaluation CSV.
#[derive(Debug, Clone)]
pub struct CertRow<R> {
    pub example_id: usize,
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
    pub p_lower: f64,
    /// Zero radius for abstentions (they never certify anything).
    pub radius: R,
    pub abstain: bool,
}

/// Aggregate certified evaluation.
#[derive(Debug, Clone)]
pub struct CertEvalReport<R> {
    pub rows: Vec<CertRow<R>>,
    /// Fraction with a correct, non-abstaining prediction and radius >= eps.
    /// Abstentions count as incorrect.
    pub certified_accuracy: f64,
    /// Fraction with a correct, non-abstaining prediction.
    pub clean_smoothed_accuracy: f64,
    pub abstain_rate: f64,
}

/// Certifies every example and reports certified accuracy at radius `eps`.
pub fn cert_eval<R: Real>(
    model: &Classifier<R>,
    examples: &[(Vector<R>, usize)],
    eps: R,
    cfg: &SmoothConfig<R>,
    seed: u64,
    stream: &str,
) -> Result<CertEvalReport<R>> {
    let mut rows = Vec::with_capacity(examples.len());
    let mut certified = 0usize;
    let mut clean = 0usize;
    let mut abstains = 0usize;
    for (i, (x, label)) in examples.iter().enumerate() {
        let mut rng = crate::rngstream::derive(seed, stream, &[i as u64]);
        let outcome = certify(model, x, cfg, &mut rng)?;
        let abstain = outcome.is_abstain();
        let predicted = outcome.class();
        let correct = !abstain && predicted == *label;
        let radius = outcome.radius().unwrap_or(R::zero());
        let (p_lower, radius) = match outcome {
            CertOutcome::Certified { p_lower, .. } => (p_lower, radius),
            CertOutcome::Abstain { p_lower, .. } => (p_lower, R::zero()),
        };
        if correct {
            clean += 1;
            if radius >= eps {
                certified += 1;
            }
        }
        if abstain {
            abstains += 1;
        }
        rows.push(CertRow {
            example_id: i,
            label: *label,
            predicted,
            correct,
            p_lower,
            radius,
            abstain,
        });
    }
    let n = examples.len().max(1) as f64;
    Ok(CertEvalReport {
        rows,
        certified_accuracy: certified as f64 / n,
        clean_smoothed_accuracy: clean as f64 / n,
        abstain_rate: abstains as f64 / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::Activation;
    use crate::rngstream;

    fn mlp(seed: u64) -> Classifier<f64> {
        let mut rng = rngstream::derive(seed, "model", &[]);
        Classifier::random_mlp(&[3, 8, 2], Activation::Tanh, &mut rng).unwrap()
    }

    #[test]
    fn sigma_zero_predict_equals_base_without_randomness() {
        let model = mlp(1);
        let x: Vector<f64> = vec![0.2, 0.5, 0.8].into();
        let cfg = SmoothConfig::standard(0.0);
        let mut rng = rngstream::derive(2, "s", &[]);
        let before = rng.clone();
        let got = smoothed_predict(&model, &x, &cfg, &mut rng).unwrap();
        assert_eq!(got, model.predict(&x).unwrap());
        assert_eq!(rng, before);
    }

    #[test]
    fn constant_classifier_votes_unanimously() {
        // Zero-weight model predicts class 0 everywhere by the tie rule.
        let model = Classifier::<f64>::binary_linear(&Vector::zeros(2), -5.0).unwrap();
        let x: Vector<f64> = vec![0.5, 0.5].into();
        let cfg = SmoothConfig {
            sigma: 0.3,
            n_pred: 25,
            ..SmoothConfig::standard(0.3)
        };
        let mut rng = rngstream::derive(3, "s", &[]);
        assert_eq!(smoothed_predict(&model, &x, &cfg, &mut rng).unwrap(), 0);
    }

    #[test]
    fn boundary_point_vote_fraction_near_half() {
        // On the decision hyperplane of a binary linear model the vote
        // fraction converges to 1/2.
        let w: Vector<f64> = vec![1.0, -1.0].into();
        let model = Classifier::binary_linear(&w, 0.0).unwrap();
        let x: Vector<f64> = vec![0.5, 0.5].into(); // w.x + b = 0
        let sigma = 0.1;
        let trials = 4000;
        let mut ones = 0usize;
        let mut rng = rngstream::derive(4, "s", &[]);
        for _ in 0..trials {
            let xi = sample_gaussian(2, sigma, &mut rng);
            if model.predict(&x.add(&xi)).unwrap() == 1 {
                ones += 1;
            }
        }
        let frac = ones as f64 / trials as f64;
        let se = (0.25 / trials as f64).sqrt();
        assert!((frac - 0.5).abs() < 3.0 * se, "frac={frac}");
    }

    #[test]
    fn sigma_zero_soft_is_exactly_base() {
        let model = mlp(5);
        let x: Vector<f64> = vec![0.3, 0.6, 0.9].into();
        let cfg = SmoothConfig::standard(0.0);
        let mut rng = rngstream::derive(6, "s", &[]);
        let (p, g) = smoothed_soft(&model, &x, 1, &cfg, &mut rng).unwrap();
        let (pb, gb) = model.soft_prob_grad(&x, 1).unwrap();
        assert_eq!(p, pb);
        assert_eq!(g, gb);
    }

    #[test]
    fn smoothed_probabilities_are_convex_combinations() {
        let model = mlp(7);
        let x: Vector<f64> = vec![0.4, 0.5, 0.6].into();
        let cfg = SmoothConfig {
            m: 16,
            ..SmoothConfig::standard(0.2)
        };
        let mut rng = rngstream::derive(8, "s", &[]);
        // Same noise for both classes so the probabilities sum to one.
        let noises: Vec<Vector<f64>> = (0..cfg.m)
            .map(|_| sample_gaussian(3, cfg.sigma, &mut rng))
            .collect();
        let (p0, _) = smoothed_soft_with_noise(&model, &x, 0, &noises).unwrap();
        let (p1, _) = smoothed_soft_with_noise(&model, &x, 1, &noises).unwrap();
        assert!((0.0..=1.0).contains(&p0));
        assert!((0.0..=1.0).contains(&p1));
        assert!((p0 + p1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn estimator_std_shrinks_like_inverse_sqrt_m() {
        let model = mlp(9);
        let x: Vector<f64> = vec![0.45, 0.5, 0.55].into();
        let sigma = 0.25;
        let var_of = |m: usize, tag: u64| {
            let trials = 1000;
            let mut vals = Vec::with_capacity(trials);
            for t in 0..trials {
                let mut rng = rngstream::derive(10, "var", &[tag, t as u64]);
                let cfg = SmoothConfig {
                    m,
                    ..SmoothConfig::standard(sigma)
                };
                let (p, _) = smoothed_soft(&model, &x, 0, &cfg, &mut rng).unwrap();
                vals.push(p);
            }
            let mean: f64 = vals.iter().sum::<f64>() / trials as f64;
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (trials - 1) as f64
        };
        let v1 = var_of(1, 0);
        let v4 = var_of(4, 1);
        let v16 = var_of(16, 2);
        // 1/M scaling within generous Monte-Carlo slack.
        assert!(v1 / v4 > 2.4 && v1 / v4 < 6.6, "v1/v4 = {}", v1 / v4);
        assert!(v4 / v16 > 2.4 && v4 / v16 < 6.6, "v4/v16 = {}", v4 / v16);
    }

    #[test]
    fn smoothed_soft_gradient_matches_common_random_numbers_fd() {
        let model = mlp(11);
        let x: Vector<f64> = vec![0.4, 0.5, 0.6].into();
        let mut rng = rngstream::derive(12, "s", &[]);
        let noises: Vec<Vector<f64>> = (0..8)
            .map(|_| sample_gaussian(3, 0.2, &mut rng))
            .collect();
        let (_, grad) = smoothed_soft_with_noise(&model, &x, 0, &noises).unwrap();
        let h = 1e-5;
        for j in 0..3 {
            let mut xp = x.clone();
            xp[j] += h;
            let mut xm = x.clone();
            xm[j] -= h;
            let (pp, _) = smoothed_soft_with_noise(&model, &xp, 0, &noises).unwrap();
            let (pm, _) = smoothed_soft_with_noise(&model, &xm, 0, &noises).unwrap();
            let fd = (pp - pm) / (2.0 * h);
            let denom = fd.abs().max(1e-8);
            assert!(
                ((grad[j] - fd) / denom).abs() < 1e-4,
                "j={j} grad={} fd={fd}",
                grad[j]
            );
        }
    }

    #[test]
    fn certify_radius_formula_cases() {
        // p_lower = 0.5 exactly: the formula gives radius 0 (boundary).
        assert_eq!(norm_quantile(0.5), 0.0);
        // p_lower ~ 0.8413: radius ~ sigma * 1.0.
        let q = norm_quantile(0.841_344_746_068_542_9);
        assert!((q - 1.0).abs() < 1e-6);
    }

    #[test]
    fn certify_sigma_zero_returns_base_class_radius_zero() {
        let model = mlp(13);
        let x: Vector<f64> = vec![0.2, 0.4, 0.8].into();
        let cfg = SmoothConfig::standard(0.0);
        let mut rng = rngstream::derive(14, "c", &[]);
        let out = certify(&model, &x, &cfg, &mut rng).unwrap();
        match out {
            CertOutcome::Certified {
                class,
                radius,
                p_lower,
            } => {
                assert_eq!(class, model.predict(&x).unwrap());
                assert_eq!(radius, 0.0);
                assert!(p_lower > 0.5);
            }
            CertOutcome::Abstain { .. } => panic!("should certify"),
        }
    }

    #[test]
    fn certify_radius_monotone_in_votes() {
        let n = 1000u64;
        let alpha = 0.001;
        let mut last = -1.0f64;
        for k in [600u64, 700, 800, 900, 990, 1000] {
            let p = clopper_pearson_lower(k, n, alpha);
            let radius = if p > 0.5 { norm_quantile(p) } else { f64::MIN };
            assert!(radius >= last, "k={k}");
            last = radius;
        }
    }

    #[test]
    fn cert_eval_eps_zero_equals_clean_smoothed_accuracy() {
        let model = mlp(15);
        let mut rng = rngstream::derive(16, "d", &[]);
        let examples: Vec<(Vector<f64>, usize)> = (0..12)
            .map(|_| {
                let x: Vector<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
                let y = rng.gen_range(0..2usize);
                (x, y)
            })
            .collect();
        let cfg = SmoothConfig {
            n_pred: 20,
            n_cert: 200,
            ..SmoothConfig::standard(0.15)
        };
        let report = cert_eval(&model, &examples, 0.0, &cfg, 17, "cert").unwrap();
        assert_eq!(report.certified_accuracy, report.clean_smoothed_accuracy);
    }

    #[test]
    fn cert_eval_unreachable_radius_certifies_nothing() {
        let model = mlp(18);
        let mut rng = rngstream::derive(19, "d", &[]);
        let examples: Vec<(Vector<f64>, usize)> = (0..6)
            .map(|_| {
                let x: Vector<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
                (x.clone(), model.predict(&x).unwrap())
            })
            .collect();
        let sigma = 0.1;
        let cfg = SmoothConfig {
            n_pred: 20,
            n_cert: 500,
            ..SmoothConfig::standard(sigma)
        };
        // The bound can never exceed sigma * Phi^-1(CP(n, n)).
        let ceiling = sigma * norm_quantile(clopper_pearson_lower(500, 500, cfg.conf_alpha));
        let report = cert_eval(&model, &examples, ceiling + 1e-9, &cfg, 20, "cert").unwrap();
        assert_eq!(report.certified_accuracy, 0.0);
    }
}
