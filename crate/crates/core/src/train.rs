//! Training loops: plain, PGD-adversarial, and preemptively robust.
//!
//! Preemptively robust training replaces the full robustification of each
//! training point by a cheap L-step descent within the defender ball, then
//! adversarially perturbs that point with K ascent steps and takes the
//! parameter gradient there. `L = 0, delta = 0` reduces the update sequence
//! exactly to standard adversarial training, and `K = 0` further reduces it
//! to plain training, stream for stream.

use rand::Rng;

use crate::diffnet::{Classifier, ParamGrads};
use crate::error::{Error, Result};
use crate::geometry::{
    clamp_unit_cube, fgsm_step_from_grad, project_ball, sample_uniform_ball, PerturbSpec,
};
use crate::num::{real, to_f64, Real};
use crate::vector::Vector;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Plain,
    Adversarial,
    PreemptRobust,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::Plain => "plain",
            TrainMode::Adversarial => "adversarial",
            TrainMode::PreemptRobust => "preempt_robust",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "plain" => Some(TrainMode::Plain),
            "adversarial" => Some(TrainMode::Adversarial),
            "preempt_robust" => Some(TrainMode::PreemptRobust),
            _ => None,
        }
    }
}

/// Which epoch's parameters the trainer returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointRule {
    Latest,
    /// Best robust accuracy on the holdout split (early-stopping style).
    BestHoldout,
}

#[derive(Debug, Clone)]
pub struct TrainConfig<R> {
    pub epochs: usize,
    /// L: descent steps toward the robustified point (preempt mode only).
    pub inner_min_steps: usize,
    /// Step size of the descent (beta).
    pub min_step: R,
    /// K: ascent steps of the inner adversary.
    pub inner_max_steps: usize,
    /// Step size of the ascent (alpha).
    pub max_step: R,
    pub spec: PerturbSpec<R>,
    pub lr: R,
    pub momentum: R,
    pub weight_decay: R,
    pub batch_size: usize,
    pub mode: TrainMode,
    pub checkpoint: CheckpointRule,
}

impl<R: Real> TrainConfig<R> {
    /// Conventional settings: L=1 with beta=delta, K=10 with alpha=eps/4,
    /// momentum SGD (0.9, weight decay 5e-4). Adversarial training keeps the
    /// best holdout checkpoint; the other modes keep the latest.
    pub fn standard(mode: TrainMode, spec: PerturbSpec<R>) -> Self {
        let checkpoint = match mode {
            TrainMode::Adversarial => CheckpointRule::BestHoldout,
            _ => CheckpointRule::Latest,
        };
        Self {
            epochs: 30,
            inner_min_steps: 1,
            min_step: spec.delta,
            inner_max_steps: 10,
            max_step: spec.eps / real(4.0),
            spec,
            lr: real(0.1),
            momentum: real(0.9),
            weight_decay: real(5e-4),
            batch_size: 64,
            mode,
            checkpoint,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.lr < R::zero() || self.momentum < R::zero() || self.weight_decay < R::zero() {
            return Err(Error::InvalidConfig(
                "lr, momentum and weight_decay must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Momentum SGD with weight decay folded into the gradient, PyTorch-style:
/// `v <- m v + (g + wd theta)`, `theta <- theta - lr v`.
#[derive(Debug, Clone)]
pub struct Sgd<R> {
    pub lr: R,
    pub momentum: R,
    pub weight_decay: R,
    velocity: Option<ParamGrads<R>>,
}

impl<R: Real> Sgd<R> {
    pub fn new(lr: R, momentum: R, weight_decay: R) -> Self {
        Self {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    pub fn step(&mut self, model: &mut Classifier<R>, grads: &ParamGrads<R>) {
        let mut effective = grads.clone();
        if self.weight_decay != R::zero() {
            effective.axpy_assign(self.weight_decay, &model.params());
        }
        let velocity = match self.velocity.take() {
            Some(mut v) => {
                v.scale_assign(self.momentum);
                v.add_assign(&effective);
                v
            }
            None => effective,
        };
        model.apply_param_step(&velocity, -self.lr);
        self.velocity = Some(velocity);
    }
}

/// One stateless SGD update; momentum needs state, so this runs a fresh
/// optimizer for exactly one step.
pub fn sgd_step<R: Real>(
    model: &mut Classifier<R>,
    grads: &ParamGrads<R>,
    lr: R,
    momentum: R,
    weight_decay: R,
) {
    Sgd::new(lr, momentum, weight_decay).step(model, grads);
}

/// Per-epoch metrics; losses and accuracies are f64 for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean optimized loss (at the perturbed points) over the epoch.
    pub train_loss: f64,
    /// Clean accuracy on the training split after the epoch.
    pub train_acc: f64,
    pub holdout_loss: f64,
    pub holdout_acc: f64,
    /// Holdout accuracy under the K-step training adversary.
    pub holdout_robust_acc: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<R> {
    pub model: Classifier<R>,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were returned (1-based; 0 for an empty run).
    pub selected_epoch: usize,
}

fn fisher_yates<G: Rng>(n: usize, rng: &mut G) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Builds the point the parameter gradient is taken at, per Alg. 2: an
/// optional L-step descent within the defender ball, then an optional
/// K-step ascent within the adversary ball. Zero-radius noise draws and
/// `K = 0` consume no randomness, which is what makes the degenerate modes
/// bit-equal to their simpler counterparts.
fn perturb_example<R: Real, G: Rng>(
    model: &Classifier<R>,
    x_o: &Vector<R>,
    y: usize,
    cfg: &TrainConfig<R>,
    rng: &mut G,
) -> Result<Vector<R>> {
    let spec = &cfg.spec;
    let x_r = match cfg.mode {
        TrainMode::Plain | TrainMode::Adversarial => x_o.clone(),
        TrainMode::PreemptRobust => {
            let eta = sample_uniform_ball(x_o.dim(), spec.delta, spec.p, rng);
            let mut x_r = clamp_unit_cube(&x_o.add(&eta));
            for _ in 0..cfg.inner_min_steps {
                let grad = model.input_grad(&x_r, y)?;
                let descended =
                    fgsm_step_from_grad(&x_r, &grad.scale(-R::one()), cfg.min_step, spec.p);
                let projected = project_ball(&descended.point, x_o, spec.delta, spec.p)?;
                x_r = clamp_unit_cube(&projected);
            }
            x_r
        }
    };

    let k = match cfg.mode {
        TrainMode::Plain => 0,
        _ => cfg.inner_max_steps,
    };
    if k == 0 {
        return Ok(x_r);
    }
    let eta = sample_uniform_ball(x_r.dim(), spec.eps, spec.p, rng);
    let mut x_ra = clamp_unit_cube(&x_r.add(&eta));
    for _ in 0..k {
        let grad = model.input_grad(&x_ra, y)?;
        let ascended = fgsm_step_from_grad(&x_ra, &grad, cfg.max_step, spec.p);
        let projected = project_ball(&ascended.point, &x_r, spec.eps, spec.p)?;
        x_ra = clamp_unit_cube(&projected);
    }
    Ok(x_ra)
}

fn clean_metrics<R: Real>(
    model: &Classifier<R>,
    set: &[(Vector<R>, usize)],
) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Ok((0.0, 0.0));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (x, y) in set {
        loss += to_f64(model.cross_entropy(x, *y)?);
        if model.predict(x)? == *y {
            correct += 1;
        }
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

fn robust_accuracy<R: Real>(
    model: &Classifier<R>,
    set: &[(Vector<R>, usize)],
    cfg: &TrainConfig<R>,
    eval_seed: u64,
    epoch: usize,
) -> Result<f64> {
    if set.is_empty() {
        return Ok(0.0);
    }
    // Evaluate under this mode's own inner adversary; plain training has
    // none, so its robust metric coincides with clean accuracy.
    let steps = match cfg.mode {
        TrainMode::Plain => 0,
        _ => cfg.inner_max_steps,
    };
    let attack = TrainConfig {
        mode: TrainMode::Adversarial,
        inner_max_steps: steps,
        ..cfg.clone()
    };
    let mut correct = 0usize;
    for (i, (x, y)) in set.iter().enumerate() {
        let mut rng =
            crate::rngstream::derive(eval_seed, "holdout-attack", &[epoch as u64, i as u64]);
        let x_adv = perturb_example(model, x, *y, &attack, &mut rng)?;
        if model.predict(&x_adv)? == *y {
            correct += 1;
        }
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Trains the model in place per the configured mode and returns the
/// selected checkpoint with the per-epoch history. Identical seeds give
/// bit-identical histories and parameters on one platform.
pub fn train<R: Real, G: Rng>(
    mut model: Classifier<R>,
    train_set: &[(Vector<R>, usize)],
    holdout: &[(Vector<R>, usize)],
    cfg: &TrainConfig<R>,
    rng: &mut G,
) -> Result<TrainOutcome<R>> {
    cfg.validate()?;
    // One draw for the holdout-attack stream, identical across modes so the
    // main stream stays aligned for the degeneracy equivalences.
    let eval_seed: u64 = rng.gen();

    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Classifier<R>)> = None;

    for epoch in 1..=cfg.epochs {
        let order = fisher_yates(train_set.len(), rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads = ParamGrads::zeros_like(&model);
            for &i in batch {
                let (x_o, y) = &train_set[i];
                let point = perturb_example(&model, x_o, *y, cfg, rng)?;
                let lg = model.loss_grads(&point, *y)?;
                if !lg.loss.is_finite() {
                    return Err(Error::NonFinite {
                        context: "training loss",
                    });
                }
                epoch_loss += to_f64(lg.loss);
                grads.add_assign(&lg.params);
            }
            grads.scale_assign(R::one() / real(batch.len() as f64));
            sgd.step(&mut model, &grads);
        }

        let (_, train_acc) = clean_metrics(&model, train_set)?;
        let (holdout_loss, holdout_acc) = clean_metrics(&model, holdout)?;
        let holdout_robust_acc = robust_accuracy(&model, holdout, cfg, eval_seed, epoch)?;
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train_set.len().max(1) as f64,
            train_acc,
            holdout_loss,
            holdout_acc,
            holdout_robust_acc,
        });

        if cfg.checkpoint == CheckpointRule::BestHoldout {
            let better = best
                .as_ref()
                .is_none_or(|(acc, _, _)| holdout_robust_acc > *acc);
            if better {
                best = Some((holdout_robust_acc, epoch, model.clone()));
            }
        }
    }

    let (model, selected_epoch) = match (cfg.checkpoint, best) {
        (CheckpointRule::BestHoldout, Some((_, epoch, snapshot))) => (snapshot, epoch),
        _ => {
            let last = history.last().map_or(0, |r| r.epoch);
            (model, last)
        }
    };
    Ok(TrainOutcome {
        model,
        history,
        selected_epoch,
    })
}
