//! Grey-box attacks: T-step PGD with random start, multi-restart PGD, and
//! randomized PGD against smoothed soft classifiers.
//!
//! Restarts and per-example attacks are independent given read-only access
//! to the model; every restart runs on its own derived stream so results do
//! not depend on scheduling.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffnet::Classifier;
use crate::error::Result;
use crate::geometry::{
    clamp_unit_cube, fgsm_step_from_grad, project_ball, sample_uniform_ball, NormP, PerturbSpec,
};
use crate::num::Real;
use crate::smooth::SmoothedCeObjective;
use crate::vector::Vector;

/// PGD hyperparameters. The conventional defaults are 20 steps with step
/// size `eps / 4` and a uniform random start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PgdConfig<R> {
    pub steps: usize,
    pub step_size: R,
    pub random_start: bool,
    pub restarts: usize,
}

impl<R: Real> PgdConfig<R> {
    pub fn standard(eps: R) -> Self {
        Self {
            steps: 20,
            step_size: eps / crate::num::real(4.0),
            random_start: true,
            restarts: 1,
        }
    }

    pub fn with_restarts(mut self, restarts: usize) -> Self {
        self.restarts = restarts.max(1);
        self
    }
}

/// Rounding allowance for ball-membership checks, scaled to the scalar's
/// precision (the l-inf clamp bound `center + radius` itself rounds).
pub fn feasibility_tol<R: Real>(radius: R) -> R {
    (R::one() + radius) * R::epsilon() * crate::num::real(64.0)
}

/// A scalar objective the attacks ascend. The rng parameter exists for
/// Monte-Carlo objectives; deterministic ones ignore it.
pub trait Objective<R: Real> {
    fn loss<G: Rng>(&self, x: &Vector<R>, rng: &mut G) -> Result<R>;
    fn loss_and_grad<G: Rng>(&self, x: &Vector<R>, rng: &mut G) -> Result<(R, Vector<R>)>;
}

/// Cross-entropy of a fixed target class under the base classifier.
pub struct CeObjective<'a, R> {
    pub model: &'a Classifier<R>,
    pub target: usize,
}

impl<R: Real> Objective<R> for CeObjective<'_, R> {
    fn loss<G: Rng>(&self, x: &Vector<R>, _rng: &mut G) -> Result<R> {
        self.model.cross_entropy(x, self.target)
    }

    fn loss_and_grad<G: Rng>(&self, x: &Vector<R>, _rng: &mut G) -> Result<(R, Vector<R>)> {
        let lg = self.model.loss_grads(x, self.target)?;
        Ok((lg.loss, lg.input))
    }
}

/// One recorded PGD iteration: the raw FGSM point, after ball projection,
/// and after the unit-cube clamp. The exact update-gradient chain needs all
/// three to see which constraints were active.
#[derive(Debug, Clone)]
pub struct PgdStep<R> {
    pub pre_ball: Vector<R>,
    pub post_ball: Vector<R>,
    pub post_cube: Vector<R>,
    /// Loss at the point this step departed from.
    pub entry_loss: R,
    pub zero_grad: bool,
}

/// Full unrolled trajectory of one PGD run.
#[derive(Debug, Clone)]
pub struct PgdTrace<R> {
    /// Ball center (the attacked point).
    pub center: Vector<R>,
    /// Center plus noise, before the image-cube clamp.
    pub start_pre_cube: Vector<R>,
    /// `x^{a,0}`: center plus noise, clamped to the image cube.
    pub start: Vector<R>,
    pub steps: Vec<PgdStep<R>>,
    pub final_loss: R,
    pub zero_grad_steps: usize,
}

impl<R: Real> PgdTrace<R> {
    pub fn final_point(&self) -> &Vector<R> {
        self.steps.last().map_or(&self.start, |s| &s.post_cube)
    }

    /// Losses along `x^{a,0} .. x^{a,T}`.
    pub fn trajectory_losses(&self) -> Vec<R> {
        let mut out: Vec<R> = self.steps.iter().map(|s| s.entry_loss).collect();
        out.push(self.final_loss);
        out
    }
}

/// Runs the PGD dynamics on an arbitrary objective and records the
/// trajectory: random start, FGSM ascent, ball projection, cube clamp.
pub fn pgd_with<R: Real, O: Objective<R>, G: Rng>(
    obj: &O,
    x: &Vector<R>,
    eps: R,
    p: NormP,
    cfg: &PgdConfig<R>,
    rng: &mut G,
) -> Result<PgdTrace<R>> {
    let start_pre_cube = if cfg.random_start {
        let eta = sample_uniform_ball(x.dim(), eps, p, rng);
        x.add(&eta)
    } else {
        x.clone()
    };
    let start = clamp_unit_cube(&start_pre_cube);

    let mut cur = start.clone();
    let mut steps = Vec::with_capacity(cfg.steps);
    let mut zero_grad_steps = 0;
    for _ in 0..cfg.steps {
        let (entry_loss, grad) = obj.loss_and_grad(&cur, rng)?;
        let stepped = fgsm_step_from_grad(&cur, &grad, cfg.step_size, p);
        if stepped.zero_grad {
            zero_grad_steps += 1;
        }
        let post_ball = project_ball(&stepped.point, x, eps, p)?;
        let post_cube = clamp_unit_cube(&post_ball);
        cur = post_cube.clone();
        steps.push(PgdStep {
            pre_ball: stepped.point,
            post_ball,
            post_cube,
            entry_loss,
            zero_grad: stepped.zero_grad,
        });
    }
    let final_loss = obj.loss(&cur, rng)?;
    let trace = PgdTrace {
        center: x.clone(),
        start_pre_cube,
        start,
        steps,
        final_loss,
        zero_grad_steps,
    };
    debug_assert!(p.distance(trace.final_point(), x) <= eps + feasibility_tol(eps));
    debug_assert!(trace.final_point().in_unit_cube());
    Ok(trace)
}

/// T-step PGD with random start around `x`, ascending the cross-entropy of
/// target `y` within `B_eps(x)`; output stays in the ball and the cube.
pub fn pgd<R: Real, G: Rng>(
    model: &Classifier<R>,
    x: &Vector<R>,
    y: usize,
    spec: &PerturbSpec<R>,
    cfg: &PgdConfig<R>,
    rng: &mut G,
) -> Result<Vector<R>> {
    Ok(pgd_trace(model, x, y, spec, cfg, rng)?.final_point().clone())
}

/// Like [`pgd`] but returns the full trajectory.
pub fn pgd_trace<R: Real, G: Rng>(
    model: &Classifier<R>,
    x: &Vector<R>,
    y: usize,
    spec: &PerturbSpec<R>,
    cfg: &PgdConfig<R>,
    rng: &mut G,
) -> Result<PgdTrace<R>> {
    let obj = CeObjective { model, target: y };
    pgd_with(&obj, x, spec.eps, spec.p, cfg, rng)
}

/// One restart's outcome.
#[derive(Debug, Clone)]
pub struct AttackCandidate<R> {
    pub point: Vector<R>,
    pub loss: R,
    pub predicted: usize,
    pub misclassified: bool,
}

/// Runs `cfg.restarts` independent PGD attacks. Restart `i` uses a stream
/// seeded by the i-th draw from `rng`, so a run with fewer restarts is a
/// prefix of a run with more.
pub fn pgd_restarts_candidates<R: Real, G: Rng>(
    model: &Classifier<R>,
    x: &Vector<R>,
    y: usize,
    spec: &PerturbSpec<R>,
    cfg: &PgdConfig<R>,
    rng: &mut G,
) -> Result<Vec<AttackCandidate<R>>> {
    let seeds: Vec<u64> = (0..cfg.restarts.max(1)).map(|_| rng.gen()).collect();
    let mut out = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let mut restart_rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = pgd_trace(model, x, y, spec, cfg, &mut restart_rng)?;
        let point = trace.final_point().clone();
        let predicted = model.predict(&point)?;
        out.push(AttackCandidate {
            loss: trace.final_loss,
            misclassified: predicted != y,
            predicted,
            point,
        });
    }
    Ok(out)
}

/// Picks the strongest candidate: misclassifying ones beat non-misclassifying
/// ones regardless of loss, then higher loss wins. The adversary's objective
/// is a changed prediction, not raw loss.
pub fn best_candidate<R: Real>(candidates: &[AttackCandidate<R>]) -> &AttackCandidate<R> {
    candidates
        .iter()
        .reduce(|best, c| {
            let better = (c.misclassified && !best.misclassified)
                || (c.misclassified == best.misclassified && c.loss > best.loss);
            if better {
                c
            } else {
                best
            }
        })
        .expect("at least one restart")
}

/// Multi-restart PGD; returns the strongest candidate's point.
pub fn pgd_restarts<R: Real, G: Rng>(
    model: &Classifier<R>,
    x: &Vector<R>,
    y: usize,
    spec: &PerturbSpec<R>,
    cfg: &PgdConfig<R>,
    rng: &mut G,
) -> Result<Vector<R>> {
    let candidates = pgd_restarts_candidates(model, x, y, spec, cfg, rng)?;
    Ok(best_candidate(&candidates).point.clone())
}

/// PGD on the smoothed soft classifier: each step ascends
/// `-log(mean over M Gaussian samples of C(x + xi)_y)`.
///
/// With `sigma == 0` the smoothed loss is exactly the base cross-entropy and
/// no noise is drawn, so the run is step-for-step identical to [`pgd`] on
/// the same stream.
#[allow(clippy::too_many_arguments)]
pub fn randomized_pgd<R: Real, G: Rng>(
    model: &Classifier<R>,
    x: &Vector<R>,
    y: usize,
    spec: &PerturbSpec<R>,
    cfg: &PgdConfig<R>,
    sigma: R,
    m: usize,
    rng: &mut G,
) -> Result<Vector<R>> {
    Ok(
        randomized_pgd_trace(model, x, y, spec, cfg, sigma, m, rng)?
            .final_point()
            .clone(),
    )
}

/// Trajectory-recording variant of [`randomized_pgd`].
#[allow(clippy::too_many_arguments)]
pub fn randomized_pgd_trace<R: Real, G: Rng>(
    model: &Classifier<R>,
    x: &Vector<R>,
    y: usize,
    spec: &PerturbSpec<R>,
    cfg: &PgdConfig<R>,
    sigma: R,
    m: usize,
    rng: &mut G,
) -> Result<PgdTrace<R>> {
    let obj = SmoothedCeObjective::new(model, y, sigma, m);
    pgd_with(&obj, x, spec.eps, spec.p, cfg, rng)
}

/// Multi-restart randomized PGD. Selection is by smoothed loss; a noisy
/// majority-vote misclassification check per candidate would dominate the
/// cost without changing the ordering in practice.
#[allow(clippy::too_many_arguments)]
pub fn randomized_pgd_restarts<R: Real, G: Rng>(
    model: &Classifier<R>,
    x: &Vector<R>,
    y: usize,
    spec: &PerturbSpec<R>,
    cfg: &PgdConfig<R>,
    sigma: R,
    m: usize,
    rng: &mut G,
) -> Result<Vector<R>> {
    let seeds: Vec<u64> = (0..cfg.restarts.max(1)).map(|_| rng.gen()).collect();
    let mut best: Option<(R, Vector<R>)> = None;
    for seed in seeds {
        let mut restart_rng = ChaCha8Rng::seed_from_u64(seed);
        let trace = randomized_pgd_trace(model, x, y, spec, cfg, sigma, m, &mut restart_rng)?;
        let loss = trace.final_loss;
        let point = trace.final_point().clone();
        let replace = best.as_ref().is_none_or(|(l, _)| loss > *l);
        if replace {
            best = Some((loss, point));
        }
    }
    Ok(best.expect("at least one restart").1)
}
