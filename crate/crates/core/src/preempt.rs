//! The bi-level preemptive robustification loop and its diagnostics.
//!
//! Given a classifier and an original image, `robustify` searches within the
//! defender's budget for a point whose worst-case loss under the inner PGD
//! adversary is small. The update gradient is either the first-order
//! approximation (loss gradient at the adversarial points, inner Jacobians
//! dropped) or the exact chain through the unrolled dynamics, assembled from
//! finite-difference Hessian-vector products at toy dimensions.
//!
//! Also here: the sufficient-condition certificate check (worst-case loss at
//! most `ln 2` forces a preserved prediction), the analytic Jacobian of the
//! l2 FGSM dynamics with its finite-difference cross-check, and the induced
//! operator-norm bound check.

use rand::Rng;

use crate::attack::{pgd_restarts_candidates, pgd_with, CeObjective, PgdConfig, PgdTrace};
use crate::diffnet::Classifier;
use crate::error::{Error, Result};
use crate::geometry::{
    clamp_unit_cube, project_ball, sample_uniform_ball, tanh_reparam, tanh_reparam_grad_chain,
    tanh_reparam_invert, NormP, PerturbSpec,
};
use crate::linalg::{spectral_radius_symmetric, Mat};
use crate::num::{real, to_f64, Real};
use crate::vector::Vector;

/// Where the search starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    AtOriginal,
    RandomInDeltaBall,
}

/// How the robustified point is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RobustOptimizer {
    /// `x_r <- project(x_r - beta * g)`, then the image clamp.
    ProjectedGd,
    /// RMSProp on the unconstrained tanh parameterization; l-inf only.
    TanhRmsprop,
}

/// Update-gradient mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Drop the Jacobians of the inner dynamics.
    FirstOrder,
    /// Full chain product through the unrolled PGD; toy dimensions only.
    Exact,
}

/// Largest input dimension the exact chain accepts; the finite-difference
/// Hessian-vector products behind it are only trustworthy at toy scale.
pub const EXACT_MODE_MAX_DIM: usize = 16;

const RMSPROP_DECAY: f64 = 0.99;
const RMSPROP_DAMPING: f64 = 1e-8;

/// Hyperparameters of the robustification loop.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustifyConfig<R> {
    /// Outer iterations (MAXITER).
    pub max_iter: usize,
    /// Inner adversary; `restarts` is ignored here.
    pub inner: PgdConfig<R>,
    /// Number of inner adversarial examples averaged per update (N).
    pub n_samples: usize,
    /// Outer learning rate (beta).
    pub lr: R,
    pub init_mode: InitMode,
    pub optimizer: RobustOptimizer,
    pub grad_mode: GradMode,
}

impl<R: Real> RobustifyConfig<R> {
    /// Conventional settings: 100 outer iterations, 20 inner steps with step
    /// size `eps/4`, one sample; RMSProp at 0.1 in the l-inf geometry and
    /// projected descent at 1e-3 in l2.
    pub fn standard(spec: &PerturbSpec<R>) -> Self {
        let (optimizer, lr) = match spec.p {
            NormP::LInf => (RobustOptimizer::TanhRmsprop, real(0.1)),
            NormP::L2 => (RobustOptimizer::ProjectedGd, real(0.001)),
        };
        Self {
            max_iter: 100,
            inner: PgdConfig::standard(spec.eps),
            n_samples: 1,
            lr,
            init_mode: InitMode::AtOriginal,
            optimizer,
            grad_mode: GradMode::FirstOrder,
        }
    }

    pub fn validate(&self, spec: &PerturbSpec<R>, dim: usize) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be positive".into()));
        }
        if self.lr <= R::zero() {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if self.optimizer == RobustOptimizer::TanhRmsprop && spec.p != NormP::LInf {
            return Err(Error::RequiresInfNorm {
                context: "tanh_rmsprop optimizer",
            });
        }
        if self.grad_mode == GradMode::Exact && dim > EXACT_MODE_MAX_DIM {
            return Err(Error::DimTooLarge {
                context: "exact update gradient",
                dim,
                max: EXACT_MODE_MAX_DIM,
            });
        }
        Ok(())
    }
}

/// Outcome of one robustification run.
#[derive(Debug, Clone)]
pub struct RobustifyReport<R> {
    pub x_r: Vector<R>,
    /// Label the defender optimized for: the model's prediction at the
    /// original point.
    pub target: usize,
    /// l2 norm of the mean update gradient at each outer iteration.
    pub grad_norms: Vec<f64>,
}

/// Central-difference Hessian-vector product of a gradient oracle,
/// `H v ~ (g(x + h u) - g(x - h u)) * ||v|| / (2h)` with `u = v/||v||` and
/// `h = 1e-4 (1 + ||x||)`.
pub fn hessian_vector_product<R: Real>(
    grad_fn: &dyn Fn(&Vector<R>) -> Result<Vector<R>>,
    x: &Vector<R>,
    v: &Vector<R>,
) -> Result<Vector<R>> {
    let vnorm = v.norm_l2();
    if vnorm == R::zero() {
        return Ok(Vector::zeros(v.dim()));
    }
    let h = real::<R>(1e-4) * (R::one() + x.norm_l2());
    let unit = v.scale(R::one() / vnorm);
    let gp = grad_fn(&x.axpy(h, &unit))?;
    let gm = grad_fn(&x.axpy(-h, &unit))?;
    Ok(gp.sub(&gm).scale(vnorm / (h + h)))
}

fn cube_mask<R: Real>(adj: &mut Vector<R>, pre_clamp: &Vector<R>) {
    for i in 0..adj.dim() {
        if pre_clamp[i] < R::zero() || pre_clamp[i] > R::one() {
            adj[i] = R::zero();
        }
    }
}

/// Exact gradient of the final loss with respect to the ball center, via
/// reverse accumulation through the recorded dynamics.
///
/// Each recorded step is `cube(project(f(x)))`; the projection depends on
/// the center both through the trajectory and directly, and the direct term
/// is accumulated separately. For l2 the Jacobian of `f` comes from the
/// analytic formula with finite-difference Hessian-vector products; for
/// l-inf the sign step has identity Jacobian almost everywhere.
pub fn exact_chain_gradient<R: Real>(
    grad_fn: &dyn Fn(&Vector<R>) -> Result<Vector<R>>,
    trace: &PgdTrace<R>,
    alpha: R,
    eps: R,
    p: NormP,
) -> Result<Vector<R>> {
    let mut a = grad_fn(trace.final_point())?;
    let mut center_accum = Vector::zeros(a.dim());
    let center = &trace.center;

    for t in (0..trace.steps.len()).rev() {
        let step = &trace.steps[t];
        let prev = if t == 0 {
            &trace.start
        } else {
            &trace.steps[t - 1].post_cube
        };

        // Unit-cube clamp: zero adjoint where it was active.
        cube_mask(&mut a, &step.post_ball);

        match p {
            NormP::LInf => {
                // Per-coordinate ball clamp: a clamped coordinate sits at
                // center +- eps, so its derivative moves to the center.
                for i in 0..a.dim() {
                    if (step.pre_ball[i] - center[i]).abs() > eps {
                        center_accum[i] += a[i];
                        a[i] = R::zero();
                    }
                }
                // sign step: Jacobian is the identity a.e.
            }
            NormP::L2 => {
                let off = step.pre_ball.sub(center);
                let r = off.norm_l2();
                if r > eps {
                    // projection(v; c) = c + eps (v - c)/r:
                    // (dPi/dv)^T a = (eps/r)(a - u (u.a)); center gets the rest.
                    let u = off.scale(R::one() / r);
                    let ua = u.dot(&a);
                    let through = a.axpy(-ua, &u).scale(eps / r);
                    center_accum.add_assign(&a.sub(&through));
                    a = through;
                }
                // (grad f)^T a = a + (alpha/||g||) H (a - ghat (ghat.a))
                let g = grad_fn(prev)?;
                let gn = g.norm_l2();
                let ghat = g.scale(R::one() / gn);
                let pa = a.axpy(-ghat.dot(&a), &ghat);
                let hv = hessian_vector_product(grad_fn, prev, &pa)?;
                a = a.axpy(alpha / gn, &hv);
            }
        }
    }

    // Start: x^{a,0} = cube(center + noise).
    cube_mask(&mut a, &trace.start_pre_cube);
    Ok(a.add(&center_accum))
}

/// Mean update gradient over a batch of recorded inner attacks.
///
/// First-order: mean of the loss gradients at the adversarial points.
/// Exact: mean of the full chain products (refused above toy dimensions).
pub fn update_gradient<R: Real>(
    model: &Classifier<R>,
    traces: &[PgdTrace<R>],
    y: usize,
    mode: GradMode,
    alpha: R,
    spec: &PerturbSpec<R>,
) -> Result<Vector<R>> {
    assert!(!traces.is_empty());
    let dim = traces[0].center.dim();
    let grad_fn = move |x: &Vector<R>| model.input_grad(x, y);
    let mut sum = Vector::zeros(dim);
    for trace in traces {
        let g = match mode {
            GradMode::FirstOrder => grad_fn(trace.final_point())?,
            GradMode::Exact => {
                if dim > EXACT_MODE_MAX_DIM {
                    return Err(Error::DimTooLarge {
                        context: "exact update gradient",
                        dim,
                        max: EXACT_MODE_MAX_DIM,
                    });
                }
                exact_chain_gradient(&grad_fn, trace, alpha, spec.eps, spec.p)?
            }
        };
        sum.add_assign(&g);
    }
    Ok(sum.scale(R::one() / real(traces.len() as f64)))
}

/// Inner-attack closure of the bi-level loop.
pub(crate) type AttackFn<'a, R, G> = dyn FnMut(&Vector<R>, &mut G) -> Result<PgdTrace<R>> + 'a;
/// Batch update-gradient closure of the bi-level loop.
pub(crate) type UpdateGradFn<'a, R, G> = dyn FnMut(&[PgdTrace<R>], &mut G) -> Result<Vector<R>> + 'a;

/// Internal driver shared by robustification, its smoothed variant and the
/// reconstruction attack. `ascent` flips the outer update direction;
/// `anchor` is the center of the defender ball.
#[allow(clippy::too_many_arguments)]
pub(crate) fn bilevel_loop<R: Real, G: Rng>(
    anchor: &Vector<R>,
    spec: &PerturbSpec<R>,
    cfg: &RobustifyConfig<R>,
    ascent: bool,
    optimizer: RobustOptimizer,
    rng: &mut G,
    attack: &mut AttackFn<'_, R, G>,
    update_grad: &mut UpdateGradFn<'_, R, G>,
) -> Result<(Vector<R>, Vec<f64>)> {
    let dim = anchor.dim();
    let delta = spec.delta;

    // Initialization; the tanh route keeps its own unconstrained state.
    let mut w = Vector::zeros(dim);
    let mut x_r = match cfg.init_mode {
        InitMode::AtOriginal => anchor.clone(),
        InitMode::RandomInDeltaBall => {
            let eta = sample_uniform_ball(dim, delta, spec.p, rng);
            if optimizer == RobustOptimizer::TanhRmsprop && delta > R::zero() {
                w = tanh_reparam_invert(&eta, delta);
                tanh_reparam(anchor, &w, delta)
            } else {
                clamp_unit_cube(&anchor.add(&eta))
            }
        }
    };
    let mut rms = Vector::zeros(dim);
    let mut grad_norms = Vec::with_capacity(cfg.max_iter);
    let sign = if ascent { R::one() } else { -R::one() };

    for iter in 0..cfg.max_iter {
        let mut traces = Vec::with_capacity(cfg.n_samples);
        for _ in 0..cfg.n_samples {
            traces.push(attack(&x_r, rng)?);
        }
        let gbar = update_grad(&traces, rng)?;
        grad_norms.push(to_f64(gbar.norm_l2()));
        if !gbar.is_finite() {
            return Err(Error::NonFiniteUpdate {
                iter,
                trace: grad_norms,
            });
        }

        match optimizer {
            RobustOptimizer::ProjectedGd => {
                let stepped = x_r.axpy(sign * cfg.lr, &gbar);
                x_r = clamp_unit_cube(&project_ball(&stepped, anchor, delta, spec.p)?);
            }
            RobustOptimizer::TanhRmsprop => {
                let chain = tanh_reparam_grad_chain(anchor, &w, delta);
                let gw: Vector<R> = gbar
                    .iter()
                    .zip(chain.iter())
                    .map(|(&g, &c)| g * c)
                    .collect();
                let decay = real::<R>(RMSPROP_DECAY);
                let damping = real::<R>(RMSPROP_DAMPING);
                rms = rms
                    .iter()
                    .zip(gw.iter())
                    .map(|(&s, &g)| decay * s + (R::one() - decay) * g * g)
                    .collect();
                w = w
                    .iter()
                    .zip(gw.iter().zip(rms.iter()))
                    .map(|(&wi, (&gi, &si))| wi + sign * cfg.lr * gi / (si.sqrt() + damping))
                    .collect();
                x_r = tanh_reparam(anchor, &w, delta);
            }
        }
    }

    debug_assert!(
        spec.p.distance(&x_r, anchor) <= delta + crate::attack::feasibility_tol(delta)
    );
    debug_assert!(x_r.in_unit_cube());
    Ok((x_r, grad_norms))
}

/// Finds a point within the defender's budget around `x_o` that resists the
/// inner PGD adversary, targeting the model's own prediction at `x_o`.
///
/// The returned point satisfies the delta-ball and image constraints by
/// construction. A non-finite mean update gradient aborts with the norm
/// trace collected so far (expected only in exact mode, where vanishing
/// inner gradients blow up the chain).
pub fn robustify<R: Real, G: Rng>(
    model: &Classifier<R>,
    x_o: &Vector<R>,
    spec: &PerturbSpec<R>,
    cfg: &RobustifyConfig<R>,
    rng: &mut G,
) -> Result<RobustifyReport<R>> {
    cfg.validate(spec, x_o.dim())?;
    let target = model.predict(x_o)?;
    let obj = CeObjective { model, target };
    let inner = PgdConfig {
        restarts: 1,
        ..cfg.inner
    };
    let mode = cfg.grad_mode;
    let alpha = cfg.inner.step_size;

    let mut attack = |x_r: &Vector<R>, rng: &mut G| pgd_with(&obj, x_r, spec.eps, spec.p, &inner, rng);
    let mut update = |traces: &[PgdTrace<R>], _rng: &mut G| {
        update_gradient(model, traces, target, mode, alpha, spec)
    };
    let (x_r, grad_norms) = bilevel_loop(
        x_o,
        spec,
        cfg,
        false,
        cfg.optimizer,
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

/// Certificate check: the worst-case loss threshold that forces a preserved
/// prediction and bounds the full objective by twice the surrogate.
#[derive(Debug, Clone)]
pub struct Lemma1Report<R> {
    /// PGD-estimated sup of the loss over the eps ball (the candidate set
    /// includes the center, so the estimate is never below the center loss).
    pub h_tilde: R,
    /// `-log(0.5) = ln 2`.
    pub threshold: R,
    pub satisfied: bool,
    /// `2 * h_tilde` when satisfied.
    pub implied_bound: Option<R>,
    /// Whether the prediction at `x_r` equals the prediction at `x_o`;
    /// guaranteed whenever `satisfied` (up to an exact softmax tie).
    pub prediction_preserved: bool,
}

/// Estimates the worst-case loss around `x_r` with multi-restart PGD and
/// reports whether the certificate condition holds.
pub fn check_lemma1<R: Real, G: Rng>(
    model: &Classifier<R>,
    x_o: &Vector<R>,
    x_r: &Vector<R>,
    spec: &PerturbSpec<R>,
    attack_cfg: &PgdConfig<R>,
    rng: &mut G,
) -> Result<Lemma1Report<R>> {
    let y = model.predict(x_o)?;
    let candidates = pgd_restarts_candidates(model, x_r, y, spec, attack_cfg, rng)?;
    let center_loss = model.cross_entropy(x_r, y)?;
    let h_tilde = candidates
        .iter()
        .fold(center_loss, |acc, c| acc.max(c.loss));
    let threshold = real::<R>(std::f64::consts::LN_2);
    let satisfied = h_tilde <= threshold;
    let prediction_preserved = model.predict(x_r)? == y;
    Ok(Lemma1Report {
        h_tilde,
        threshold,
        satisfied,
        implied_bound: satisfied.then(|| h_tilde + h_tilde),
        prediction_preserved,
    })
}

/// Analytic-vs-numeric comparison of the l2 dynamics Jacobian.
#[derive(Debug, Clone)]
pub struct JacobianCheck<R> {
    /// `I + alpha (I - ghat ghat^T) H / ||g||` with a finite-difference H.
    pub analytic: Mat<R>,
    /// Direct finite difference of `f(x) = x + alpha g/||g||`.
    pub fd: Mat<R>,
    pub hessian: Mat<R>,
    /// Largest absolute eigenvalue of the Hessian.
    pub sigma: R,
    pub grad_norm: R,
    /// `1 + alpha sigma / ||g||`.
    pub bound_factor: R,
    /// Projection contraction factor; 1 when no projection is involved.
    pub projection_k: R,
    pub max_abs_diff: R,
}

const LEMMA2_MAX_DIM: usize = 8;
const LEMMA2_GRAD_FLOOR: f64 = 1e-10;

/// Central-difference Hessian of a gradient oracle, symmetrized.
pub fn fd_hessian<R: Real>(
    grad_fn: &dyn Fn(&Vector<R>) -> Result<Vector<R>>,
    x: &Vector<R>,
) -> Result<Mat<R>> {
    let dim = x.dim();
    let h = real::<R>(1e-5) * (R::one() + x.norm_l2());
    let mut rows = Vec::with_capacity(dim);
    for i in 0..dim {
        let mut e = Vector::zeros(dim);
        e[i] = R::one();
        let gp = grad_fn(&x.axpy(h, &e))?;
        let gm = grad_fn(&x.axpy(-h, &e))?;
        rows.push(gp.sub(&gm).scale(R::one() / (h + h)));
    }
    let mut hess = Mat::from_rows(&rows);
    hess.symmetrize();
    Ok(hess)
}

/// Jacobian check against an arbitrary twice-differentiable loss given by
/// its gradient oracle.
pub fn lemma2_jacobian_with<R: Real>(
    grad_fn: &dyn Fn(&Vector<R>) -> Result<Vector<R>>,
    x: &Vector<R>,
    alpha: R,
) -> Result<JacobianCheck<R>> {
    let dim = x.dim();
    let g = grad_fn(x)?;
    let gn = g.norm_l2();
    if gn < real(LEMMA2_GRAD_FLOOR) {
        return Err(Error::GradNormTooSmall {
            context: "dynamics Jacobian",
            norm: to_f64(gn),
            min: LEMMA2_GRAD_FLOOR,
        });
    }
    let hess = fd_hessian(grad_fn, x)?;

    // P = I - ghat ghat^T; analytic = I + alpha P H / ||g||.
    let ghat = g.scale(R::one() / gn);
    let projector = Mat::identity(dim).add(&Mat::outer(&ghat, &ghat).scale(-R::one()));
    let analytic = Mat::identity(dim).add(&projector.matmul(&hess).scale(alpha / gn));

    // Direct finite difference of the normalized-gradient step map.
    let f = |x: &Vector<R>| -> Result<Vector<R>> {
        let g = grad_fn(x)?;
        let n = g.norm_l2();
        Ok(x.axpy(alpha / n, &g))
    };
    let hstep = real::<R>(1e-5) * (R::one() + x.norm_l2());
    let mut fd = Mat::zeros(dim, dim);
    for j in 0..dim {
        let mut e = Vector::zeros(dim);
        e[j] = R::one();
        let fp = f(&x.axpy(hstep, &e))?;
        let fm = f(&x.axpy(-hstep, &e))?;
        let col = fp.sub(&fm).scale(R::one() / (hstep + hstep));
        for i in 0..dim {
            fd[(i, j)] = col[i];
        }
    }

    let sigma = spectral_radius_symmetric(&hess);
    let max_abs_diff = analytic.max_abs_diff(&fd);
    Ok(JacobianCheck {
        analytic,
        fd,
        hessian: hess,
        sigma,
        grad_norm: gn,
        bound_factor: R::one() + alpha * sigma / gn,
        projection_k: R::one(),
        max_abs_diff,
    })
}

fn check_lemma2_preconditions<R: Real>(model: &Classifier<R>, dim: usize) -> Result<()> {
    if !model.has_twice_differentiable_activations() {
        return Err(Error::RequiresSmoothActivations {
            context: "dynamics Jacobian",
        });
    }
    if dim > LEMMA2_MAX_DIM {
        return Err(Error::DimTooLarge {
            context: "dynamics Jacobian",
            dim,
            max: LEMMA2_MAX_DIM,
        });
    }
    Ok(())
}

/// Jacobian check of the l2 FGSM dynamics under the model's cross-entropy
/// loss. Requires tanh/identity activations and toy dimension.
pub fn lemma2_jacobian<R: Real>(
    model: &Classifier<R>,
    x: &Vector<R>,
    y: usize,
    alpha: R,
) -> Result<JacobianCheck<R>> {
    check_lemma2_preconditions(model, x.dim())?;
    let grad_fn = move |p: &Vector<R>| model.input_grad(p, y);
    lemma2_jacobian_with(&grad_fn, x, alpha)
}

/// Outcome of the operator-norm bound check.
#[derive(Debug, Clone)]
pub struct Prop1Report<R> {
    pub lhs: R,
    pub rhs: R,
    pub satisfied: bool,
    pub slack: R,
    pub check: JacobianCheck<R>,
}

/// Bound check against an arbitrary gradient oracle.
pub fn prop1_bound_check_with<R: Real>(
    grad_fn: &dyn Fn(&Vector<R>) -> Result<Vector<R>>,
    x: &Vector<R>,
    alpha: R,
    a: &Vector<R>,
    k: R,
) -> Result<Prop1Report<R>> {
    if k <= R::zero() || k > R::one() {
        return Err(Error::InvalidConfig(format!(
            "projection factor k must be in (0, 1], got {k}"
        )));
    }
    let mut check = lemma2_jacobian_with(grad_fn, x, alpha)?;
    check.projection_k = k;

    // (grad f_tilde)^T a = k (grad f)^T a, assembled from the analytic form.
    let fa = check.analytic.transpose_mul_vec(a);
    let lhs = fa.norm_l2() * k;
    let rhs = check.bound_factor * a.norm_l2();
    let slack = rhs - lhs;
    let tol = real::<R>(1e-10);
    let satisfied = lhs <= rhs * (R::one() + tol) + tol;
    Ok(Prop1Report {
        lhs,
        rhs,
        satisfied,
        slack,
        check,
    })
}

/// Verifies `||(grad f_tilde)^T a|| <= (1 + alpha sigma/||g||) ||a||` where
/// the projected dynamics scale by the contraction factor `k` in (0, 1].
pub fn prop1_bound_check<R: Real>(
    model: &Classifier<R>,
    x: &Vector<R>,
    y: usize,
    alpha: R,
    a: &Vector<R>,
    k: R,
) -> Result<Prop1Report<R>> {
    check_lemma2_preconditions(model, x.dim())?;
    let grad_fn = move |p: &Vector<R>| model.input_grad(p, y);
    prop1_bound_check_with(&grad_fn, x, alpha, a, k)
}
