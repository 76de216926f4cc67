//! lp ball arithmetic shared by every algorithm.
//!
//! All functions here are pure; randomness comes in through an explicit rng
//! handle and callers own seeding.

use rand::Rng;

use crate::diffnet::Classifier;
use crate::error::{Error, Result};
use crate::num::{real, Real};
use crate::vector::Vector;

/// Norm order of the threat model; only 2 and infinity are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormP {
    L2,
    LInf,
}

impl NormP {
    pub fn name(self) -> &'static str {
        match self {
            NormP::L2 => "2",
            NormP::LInf => "inf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "2" | "l2" => Some(NormP::L2),
            "inf" | "linf" | "infinity" => Some(NormP::LInf),
            _ => None,
        }
    }

    pub fn norm<R: Real>(self, v: &Vector<R>) -> R {
        match self {
            NormP::L2 => v.norm_l2(),
            NormP::LInf => v.norm_linf(),
        }
    }

    pub fn distance<R: Real>(self, a: &Vector<R>, b: &Vector<R>) -> R {
        self.norm(&a.sub(b))
    }
}

/// Attack and defense budgets around a point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PerturbSpec<R> {
    pub p: NormP,
    /// Adversary budget.
    pub eps: R,
    /// Defender budget.
    pub delta: R,
}

impl<R: Real> PerturbSpec<R> {
    pub fn new(p: NormP, eps: R, delta: R) -> Result<Self> {
        if eps <= R::zero() || !eps.is_finite() {
            return Err(Error::InvalidConfig(format!("eps must be positive, got {eps}")));
        }
        if delta < R::zero() || !delta.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "delta must be non-negative, got {delta}"
            )));
        }
        Ok(Self { p, eps, delta })
    }

    /// The default experimental setting: defender and adversary share the
    /// same budget.
    pub fn symmetric(p: NormP, eps: R) -> Result<Self> {
        Self::new(p, eps, eps)
    }
}

/// Projects `x` onto the closed lp ball of the given radius around `center`.
///
/// A point already inside comes back unchanged (exactly). The l2 branch
/// rescales the offset, i.e. it has the form `k (x - center) + center` with
/// `0 < k <= 1`; the l-inf branch clamps per coordinate.
pub fn project_ball<R: Real>(
    x: &Vector<R>,
    center: &Vector<R>,
    radius: R,
    p: NormP,
) -> Result<Vector<R>> {
    if x.dim() != center.dim() {
        return Err(Error::DimensionMismatch {
            context: "project_ball",
            expected: center.dim(),
            got: x.dim(),
        });
    }
    if radius < R::zero() {
        return Err(Error::NegativeRadius {
            radius: radius.to_f64().unwrap_or(f64::NAN),
        });
    }
    match p {
        NormP::LInf => {
            let offset = x.sub(center);
            if offset.norm_linf() <= radius {
                return Ok(x.clone());
            }
            Ok(x
                .iter()
                .zip(center.iter())
                .map(|(&xi, &ci)| xi.min(ci + radius).max(ci - radius))
                .collect())
        }
        NormP::L2 => {
            let offset = x.sub(center);
            let norm = offset.norm_l2();
            if norm <= radius {
                return Ok(x.clone());
            }
            let k = radius / norm;
            Ok(center.axpy(k, &offset))
        }
    }
}

/// Clamps every coordinate into `[0, 1]`; identity on valid images.
pub fn clamp_unit_cube<R: Real>(x: &Vector<R>) -> Vector<R> {
    if x.in_unit_cube() {
        return x.clone();
    }
    x.iter()
        .map(|&v| v.min(R::one()).max(R::zero()))
        .collect()
}

/// Uniform sample from the lp ball of the given radius around the origin.
///
/// `radius == 0` returns the zero vector without consuming any randomness,
/// so degenerate budgets leave the caller's stream untouched.
pub fn sample_uniform_ball<R: Real, G: Rng>(
    dim: usize,
    radius: R,
    p: NormP,
    rng: &mut G,
) -> Vector<R> {
    assert!(dim >= 1, "sample_uniform_ball needs dim >= 1");
    assert!(radius >= R::zero());
    if radius == R::zero() {
        return Vector::zeros(dim);
    }
    match p {
        NormP::LInf => (0..dim)
            .map(|_| real::<R>(rng.gen_range(-1.0..=1.0)) * radius)
            .collect(),
        NormP::L2 => {
            // Gaussian direction, radius scaled by u^(1/dim) for uniformity
            // over the solid ball.
            let gauss: Vec<f64> = (0..dim)
                .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
                .collect();
            let norm: f64 = gauss.iter().map(|g| g * g).sum::<f64>().sqrt();
            let u: f64 = rng.gen_range(0.0..1.0);
            let r = u.powf(1.0 / dim as f64);
            if norm == 0.0 {
                return Vector::zeros(dim);
            }
            gauss
                .iter()
                .map(|&g| real::<R>(g / norm * r) * radius)
                .collect()
        }
    }
}

/// Gaussian noise `N(0, sigma^2 I)`; `sigma == 0` returns zeros without
/// consuming randomness.
pub fn sample_gaussian<R: Real, G: Rng>(dim: usize, sigma: R, rng: &mut G) -> Vector<R> {
    assert!(sigma >= R::zero());
    if sigma == R::zero() {
        return Vector::zeros(dim);
    }
    (0..dim)
        .map(|_| real::<R>(rng.sample::<f64, _>(rand_distr::StandardNormal)) * sigma)
        .collect()
}

/// Result of an FGSM step; `zero_grad` flags the guarded no-op when the l2
/// gradient norm vanishes.
#[derive(Debug, Clone)]
pub struct StepResult<R> {
    pub point: Vector<R>,
    pub zero_grad: bool,
}

/// Threshold below which a normalized l2 direction is numerically
/// meaningless.
pub fn grad_norm_floor<R: Real>() -> R {
    real::<R>(1e-12)
}

/// FGSM ascent step from a precomputed gradient.
///
/// For l-inf: `x + alpha * sgn(g)` with `sgn(0) = 0`. For l2:
/// `x + alpha * g / ||g||`, a guarded no-op when `||g||` underflows.
pub fn fgsm_step_from_grad<R: Real>(
    x: &Vector<R>,
    grad: &Vector<R>,
    alpha: R,
    p: NormP,
) -> StepResult<R> {
    debug_assert!(alpha > R::zero());
    match p {
        NormP::LInf => {
            let point = x
                .iter()
                .zip(grad.iter())
                .map(|(&xi, &gi)| {
                    let s = if gi > R::zero() {
                        R::one()
                    } else if gi < R::zero() {
                        -R::one()
                    } else {
                        R::zero()
                    };
                    xi + alpha * s
                })
                .collect();
            StepResult {
                point,
                zero_grad: false,
            }
        }
        NormP::L2 => {
            let norm = grad.norm_l2();
            if norm < grad_norm_floor() {
                StepResult {
                    point: x.clone(),
                    zero_grad: true,
                }
            } else {
                StepResult {
                    point: x.axpy(alpha / norm, grad),
                    zero_grad: false,
                }
            }
        }
    }
}

/// FGSM ascent step on the classifier's cross-entropy loss.
pub fn fgsm_step<R: Real>(
    model: &Classifier<R>,
    x: &Vector<R>,
    y: usize,
    alpha: R,
    p: NormP,
) -> Result<StepResult<R>> {
    let grad = model.input_grad(x, y)?;
    Ok(fgsm_step_from_grad(x, &grad, alpha, p))
}

/// Maps an unconstrained `w` into `B_delta^inf(x_o)` intersected with the
/// unit cube: `clip(x_o + delta * tanh(w))`. `w = 0` maps to `x_o`.
pub fn tanh_reparam<R: Real>(x_o: &Vector<R>, w: &Vector<R>, delta: R) -> Vector<R> {
    debug_assert_eq!(x_o.dim(), w.dim());
    x_o.iter()
        .zip(w.iter())
        .map(|(&xi, &wi)| (xi + delta * wi.tanh()).min(R::one()).max(R::zero()))
        .collect()
}

/// Elementwise `d x_r / d w` of [`tanh_reparam`]: `delta * (1 - tanh^2 w)`,
/// zero where the cube clip is active.
pub fn tanh_reparam_grad_chain<R: Real>(x_o: &Vector<R>, w: &Vector<R>, delta: R) -> Vector<R> {
    debug_assert_eq!(x_o.dim(), w.dim());
    x_o.iter()
        .zip(w.iter())
        .map(|(&xi, &wi)| {
            let t = wi.tanh();
            let pre = xi + delta * t;
            if pre < R::zero() || pre > R::one() {
                R::zero()
            } else {
                delta * (R::one() - t * t)
            }
        })
        .collect()
}

/// Inverse of the tanh map for in-ball offsets, used to seed a random
/// initialization in `w` space. Offsets are clamped fractionally inside
/// `(-delta, delta)` to keep atanh finite.
pub fn tanh_reparam_invert<R: Real>(offset: &Vector<R>, delta: R) -> Vector<R> {
    debug_assert!(delta > R::zero());
    let cap = real::<R>(1.0 - 1e-9);
    offset
        .iter()
        .map(|&o| {
            let u = (o / delta).min(cap).max(-cap);
            u.atanh()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn interior_point_is_returned_unchanged() {
        let x: Vector<f64> = vec![0.1, 0.2].into();
        let c: Vector<f64> = Vector::zeros(2);
        for p in [NormP::L2, NormP::LInf] {
            let r = project_ball(&x, &c, 1.0, p).unwrap();
            assert_eq!(r, x);
        }
    }

    #[test]
    fn l2_projection_rescales() {
        let x: Vector<f64> = vec![3.0, 4.0].into();
        let r = project_ball(&x, &Vector::zeros(2), 1.0, NormP::L2).unwrap();
        assert!((r[0] - 0.6).abs() < 1e-15);
        assert!((r[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn linf_projection_clamps_per_coordinate() {
        let x: Vector<f64> = vec![1.5, -0.2].into();
        let r = project_ball(&x, &Vector::zeros(2), 1.0, NormP::LInf).unwrap();
        assert_eq!(r.as_slice(), &[1.0, -0.2]);
    }

    #[test]
    fn negative_radius_is_an_error() {
        let x: Vector<f64> = vec![1.0].into();
        assert!(matches!(
            project_ball(&x, &Vector::zeros(1), -0.5, NormP::L2),
            Err(Error::NegativeRadius { .. })
        ));
    }

    #[test]
    fn zero_radius_sample_is_zero_and_consumes_no_randomness() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let before = rng.clone();
        let v = sample_uniform_ball::<f64, _>(5, 0.0, NormP::L2, &mut rng);
        assert_eq!(v, Vector::zeros(5));
        assert_eq!(rng, before);
    }

    #[test]
    fn linf_sample_statistics() {
        // Per-coordinate mean |value| converges to radius/2.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let radius = 0.8;
        let n = 10_000;
        let mut sum_abs = 0.0;
        for _ in 0..n {
            let v = sample_uniform_ball::<f64, _>(3, radius, NormP::LInf, &mut rng);
            assert!(v.norm_linf() <= radius);
            sum_abs += v.iter().map(|x| x.abs()).sum::<f64>() / 3.0;
        }
        let mean = sum_abs / n as f64;
        // Var of |U(-r,r)| is r^2/12; three coords averaged, n samples.
        let se = (radius * radius / 12.0 / (3 * n) as f64).sqrt();
        assert!(
            (mean - radius / 2.0).abs() < 3.0 * se,
            "mean={mean} expect={} se={se}",
            radius / 2.0
        );
    }

    #[test]
    fn l2_sample_radius_statistics() {
        // E[||v||] = dim/(dim+1) * radius; dim = 2 gives (2/3) radius.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let radius = 1.5;
        let n = 10_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = sample_uniform_ball::<f64, _>(2, radius, NormP::L2, &mut rng);
            let r = v.norm_l2();
            assert!(r <= radius + 1e-12);
            sum += r;
            sumsq += r * r;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        let se = (var / n as f64).sqrt();
        let expect = 2.0 / 3.0 * radius;
        assert!((mean - expect).abs() < 3.0 * se, "mean={mean} expect={expect}");
    }

    #[test]
    fn fgsm_linf_sign_rule() {
        let x: Vector<f64> = vec![0.5, 0.5, 0.5].into();
        let g: Vector<f64> = vec![0.3, -0.2, 0.0].into();
        let r = fgsm_step_from_grad(&x, &g, 0.1, NormP::LInf);
        assert!(!r.zero_grad);
        assert!((r.point[0] - 0.6).abs() < 1e-15);
        assert!((r.point[1] - 0.4).abs() < 1e-15);
        assert_eq!(r.point[2], 0.5); // sgn(0) = 0
    }

    #[test]
    fn fgsm_l2_normalizes() {
        let x: Vector<f64> = Vector::zeros(2);
        let g: Vector<f64> = vec![3.0, 4.0].into();
        let r = fgsm_step_from_grad(&x, &g, 0.1, NormP::L2);
        assert!((r.point[0] - 0.06).abs() < 1e-15);
        assert!((r.point[1] - 0.08).abs() < 1e-15);
    }

    #[test]
    fn fgsm_l2_zero_grad_guard() {
        let x: Vector<f64> = vec![0.2, 0.8].into();
        let g: Vector<f64> = Vector::zeros(2);
        let r = fgsm_step_from_grad(&x, &g, 0.1, NormP::L2);
        assert!(r.zero_grad);
        assert_eq!(r.point, x);
    }

    #[test]
    fn tanh_reparam_basics() {
        let x_o: Vector<f64> = vec![0.3, 0.9].into();
        let delta = 0.2;
        let at_zero = tanh_reparam(&x_o, &Vector::zeros(2), delta);
        assert_eq!(at_zero, x_o);

        // Saturation: w -> +inf maps to clip(x_o + delta).
        let w: Vector<f64> = vec![100.0, 100.0].into();
        let sat = tanh_reparam(&x_o, &w, delta);
        assert!((sat[0] - 0.5).abs() < 1e-9);
        assert_eq!(sat[1], 1.0);

        // The clipped coordinate has a zero chain factor.
        let chain = tanh_reparam_grad_chain(&x_o, &w, delta);
        assert_eq!(chain[1], 0.0);
    }

    proptest! {
        #[test]
        fn projection_is_idempotent_and_contracts(
            xs in proptest::collection::vec(-3.0f64..3.0, 1..6),
            cs in proptest::collection::vec(-1.0f64..1.0, 1..6),
            radius in 0.0f64..2.0,
            p_inf in proptest::bool::ANY,
        ) {
            let dim = xs.len().min(cs.len());
            let x: Vector<f64> = xs[..dim].to_vec().into();
            let c: Vector<f64> = cs[..dim].to_vec().into();
            let p = if p_inf { NormP::LInf } else { NormP::L2 };
            let once = project_ball(&x, &c, radius, p).unwrap();
            let twice = project_ball(&once, &c, radius, p).unwrap();
            match p {
                // Bitwise idempotent for the clamp.
                NormP::LInf => prop_assert_eq!(&once, &twice),
                NormP::L2 => {
                    prop_assert!(once.sub(&twice).norm_l2() <= 1e-12);
                }
            }
            // Inside the ball, with a rounding allowance.
            prop_assert!(p.distance(&once, &c) <= radius + 1e-12);
            // Contraction toward the center.
            prop_assert!(p.distance(&once, &c) <= p.distance(&x, &c) + 1e-12);
        }

        #[test]
        fn l2_projection_has_radial_form(
            xs in proptest::collection::vec(-3.0f64..3.0, 2..5),
            radius in 0.01f64..1.0,
        ) {
            let x: Vector<f64> = xs.clone().into();
            let c: Vector<f64> = Vector::zeros(x.dim());
            let proj = project_ball(&x, &c, radius, NormP::L2).unwrap();
            // proj = k x with 0 < k <= 1: check collinearity coordinatewise.
            let norm = x.norm_l2();
            prop_assume!(norm > 1e-9);
            let k = if norm <= radius { 1.0 } else { radius / norm };
            for j in 0..x.dim() {
                prop_assert!((proj[j] - k * x[j]).abs() <= 1e-12);
            }
            prop_assert!(k > 0.0 && k <= 1.0);
        }

        #[test]
        fn samples_stay_inside_the_ball(
            seed in 0u64..500,
            radius in 0.0f64..2.0,
            dim in 1usize..8,
            p_inf in proptest::bool::ANY,
        ) {
            let p = if p_inf { NormP::LInf } else { NormP::L2 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = sample_uniform_ball::<f64, _>(dim, radius, p, &mut rng);
            prop_assert!(p.norm(&v) <= radius + 1e-12);
        }

        #[test]
        fn tanh_reparam_stays_in_delta_ball(
            ws in proptest::collection::vec(-5.0f64..5.0, 1..6),
            x0 in 0.0f64..1.0,
            delta in 0.001f64..0.5,
        ) {
            let x_o: Vector<f64> = vec![x0; ws.len()].into();
            let w: Vector<f64> = ws.into();
            let x_r = tanh_reparam(&x_o, &w, delta);
            prop_assert!(x_r.sub(&x_o).norm_linf() <= delta + 1e-12);
            prop_assert!(x_r.in_unit_cube());
        }
    }
}
