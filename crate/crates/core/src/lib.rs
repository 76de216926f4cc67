//! Preemptive robustification of classifier inputs against man-in-the-middle
//! adversarial perturbations.
//!
//! A defender who controls an image *before* an adversary sees it can nudge it
//! toward a nearby point that is both correctly classified and hard to attack
//! within an lp ball. This crate provides the pieces of that pipeline:
//!
//! * [`diffnet`] — a minimal reverse-mode autodiff engine over dense layers,
//!   with cross-entropy loss and input/parameter gradients.
//! * [`geometry`] — lp ball projections, uniform ball sampling, FGSM steps
//!   and the tanh reparameterization used for l-inf robustification.
//! * [`attack`] — multi-step PGD, multi-restart PGD and randomized PGD
//!   against smoothed soft classifiers.
//! * [`preempt`] — the bi-level robustification loop, its first-order and
//!   exact update gradients, and the certificate / Jacobian-bound checks.
//! * [`recon`] — original-image reconstruction and the adaptive white-box
//!   attack with its evaluation semantics.
//! * [`train`] — plain, adversarial and preemptively robust training.
//! * [`smooth`] — randomized smoothing: majority-vote prediction, smoothed
//!   soft classifier, certification and certified evaluation.
//!
//! All numeric code is generic over the scalar type via [`num::Real`]
//! (implemented for `f32` and `f64`); the experiment-facing aliases below pin
//! double precision, which the second-order diagnostics require.

pub mod attack;
pub mod diffnet;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod num;
pub mod preempt;
pub mod recon;
pub mod rngstream;
pub mod smooth;
pub mod stats;
pub mod train;
pub mod vector;

pub use error::{Error, Result};
pub use num::{real, Real};
pub use vector::Vector;

/// Scalar type used by the experiment harness and the CLI.
pub type Scalar = f64;
/// Double-precision vector.
pub type Vec64 = Vector<Scalar>;
/// Double-precision classifier.
pub type Classifier64 = diffnet::Classifier<Scalar>;
/// Double-precision perturbation spec.
pub type PerturbSpec64 = geometry::PerturbSpec<Scalar>;
