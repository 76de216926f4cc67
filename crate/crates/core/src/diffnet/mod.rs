//! Dense classifiers with reverse-mode gradients.
//!
//! A [`Classifier`] is a stack of dense layers producing logits; it exposes
//! the hard label, softmax probabilities, cross-entropy loss and the loss
//! gradients with respect to the input and the parameters. Evaluation and
//! gradient computation are pure over a shared read-only model; parameter
//! updates need exclusive access.

pub mod io;
pub mod tape;

use rand::Rng;

use crate::error::{Error, Result};
use crate::num::{real, Real};
use crate::vector::Vector;

pub use tape::{affine_forward, log_sum_exp, softmax, Adjoints, NodeId, Tape};

/// Elementwise activation of a dense layer.
///
/// `Tanh` exists so the second-order diagnostics can run on a classifier
/// that is actually twice differentiable; `Relu` is not.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    pub fn is_twice_differentiable(self) -> bool {
        !matches!(self, Activation::Relu)
    }
}

/// One dense layer: `activation(W x + b)` with `W` stored row-major.
#[derive(Debug, Clone)]
pub struct Layer<R> {
    weights: Vector<R>,
    bias: Vector<R>,
    rows: usize,
    cols: usize,
    activation: Activation,
}

impl<R: Real> Layer<R> {
    pub fn new(
        rows: usize,
        cols: usize,
        activation: Activation,
        weights: Vector<R>,
        bias: Vector<R>,
    ) -> Result<Self> {
        if weights.dim() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "layer weights",
                expected: rows * cols,
                got: weights.dim(),
            });
        }
        if bias.dim() != rows {
            return Err(Error::DimensionMismatch {
                context: "layer bias",
                expected: rows,
                got: bias.dim(),
            });
        }
        if !weights.is_finite() || !bias.is_finite() {
            return Err(Error::NonFinite {
                context: "layer parameters",
            });
        }
        Ok(Self {
            weights,
            bias,
            rows,
            cols,
            activation,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Vector<R> {
        &self.weights
    }

    pub fn bias(&self) -> &Vector<R> {
        &self.bias
    }
}

/// Gradient (or update) bundle shaped like a model's parameters.
#[derive(Debug, Clone)]
pub struct ParamGrads<R> {
    pub layers: Vec<(Vector<R>, Vector<R>)>,
}

impl<R: Real> ParamGrads<R> {
    pub fn zeros_like(model: &Classifier<R>) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| (Vector::zeros(l.weights.dim()), Vector::zeros(l.bias.dim())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.layers.len(), other.layers.len());
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            w.add_assign(ow);
            b.add_assign(ob);
        }
    }

    pub fn scale_assign(&mut self, t: R) {
        for (w, b) in self.layers.iter_mut() {
            w.scale_assign(t);
            b.scale_assign(t);
        }
    }

    /// `self + t * other`, elementwise over every parameter.
    pub fn axpy_assign(&mut self, t: R, other: &Self) {
        debug_assert_eq!(self.layers.len(), other.layers.len());
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            *w = w.axpy(t, ow);
            *b = b.axpy(t, ob);
        }
    }

    pub fn max_abs(&self) -> R {
        self.layers.iter().fold(R::zero(), |acc, (w, b)| {
            acc.max(w.norm_linf()).max(b.norm_linf())
        })
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(w, b)| w.is_finite() && b.is_finite())
    }
}

/// Loss value plus both gradient views from a single backward pass.
#[derive(Debug, Clone)]
pub struct LossGrads<R> {
    pub loss: R,
    pub input: Vector<R>,
    pub params: ParamGrads<R>,
}

/// A feed-forward classifier over inputs in `[0,1]^n`.
#[derive(Debug, Clone)]
pub struct Classifier<R> {
    layers: Vec<Layer<R>>,
    input_dim: usize,
    num_classes: usize,
}

impl<R: Real> Classifier<R> {
    pub fn new(layers: Vec<Layer<R>>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| {
            Error::InvalidConfig("classifier needs at least one layer".into())
        })?;
        let input_dim = first.cols;
        let mut prev_rows = first.cols;
        for layer in &layers {
            if layer.cols != prev_rows {
                return Err(Error::DimensionMismatch {
                    context: "layer chain",
                    expected: prev_rows,
                    got: layer.cols,
                });
            }
            prev_rows = layer.rows;
        }
        let num_classes = prev_rows;
        Ok(Self {
            layers,
            input_dim,
            num_classes,
        })
    }

    /// MLP with the given layer widths, hidden activation, and an identity
    /// output layer. Weights are drawn uniformly in `+-1/sqrt(fan_in)`.
    pub fn random_mlp<G: Rng>(
        dims: &[usize],
        hidden: Activation,
        rng: &mut G,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig(
                "random_mlp needs input and output widths".into(),
            ));
        }
        let mut layers = Vec::new();
        for k in 0..dims.len() - 1 {
            let (cols, rows) = (dims[k], dims[k + 1]);
            let bound = 1.0 / (cols as f64).sqrt();
            let weights: Vector<R> = (0..rows * cols)
                .map(|_| real::<R>(rng.gen_range(-bound..bound)))
                .collect();
            let bias = Vector::zeros(rows);
            let activation = if k + 1 == dims.len() - 1 {
                Activation::Identity
            } else {
                hidden
            };
            layers.push(Layer::new(rows, cols, activation, weights, bias)?);
        }
        Self::new(layers)
    }

    /// Binary linear classifier with logits `[0, w.x + b]`.
    ///
    /// Class 1 wins where `w.x + b > 0`; the margin direction is exactly `w`,
    /// which the closed-form oracles rely on.
    pub fn binary_linear(w: &Vector<R>, b: R) -> Result<Self> {
        let dim = w.dim();
        let mut weights = Vector::zeros(2 * dim);
        for j in 0..dim {
            weights[dim + j] = w[j];
        }
        let bias = Vector::new(vec![R::zero(), b]);
        Self::new(vec![Layer::new(2, dim, Activation::Identity, weights, bias)?])
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layers(&self) -> &[Layer<R>] {
        &self.layers
    }

    pub fn has_twice_differentiable_activations(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.activation.is_twice_differentiable())
    }

    fn check_input(&self, x: &Vector<R>) -> Result<()> {
        if x.dim() != self.input_dim {
            return Err(Error::DimensionMismatch {
                context: "classifier input",
                expected: self.input_dim,
                got: x.dim(),
            });
        }
        if !x.is_finite() {
            return Err(Error::NonFinite {
                context: "classifier input",
            });
        }
        Ok(())
    }

    fn check_class(&self, y: usize) -> Result<()> {
        if y >= self.num_classes {
            return Err(Error::InvalidClassIndex {
                index: y,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    /// Logit vector of length `num_classes`.
    pub fn forward_logits(&self, x: &Vector<R>) -> Result<Vector<R>> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            h = affine_forward(&layer.weights, &layer.bias, &h, layer.rows, layer.cols);
            h = match layer.activation {
                Activation::Relu => h.iter().map(|&v| v.max(R::zero())).collect(),
                Activation::Tanh => h.iter().map(|&v| v.tanh()).collect(),
                Activation::Identity => h,
            };
        }
        Ok(h)
    }

    /// Soft probabilities `C(x)`; sums to one.
    pub fn probabilities(&self, x: &Vector<R>) -> Result<Vector<R>> {
        Ok(softmax(&self.forward_logits(x)?))
    }

    /// Hard label `c(x)`: argmax over probabilities, ties to the lowest
    /// class index.
    pub fn predict(&self, x: &Vector<R>) -> Result<usize> {
        let logits = self.forward_logits(x)?;
        Ok(argmax_lowest(&logits))
    }

    /// Builds the tape for one forward pass and returns all the handles the
    /// gradient ops need.
    fn trace(&self, x: &Vector<R>) -> (Tape<R>, NodeId, Vec<(NodeId, NodeId)>, NodeId) {
        let mut tape = Tape::new();
        let x_id = tape.leaf(x.clone());
        let mut param_ids = Vec::with_capacity(self.layers.len());
        let mut h = x_id;
        for layer in &self.layers {
            let w = tape.leaf(layer.weights.clone());
            let b = tape.leaf(layer.bias.clone());
            param_ids.push((w, b));
            h = tape.affine(w, b, h, layer.rows, layer.cols);
            h = match layer.activation {
                Activation::Relu => tape.relu(h),
                Activation::Tanh => tape.tanh(h),
                Activation::Identity => h,
            };
        }
        (tape, x_id, param_ids, h)
    }

    /// Cross-entropy loss `-log softmax(logits)[y]`.
    pub fn cross_entropy(&self, x: &Vector<R>, y: usize) -> Result<R> {
        self.check_class(y)?;
        let logits = self.forward_logits(x)?;
        Ok(log_sum_exp(&logits) - logits[y])
    }

    /// Loss and both gradients from one backward pass.
    pub fn loss_grads(&self, x: &Vector<R>, y: usize) -> Result<LossGrads<R>> {
        self.check_input(x)?;
        self.check_class(y)?;
        let (mut tape, x_id, param_ids, logits) = self.trace(x);
        let root = tape.cross_entropy(logits, y);
        let loss = tape.scalar(root);
        let mut adj = tape.backward(root);
        let input = adj.take(x_id);
        let params = ParamGrads {
            layers: param_ids
                .into_iter()
                .map(|(w, b)| (adj.take(w), adj.take(b)))
                .collect(),
        };
        Ok(LossGrads { loss, input, params })
    }

    /// `grad_x` of the cross-entropy loss.
    pub fn input_grad(&self, x: &Vector<R>, y: usize) -> Result<Vector<R>> {
        Ok(self.loss_grads(x, y)?.input)
    }

    /// Parameter-shaped gradient of the cross-entropy loss.
    pub fn param_grad(&self, x: &Vector<R>, y: usize) -> Result<ParamGrads<R>> {
        Ok(self.loss_grads(x, y)?.params)
    }

    /// Softmax probability of class `y` and its input gradient.
    pub fn soft_prob_grad(&self, x: &Vector<R>, y: usize) -> Result<(R, Vector<R>)> {
        self.check_input(x)?;
        self.check_class(y)?;
        let (mut tape, x_id, _params, logits) = self.trace(x);
        let root = tape.softmax_prob(logits, y);
        let p = tape.scalar(root);
        let mut adj = tape.backward(root);
        Ok((p, adj.take(x_id)))
    }

    /// Clones the parameters into a gradient-shaped bundle (used for weight
    /// decay and persistence round-trips).
    pub fn params(&self) -> ParamGrads<R> {
        ParamGrads {
            layers: self
                .layers
                .iter()
                .map(|l| (l.weights.clone(), l.bias.clone()))
                .collect(),
        }
    }

    /// `theta += scale * delta` over every parameter.
    pub fn apply_param_step(&mut self, delta: &ParamGrads<R>, scale: R) {
        debug_assert_eq!(self.layers.len(), delta.layers.len());
        for (layer, (dw, db)) in self.layers.iter_mut().zip(&delta.layers) {
            layer.weights = layer.weights.axpy(scale, dw);
            layer.bias = layer.bias.axpy(scale, db);
        }
    }
}

/// Argmax with ties broken toward the lowest index.
pub fn argmax_lowest<R: Real>(v: &Vector<R>) -> usize {
    let mut best = 0;
    for i in 1..v.dim() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}
