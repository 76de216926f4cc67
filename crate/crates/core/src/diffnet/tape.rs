//! Reverse-mode tape over dense vector ops.
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order; the backward pass walks them once in reverse. A tape
//! is single-use and confined to one logical thread.

use crate::num::Real;
use crate::vector::Vector;

/// Handle to a recorded value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `y = W x + b` with `W` a `rows x cols` row-major leaf.
    Affine {
        w: NodeId,
        b: NodeId,
        x: NodeId,
        rows: usize,
        cols: usize,
    },
    Relu(NodeId),
    Tanh(NodeId),
    /// Scalar `-log softmax(logits)[target]`, fused for stability.
    CrossEntropy { logits: NodeId, target: usize },
    /// Scalar `softmax(logits)[target]`.
    SoftmaxProb { logits: NodeId, target: usize },
}

struct Node<R> {
    op: Op,
    value: Vector<R>,
}

pub struct Tape<R> {
    nodes: Vec<Node<R>>,
}

/// Numerically stable softmax.
pub fn softmax<R: Real>(logits: &Vector<R>) -> Vector<R> {
    let max = logits
        .iter()
        .fold(R::neg_infinity(), |acc, &z| acc.max(z));
    let exps: Vector<R> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: R = exps.iter().copied().sum();
    exps.scale(R::one() / sum)
}

/// `log(sum(exp(logits)))` without overflow.
pub fn log_sum_exp<R: Real>(logits: &Vector<R>) -> R {
    let max = logits
        .iter()
        .fold(R::neg_infinity(), |acc, &z| acc.max(z));
    let sum: R = logits.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln()
}

/// Shared affine kernel; the plain forward path and the tape use the same
/// operation order so their values agree bitwise.
pub fn affine_forward<R: Real>(
    w: &Vector<R>,
    b: &Vector<R>,
    x: &Vector<R>,
    rows: usize,
    cols: usize,
) -> Vector<R> {
    debug_assert_eq!(w.dim(), rows * cols);
    debug_assert_eq!(b.dim(), rows);
    debug_assert_eq!(x.dim(), cols);
    (0..rows)
        .map(|i| {
            let mut acc = b[i];
            for j in 0..cols {
                acc += w[i * cols + j] * x[j];
            }
            acc
        })
        .collect()
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, id: NodeId) -> &Vector<R> {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> R {
        debug_assert_eq!(self.nodes[id.0].value.dim(), 1);
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, op: Op, value: Vector<R>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Vector<R>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn affine(&mut self, w: NodeId, b: NodeId, x: NodeId, rows: usize, cols: usize) -> NodeId {
        let value = affine_forward(
            self.value(w),
            self.value(b),
            self.value(x),
            rows,
            cols,
        );
        self.push(Op::Affine { w, b, x, rows, cols }, value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value: Vector<R> = self.value(x).iter().map(|&v| v.max(R::zero())).collect();
        self.push(Op::Relu(x), value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value: Vector<R> = self.value(x).iter().map(|&v| v.tanh()).collect();
        self.push(Op::Tanh(x), value)
    }

    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> NodeId {
        let z = self.value(logits);
        debug_assert!(target < z.dim());
        let loss = log_sum_exp(z) - z[target];
        self.push(
            Op::CrossEntropy { logits, target },
            Vector::new(vec![loss]),
        )
    }

    pub fn softmax_prob(&mut self, logits: NodeId, target: usize) -> NodeId {
        let p = softmax(self.value(logits));
        debug_assert!(target < p.dim());
        self.push(
            Op::SoftmaxProb { logits, target },
            Vector::new(vec![p[target]]),
        )
    }

    /// Runs the backward pass from a scalar root and returns per-node
    /// adjoints. Each op is visited exactly once, in reverse topological
    /// order; nodes the root does not reach keep zero adjoints.
    pub fn backward(self, root: NodeId) -> Adjoints<R> {
        assert_eq!(
            self.nodes[root.0].value.dim(),
            1,
            "backward root must be scalar"
        );
        let mut adj: Vec<Vector<R>> = self
            .nodes
            .iter()
            .map(|n| Vector::zeros(n.value.dim()))
            .collect();
        adj[root.0][0] = R::one();

        for id in (0..=root.0).rev() {
            // Split borrows: take this node's adjoint, scatter into inputs.
            let out = std::mem::replace(&mut adj[id], Vector::zeros(0));
            match self.nodes[id].op {
                Op::Leaf => {
                    adj[id] = out;
                    continue;
                }
                Op::Affine { w, b, x, rows, cols } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    for i in 0..rows {
                        let o = out[i];
                        adj[b.0][i] += o;
                        for j in 0..cols {
                            adj[w.0][i * cols + j] += o * xv[j];
                            adj[x.0][j] += o * wv[i * cols + j];
                        }
                    }
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    for j in 0..out.dim() {
                        if xv[j] > R::zero() {
                            adj[x.0][j] += out[j];
                        }
                    }
                }
                Op::Tanh(x) => {
                    let tv = &self.nodes[id].value;
                    for j in 0..out.dim() {
                        adj[x.0][j] += out[j] * (R::one() - tv[j] * tv[j]);
                    }
                }
                Op::CrossEntropy { logits, target } => {
                    let p = softmax(&self.nodes[logits.0].value);
                    let o = out[0];
                    for j in 0..p.dim() {
                        let indicator = if j == target { R::one() } else { R::zero() };
                        adj[logits.0][j] += o * (p[j] - indicator);
                    }
                }
                Op::SoftmaxProb { logits, target } => {
                    let p = softmax(&self.nodes[logits.0].value);
                    let py = p[target];
                    let o = out[0];
                    for j in 0..p.dim() {
                        let indicator = if j == target { R::one() } else { R::zero() };
                        adj[logits.0][j] += o * py * (indicator - p[j]);
                    }
                }
            }
            adj[id] = out;
        }
        Adjoints { adj }
    }
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of a backward pass.
pub struct Adjoints<R> {
    adj: Vec<Vector<R>>,
}

impl<R: Real> Adjoints<R> {
    pub fn grad(&self, id: NodeId) -> &Vector<R> {
        &self.adj[id.0]
    }

    pub fn take(&mut self, id: NodeId) -> Vector<R> {
        std::mem::replace(&mut self.adj[id.0], Vector::zeros(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unreached_leaf_has_zero_gradient() {
        let mut tape: Tape<f64> = Tape::new();
        let used = tape.leaf(vec![1.0, 2.0].into());
        let unused = tape.leaf(vec![5.0].into());
        let root = tape.cross_entropy(used, 0);
        let adj = tape.backward(root);
        assert_eq!(adj.grad(unused).as_slice(), &[0.0]);
        assert!(adj.grad(used).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape: Tape<f64> = Tape::new();
        let z = tape.leaf(vec![0.3, -0.1, 0.5].into());
        let root = tape.cross_entropy(z, 1);
        let p = softmax(tape.value(z));
        let adj = tape.backward(root);
        let g = adj.grad(z);
        assert!((g[0] - p[0]).abs() < 1e-15);
        assert!((g[1] - (p[1] - 1.0)).abs() < 1e-15);
        assert!((g[2] - p[2]).abs() < 1e-15);
    }

    #[test]
    fn log_sum_exp_does_not_overflow() {
        let z: Vector<f64> = vec![1000.0, 0.0].into();
        let lse = log_sum_exp(&z);
        assert!(lse.is_finite());
        assert!((lse - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn tanh_adjoint_matches_finite_difference() {
        let loss_at = |x0: f64| {
            let mut tape: Tape<f64> = Tape::new();
            let x = tape.leaf(vec![x0].into());
            let w = tape.leaf(vec![1.0, 0.0].into());
            let b = tape.leaf(vec![0.0, 0.0].into());
            let t = tape.tanh(x);
            let z = tape.affine(w, b, t, 2, 1);
            let root = tape.cross_entropy(z, 0);
            (tape, x, root)
        };
        let (tape, x, root) = loss_at(0.7);
        let adj = tape.backward(root);
        let g = adj.grad(x)[0];

        let value = |x0: f64| {
            let (tape, _, root) = loss_at(x0);
            tape.scalar(root)
        };
        let h = 1e-6;
        let fd = (value(0.7 + h) - value(0.7 - h)) / (2.0 * h);
        assert!((g - fd).abs() < 1e-8, "g={g} fd={fd}");
    }
}
