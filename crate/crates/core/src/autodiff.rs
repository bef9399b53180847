//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded in creation order on a [`Tape`]; because an op can
//! only consume earlier nodes, creation order is already a topological order
//! and the backward pass is a single reverse sweep. Node values are immutable
//! after creation; gradients are the only mutable field.
//!
//! The spike nonlinearity is the one deliberately non-smooth op: its forward
//! is a hard threshold, its backward is the registered fast-sigmoid surrogate
//! derivative. Everything else is exactly differentiable, which is what the
//! finite-difference checks in the test suite rely on.

use crate::num::Real;
use crate::tensor::{broadcast_plan, Broadcast, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("backward: loss must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {0} does not belong to this tape")]
    ForeignNode(usize),
}

pub type AdResult<T> = Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElemKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Transpose {
        a: NodeId,
    },
    Elem {
        a: NodeId,
        b: NodeId,
        kind: ElemKind,
        plan: Broadcast,
    },
    Scale {
        a: NodeId,
        c: S,
    },
    Offset {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    Tanh {
        a: NodeId,
    },
    /// Smooth fast sigmoid `x/(1+|x|)` of `scale·(u−theta)`; the reference
    /// forward used when checking surrogate gradients.
    FastSigmoid {
        a: NodeId,
        theta: S,
        scale: S,
    },
    /// Heaviside forward (`u ≥ theta` → 1), fast-sigmoid surrogate backward.
    SpikeSurrogate {
        a: NodeId,
        theta: S,
        scale: S,
    },
    SoftmaxRows {
        a: NodeId,
    },
    Sum {
        a: NodeId,
    },
    Mean {
        a: NodeId,
    },
    Reshape {
        a: NodeId,
    },
    Concat {
        parts: Vec<NodeId>,
    },
}

struct NodeData<S> {
    value: Tensor<S>,
    grad: Tensor<S>,
    op: Op<S>,
}

/// Wengert tape: nodes in creation order, gradients accumulated in place.
pub struct Tape<S: Real> {
    nodes: Vec<NodeData<S>>,
}

impl<S: Real> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, name: &'static str) -> AdResult<NodeId> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name }.into());
        }
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(NodeData { value, grad, op });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Register an input or parameter value.
    pub fn leaf(&mut self, value: Tensor<S>) -> AdResult<NodeId> {
        self.push(value, Op::Leaf, "leaf")
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = Tensor::zeros(node.value.shape());
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        self.push(v, Op::MatMul { a, b }, "matmul")
    }

    pub fn transpose(&mut self, a: NodeId) -> AdResult<NodeId> {
        let v = self.nodes[a.0].value.transpose()?;
        self.push(v, Op::Transpose { a }, "transpose")
    }

    pub fn elementwise(&mut self, a: NodeId, b: NodeId, kind: ElemKind) -> AdResult<NodeId> {
        let (name, f): (&'static str, fn(S, S) -> S) = match kind {
            ElemKind::Add => ("add", |x, y| x + y),
            ElemKind::Sub => ("sub", |x, y| x - y),
            ElemKind::Mul => ("mul", |x, y| x * y),
        };
        let plan = broadcast_plan(
            self.nodes[a.0].value.shape(),
            self.nodes[b.0].value.shape(),
            name,
        )?;
        let v = self.nodes[a.0].value.zip(&self.nodes[b.0].value, name, f)?;
        self.push(v, Op::Elem { a, b, kind, plan }, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.elementwise(a, b, ElemKind::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.elementwise(a, b, ElemKind::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> AdResult<NodeId> {
        self.elementwise(a, b, ElemKind::Mul)
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> AdResult<NodeId> {
        let v = self.nodes[a.0].value.scale(c);
        self.push(v, Op::Scale { a, c }, "scale")
    }

    pub fn offset(&mut self, a: NodeId, c: S) -> AdResult<NodeId> {
        let v = self.nodes[a.0].value.offset(c);
        self.push(v, Op::Offset { a }, "offset")
    }

    pub fn sigmoid(&mut self, a: NodeId) -> AdResult<NodeId> {
        let v = self.nodes[a.0].value.map(sigmoid);
        self.push(v, Op::Sigmoid { a }, "sigmoid")
    }

    pub fn tanh(&mut self, a: NodeId) -> AdResult<NodeId> {
        let v = self.nodes[a.0].value.map(|x| x.tanh());
        self.push(v, Op::Tanh { a }, "tanh")
    }

    /// Smooth fast sigmoid of the shifted membrane: `s(scale·(u−theta))`.
    pub fn fast_sigmoid(&mut self, a: NodeId, theta: S, scale: S) -> AdResult<NodeId> {
        let v = self.nodes[a.0].value.map(|u| {
            let x = scale * (u - theta);
            x / (S::one() + x.abs())
        });
        self.push(v, Op::FastSigmoid { a, theta, scale }, "fast_sigmoid")
    }

    /// Binary spike: forward `u ≥ theta`, backward via the surrogate
    /// derivative `scale / (1 + |scale·(u−theta)|)²`.
    pub fn spike(&mut self, a: NodeId, theta: S, scale: S) -> AdResult<NodeId> {
        let v = self.nodes[a.0]
            .value
            .map(|u| if u >= theta { S::one() } else { S::zero() });
        self.push(v, Op::SpikeSurrogate { a, theta, scale }, "spike")
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> AdResult<NodeId> {
        let x = &self.nodes[a.0].value;
        let (r, c) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(x.shape());
        for i in 0..r {
            let row = &x.as_slice()[i * c..(i + 1) * c];
            let m = row.iter().fold(S::neg_infinity(), |acc, &v| acc.max(v));
            let exps: Vec<S> = row.iter().map(|&v| (v - m).exp()).collect();
            let z = exps.iter().fold(S::zero(), |acc, &v| acc + v);
            for j in 0..c {
                out.as_mut_slice()[i * c + j] = exps[j] / z;
            }
        }
        self.push(out, Op::SoftmaxRows { a }, "softmax_rows")
    }

    pub fn sum(&mut self, a: NodeId) -> AdResult<NodeId> {
        let v = Tensor::scalar(self.nodes[a.0].value.sum());
        self.push(v, Op::Sum { a }, "sum")
    }

    pub fn mean(&mut self, a: NodeId) -> AdResult<NodeId> {
        let v = Tensor::scalar(self.nodes[a.0].value.mean());
        self.push(v, Op::Mean { a }, "mean")
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> AdResult<NodeId> {
        let v = self.nodes[a.0].value.reshaped(shape)?;
        self.push(v, Op::Reshape { a }, "reshape")
    }

    /// Concatenate rank-1 tensors into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> AdResult<NodeId> {
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.nodes[p.0].value.as_slice());
        }
        let n = data.len();
        let v = Tensor::from_vec(&[n], data)?;
        self.push(
            v,
            Op::Concat {
                parts: parts.to_vec(),
            },
            "concat",
        )
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate: calling
    /// backward twice without `zero_grads` doubles every gradient.
    pub fn backward(&mut self, loss: NodeId) -> AdResult<()> {
        if loss.0 >= self.nodes.len() {
            return Err(AutodiffError::ForeignNode(loss.0));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(
                self.nodes[loss.0].value.shape().to_vec(),
            ));
        }
        // Per-sweep adjoints; folded into persistent grads at the end so that
        // repeated sweeps accumulate exactly.
        let mut adjoint: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[loss.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..self.nodes.len()).rev() {
            let Some(g) = adjoint[idx].take() else {
                continue;
            };
            self.backward_op(idx, &g, &mut adjoint)?;
            // Fold this node's adjoint into its persistent gradient.
            let grad = &mut self.nodes[idx].grad;
            for (dst, src) in grad.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *dst = *dst + *src;
            }
        }
        Ok(())
    }

    fn accumulate(adjoint: &mut [Option<Tensor<S>>], id: NodeId, contrib: Tensor<S>) {
        match &mut adjoint[id.0] {
            Some(existing) => {
                for (dst, src) in existing.as_mut_slice().iter_mut().zip(contrib.as_slice()) {
                    *dst = *dst + *src;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backward_op(
        &self,
        idx: usize,
        g: &Tensor<S>,
        adjoint: &mut [Option<Tensor<S>>],
    ) -> AdResult<()> {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                if bv.rank() == 2 {
                    // dA = g · Bᵀ ; dB = Aᵀ · g
                    let bt = bv.transpose()?;
                    Self::accumulate(adjoint, *a, g.matmul(&bt)?);
                    let at = av.transpose()?;
                    Self::accumulate(adjoint, *b, at.matmul(g)?);
                } else {
                    // y = A·x with x rank 1: dA = g ⊗ x ; dx = Aᵀ · g
                    Self::accumulate(adjoint, *a, g.outer(bv)?);
                    let at = av.transpose()?;
                    Self::accumulate(adjoint, *b, at.matmul(g)?);
                }
            }
            Op::Transpose { a } => {
                Self::accumulate(adjoint, *a, g.transpose()?);
            }
            Op::Elem { a, b, kind, plan } => {
                let av = &self.nodes[a.0].value;
                let bv = &self.nodes[b.0].value;
                let (ga, gb) = match kind {
                    ElemKind::Add => (g.clone(), g.clone()),
                    ElemKind::Sub => (g.clone(), g.scale(-S::one())),
                    ElemKind::Mul => (g.mul(bv)?, g.mul(av)?),
                };
                match plan {
                    Broadcast::Equal => {
                        Self::accumulate(adjoint, *a, ga);
                        Self::accumulate(adjoint, *b, gb);
                    }
                    Broadcast::RhsRow => {
                        Self::accumulate(adjoint, *a, ga);
                        // Reduce over the broadcast rows, then match rhs shape.
                        let reduced = gb.sum_rows().reshaped(bv.shape())?;
                        Self::accumulate(adjoint, *b, reduced);
                    }
                    Broadcast::LhsRow => {
                        let reduced = ga.sum_rows().reshaped(av.shape())?;
                        Self::accumulate(adjoint, *a, reduced);
                        Self::accumulate(adjoint, *b, gb);
                    }
                }
            }
            Op::Scale { a, c } => {
                Self::accumulate(adjoint, *a, g.scale(*c));
            }
            Op::Offset { a } => {
                Self::accumulate(adjoint, *a, g.clone());
            }
            Op::Sigmoid { a } => {
                let y = &node.value;
                let local = y.map(|v| v * (S::one() - v));
                Self::accumulate(adjoint, *a, g.mul(&local)?);
            }
            Op::Tanh { a } => {
                let y = &node.value;
                let local = y.map(|v| S::one() - v * v);
                Self::accumulate(adjoint, *a, g.mul(&local)?);
            }
            Op::FastSigmoid { a, theta, scale } => {
                let u = &self.nodes[a.0].value;
                let local = u.map(|v| {
                    let d = S::one() + (*scale * (v - *theta)).abs();
                    *scale / (d * d)
                });
                Self::accumulate(adjoint, *a, g.mul(&local)?);
            }
            Op::SpikeSurrogate { a, theta, scale } => {
                let u = &self.nodes[a.0].value;
                let local = u.map(|v| {
                    let d = S::one() + (*scale * (v - *theta)).abs();
                    *scale / (d * d)
                });
                Self::accumulate(adjoint, *a, g.mul(&local)?);
            }
            Op::SoftmaxRows { a } => {
                let y = &node.value;
                let (r, c) = (y.rows(), y.cols());
                let mut da = Tensor::zeros(y.shape());
                for i in 0..r {
                    let yr = &y.as_slice()[i * c..(i + 1) * c];
                    let gr = &g.as_slice()[i * c..(i + 1) * c];
                    let dot = yr
                        .iter()
                        .zip(gr)
                        .fold(S::zero(), |acc, (&yv, &gv)| acc + yv * gv);
                    for j in 0..c {
                        da.as_mut_slice()[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                Self::accumulate(adjoint, *a, da);
            }
            Op::Sum { a } => {
                let s = g.at(0);
                let shape = self.nodes[a.0].value.shape().to_vec();
                Self::accumulate(adjoint, *a, Tensor::filled(&shape, s));
            }
            Op::Mean { a } => {
                let n = self.nodes[a.0].value.len();
                let s = g.at(0) / S::of(n as f64);
                let shape = self.nodes[a.0].value.shape().to_vec();
                Self::accumulate(adjoint, *a, Tensor::filled(&shape, s));
            }
            Op::Reshape { a } => {
                let shape = self.nodes[a.0].value.shape().to_vec();
                Self::accumulate(adjoint, *a, g.reshaped(&shape)?);
            }
            Op::Concat { parts } => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p.0].value.len();
                    let slice = g.as_slice()[off..off + n].to_vec();
                    let part_shape = self.nodes[p.0].value.shape().to_vec();
                    Self::accumulate(adjoint, p, Tensor::from_vec(&part_shape, slice)?);
                    off += n;
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<S: Real>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    type T64 = Tensor<f64>;

    /// Independent oracle: central finite difference of a rebuilt forward
    /// pass, perturbing one leaf coordinate at a time.
    fn finite_diff(
        build: &dyn Fn(&mut Tape<f64>, &[T64]) -> NodeId,
        leaves: &[T64],
        leaf_idx: usize,
        coord: usize,
        h: f64,
    ) -> f64 {
        let eval = |delta: f64| -> f64 {
            let mut bumped: Vec<T64> = leaves.to_vec();
            let mut v = bumped[leaf_idx].as_slice().to_vec();
            v[coord] += delta;
            bumped[leaf_idx] = T64::from_vec(bumped[leaf_idx].shape(), v).unwrap();
            let mut tape = Tape::new();
            let loss = build(&mut tape, &bumped);
            tape.value(loss).at(0)
        };
        (eval(h) - eval(-h)) / (2.0 * h)
    }

    /// Check every leaf gradient of a scalar-valued graph against the
    /// finite-difference oracle.
    fn check_gradients(build: &dyn Fn(&mut Tape<f64>, &[T64]) -> NodeId, leaves: &[T64], tol: f64) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, leaves);
        tape.backward(loss).unwrap();
        for (li, leaf) in leaves.iter().enumerate() {
            for c in 0..leaf.len() {
                let fd = finite_diff(build, leaves, li, c, 1e-5);
                let an = tape.grad(NodeId(li)).at(c);
                let denom = fd.abs().max(an.abs()).max(1.0);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "leaf {li} coord {c}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn matmul_forward_hand_values() {
        let mut tape = Tape::new();
        let a = tape
            .leaf(T64::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let b = tape
            .leaf(T64::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap())
            .unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).as_slice(), &[11.0]);
    }

    #[test]
    fn matmul_grad_matches_frozen_fd_values() {
        // grad of sum(a·b) wrt a at a=I₂, b=[[2,3],[4,5]] is [[5,9],[5,9]]
        // (each row of dA is the row-sums of b's rows).
        let mut tape = Tape::new();
        let a = tape
            .leaf(T64::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        let b = tape
            .leaf(T64::from_vec(&[2, 2], vec![2.0, 3.0, 4.0, 5.0]).unwrap())
            .unwrap();
        let prod = tape.matmul(a, b).unwrap();
        let loss = tape.sum(prod).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).as_slice(), &[5.0, 9.0, 5.0, 9.0]);
    }

    #[test]
    fn elementwise_identities() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(T64::from_vec(&[3], vec![1.5, -2.0, 0.25]).unwrap())
            .unwrap();
        let zero = tape.leaf(T64::zeros(&[3])).unwrap();
        let one = tape.leaf(T64::filled(&[3], 1.0)).unwrap();
        let x_plus_zero = tape.add(x, zero).unwrap();
        let x_times_one = tape.mul(x, one).unwrap();
        assert_eq!(tape.value(x_plus_zero), tape.value(x));
        assert_eq!(tape.value(x_times_one), tape.value(x));
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.leaf(T64::zeros(&[1])).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).at(0), 0.5);
    }

    #[test]
    fn spike_threshold_convention() {
        let mut tape = Tape::new();
        let u = tape
            .leaf(T64::from_vec(&[3], vec![1.05, 0.9, 1.0]).unwrap())
            .unwrap();
        let s = tape.spike(u, 1.0, 1.0).unwrap();
        // u ≥ ϑ spikes, inclusive at the boundary.
        assert_eq!(tape.value(s).as_slice(), &[1.0, 0.0, 1.0]);
    }

    #[test]
    fn surrogate_derivative_values() {
        // d/dx [x/(1+|x|)] = 1/(1+|x|)²: 1.0 at x=0, 0.25 at x=1.
        let mut tape = Tape::new();
        let u = tape
            .leaf(T64::from_vec(&[2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let s = tape.spike(u, 1.0, 1.0).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(u).as_slice(), &[1.0, 0.25]);
    }

    #[test]
    fn backward_square_loss() {
        // loss = sum(w⊙w) at w=[3] → dw = [6]
        let mut tape = Tape::new();
        let w = tape.leaf(T64::from_vec(&[1], vec![3.0]).unwrap()).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(w).as_slice(), &[6.0]);
    }

    #[test]
    fn unreachable_nodes_get_zero_grad() {
        let mut tape = Tape::new();
        let x = tape
            .leaf(T64::from_vec(&[2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let w = tape.leaf(T64::from_vec(&[1], vec![3.0]).unwrap()).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(T64::zeros(&[2])).unwrap();
        assert!(matches!(
            tape.backward(x),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut tape = Tape::new();
        let w = tape.leaf(T64::from_vec(&[1], vec![3.0]).unwrap()).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        let g1 = tape.grad(w).at(0);
        tape.backward(loss).unwrap();
        let g2 = tape.grad(w).at(0);
        assert_eq!(g2, 2.0 * g1);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut tape = Tape::new();
        let big = tape.leaf(T64::filled(&[2], 1e308)).unwrap();
        let sum = tape.add(big, big);
        assert!(matches!(
            sum,
            Err(AutodiffError::Tensor(TensorError::NonFinite { .. }))
        ));
    }

    #[test]
    fn smooth_graph_gradients_match_finite_differences() {
        // Composite of every smooth op; rel error < 1e-6 per element.
        let build = |tape: &mut Tape<f64>, leaves: &[T64]| -> NodeId {
            let w = tape.leaf(leaves[0].clone()).unwrap();
            let x = tape.leaf(leaves[1].clone()).unwrap();
            let b = tape.leaf(leaves[2].clone()).unwrap();
            let wx = tape.matmul(w, x).unwrap();
            let pre = tape.add(wx, b).unwrap();
            let h = tape.tanh(pre).unwrap();
            let gate = tape.sigmoid(pre).unwrap();
            let gated = tape.mul(h, gate).unwrap();
            let soft = tape.fast_sigmoid(gated, 0.1, 1.0).unwrap();
            let scaled = tape.scale(soft, 1.7).unwrap();
            let shifted = tape.offset(scaled, 0.3).unwrap();
            let sq = tape.mul(shifted, shifted).unwrap();
            tape.mean(sq).unwrap()
        };
        let leaves = vec![
            T64::from_vec(&[3, 3], vec![0.2, -0.4, 0.1, 0.5, 0.3, -0.2, -0.1, 0.6, 0.25]).unwrap(),
            T64::from_vec(&[3], vec![0.7, -0.3, 0.9]).unwrap(),
            T64::from_vec(&[3], vec![0.05, -0.15, 0.2]).unwrap(),
        ];
        check_gradients(&build, &leaves, 1e-6);
    }

    #[test]
    fn softmax_and_broadcast_gradients_match_finite_differences() {
        let build = |tape: &mut Tape<f64>, leaves: &[T64]| -> NodeId {
            let q = tape.leaf(leaves[0].clone()).unwrap();
            let k = tape.leaf(leaves[1].clone()).unwrap();
            let gamma = tape.leaf(leaves[2].clone()).unwrap();
            let kt = tape.transpose(k).unwrap();
            let scores = tape.matmul(q, kt).unwrap();
            let attn = tape.softmax_rows(scores).unwrap();
            let ctx = tape.matmul(attn, k).unwrap();
            let modulated = tape.mul(ctx, gamma).unwrap(); // row broadcast
            let s = tape.sum(modulated).unwrap();
            let sq = tape.mul(s, s).unwrap();
            tape.sum(sq).unwrap()
        };
        let leaves = vec![
            T64::from_vec(&[2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]).unwrap(),
            T64::from_vec(&[4, 3], vec![
                0.2, 0.7, -0.3, 0.5, -0.1, 0.4, -0.2, 0.3, 0.6, 0.1, -0.5, 0.2,
            ])
            .unwrap(),
            T64::from_vec(&[3], vec![1.2, 0.8, -0.5]).unwrap(),
        ];
        check_gradients(&build, &leaves, 1e-6);
    }

    #[test]
    fn concat_reshape_gradients_match_finite_differences() {
        let build = |tape: &mut Tape<f64>, leaves: &[T64]| -> NodeId {
            let a = tape.leaf(leaves[0].clone()).unwrap();
            let b = tape.leaf(leaves[1].clone()).unwrap();
            let flat_a = tape.reshape(a, &[4]).unwrap();
            let joined = tape.concat(&[flat_a, b]).unwrap();
            let sq = tape.mul(joined, joined).unwrap();
            tape.sum(sq).unwrap()
        };
        let leaves = vec![
            T64::from_vec(&[2, 2], vec![0.3, -0.2, 0.5, 0.1]).unwrap(),
            T64::from_vec(&[2], vec![0.9, -0.4]).unwrap(),
        ];
        check_gradients(&build, &leaves, 1e-6);
    }

    #[test]
    fn surrogate_backward_matches_smooth_reference_fd() {
        // Same graph twice: spike forward vs smooth fast-sigmoid forward.
        // The surrogate backward must equal the smooth network's gradient,
        // which in turn must match finite differences of the smooth forward.
        let smooth = |tape: &mut Tape<f64>, leaves: &[T64]| -> NodeId {
            let w = tape.leaf(leaves[0].clone()).unwrap();
            let x = tape.leaf(leaves[1].clone()).unwrap();
            let u = tape.matmul(w, x).unwrap();
            let s = tape.fast_sigmoid(u, 1.0, 1.0).unwrap();
            let sq = tape.mul(s, s).unwrap();
            tape.sum(sq).unwrap()
        };
        let leaves = vec![
            T64::from_vec(&[2, 2], vec![0.8, 0.3, -0.4, 1.1]).unwrap(),
            T64::from_vec(&[2], vec![0.9, 0.7]).unwrap(),
        ];
        check_gradients(&smooth, &leaves, 1e-6);

        // Spike-forward graph: backward gradient equals the smooth one with
        // the forward outputs swapped in the chain (checked structurally by
        // comparing the surrogate local term).
        let mut tape = Tape::new();
        let w = tape.leaf(leaves[0].clone()).unwrap();
        let x = tape.leaf(leaves[1].clone()).unwrap();
        let u = tape.matmul(w, x).unwrap();
        let s = tape.spike(u, 1.0, 1.0).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();

        let mut ref_tape = Tape::new();
        let wr = ref_tape.leaf(leaves[0].clone()).unwrap();
        let xr = ref_tape.leaf(leaves[1].clone()).unwrap();
        let ur = ref_tape.matmul(wr, xr).unwrap();
        let sr = ref_tape.fast_sigmoid(ur, 1.0, 1.0).unwrap();
        let loss_r = ref_tape.sum(sr).unwrap();
        ref_tape.backward(loss_r).unwrap();

        // d(sum)/du is the same local surrogate term in both graphs.
        for i in 0..2 {
            assert!((tape.grad(u).at(i) - ref_tape.grad(ur).at(i)).abs() < 1e-12);
        }
    }
}
