//! Wengert-list tape: forward calls record an op and its saved values, and
//! [`Tape::backward`] replays the list in exact reverse order.

use serde::Serialize;

use super::ops::{self, Activation, BnMode, BnSaved, ConvGeometry, ProjectionMode, RunningStats};
use super::{ParamId, ParamStore, TensorR};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation census entry.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum OpKind {
    Leaf,
    Param,
    Conv2d,
    BatchNorm,
    Activation,
    Grl,
    Gap,
    Fc,
    ChannelMask,
    ChannelMix,
    Add,
    WeightedSum,
    SoftmaxXent,
    PowerProject,
    Entropy,
    /// Loss computed outside the tape with a precomputed input gradient.
    /// The rate loss enters this way and involves matrix inversions.
    External,
}

impl OpKind {
    pub fn involves_inversion(self) -> bool {
        matches!(self, OpKind::External)
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        geom: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BnSaved,
    },
    Activation {
        x: Var,
        kind: Activation,
    },
    Grl {
        x: Var,
        lambda: f64,
    },
    Gap {
        x: Var,
    },
    Fc {
        x: Var,
        w: Var,
        b: Var,
    },
    ChannelMask {
        x: Var,
        mask: TensorR,
    },
    ChannelMix {
        x: Var,
        matrix: TensorR,
    },
    Add {
        a: Var,
        b: Var,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: TensorR,
    },
    PowerProject {
        x: Var,
        mode: ProjectionMode,
        scales: Vec<f64>,
    },
    Entropy {
        x: Var,
    },
    External {
        x: Var,
        grad: TensorR,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Param(_) => OpKind::Param,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Activation { .. } => OpKind::Activation,
            Op::Grl { .. } => OpKind::Grl,
            Op::Gap { .. } => OpKind::Gap,
            Op::Fc { .. } => OpKind::Fc,
            Op::ChannelMask { .. } => OpKind::ChannelMask,
            Op::ChannelMix { .. } => OpKind::ChannelMix,
            Op::Add { .. } => OpKind::Add,
            Op::WeightedSum { .. } => OpKind::WeightedSum,
            Op::SoftmaxXent { .. } => OpKind::SoftmaxXent,
            Op::PowerProject { .. } => OpKind::PowerProject,
            Op::Entropy { .. } => OpKind::Entropy,
            Op::External { .. } => OpKind::External,
        }
    }
}

struct Node {
    value: TensorR,
    op: Op,
    requires_grad: bool,
}

/// Batch statistics observed by a train-mode batch-norm call.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub batch: usize,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of a backward pass.
pub struct Gradients {
    grads: Vec<Option<TensorR>>,
    params: Vec<(ParamId, usize)>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient w.r.t. a leaf or parameter node, if one reached it.
    pub fn wrt(&self, var: Var) -> Option<&TensorR> {
        self.grads[var.0].as_ref()
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }

    /// Adds every parameter gradient into the `grad` buffer of its trainable group.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(pid, idx) in &self.params {
            let group = store.get_mut(pid);
            if !group.trainable {
                continue;
            }
            if let Some(g) = &self.grads[idx] {
                group.grad.add_assign(g);
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &TensorR {
        &self.nodes[var.0].value
    }

    pub fn census(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    fn push(&mut self, value: TensorR, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numeric(format!("{:?} produced a non-finite value", op.kind())));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is propagated into it.
    pub fn constant(&mut self, value: TensorR) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is kept (used by gradient checks).
    pub fn input(&mut self, value: TensorR) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let g = store.get(id);
        self.push(g.values.clone(), Op::Param(id), g.trainable)
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(k), self.value(b), geom)?;
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        self.push(y, Op::Conv2d { x, k, b, geom }, rg)
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        running: &RunningStats,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let (y, saved) = ops::batchnorm(self.value(x), self.value(gamma), self.value(beta), mode, running, eps)?;
        let stats = BatchStats {
            mean: saved.batch_mean.clone(),
            var: saved.batch_var.clone(),
            batch: self.value(x).shape()[0],
        };
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let v = self.push(y, Op::BatchNorm { x, gamma, beta, saved }, rg)?;
        Ok((v, stats))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let y = ops::activation(self.value(x), kind);
        let rg = self.rg(x);
        self.push(y, Op::Activation { x, kind }, rg)
    }

    pub fn grl(&mut self, x: Var, lambda: f64) -> Result<Var> {
        let y = self.value(x).clone();
        let rg = self.rg(x);
        self.push(y, Op::Grl { x, lambda }, rg)
    }

    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let y = ops::gap(self.value(x))?;
        let rg = self.rg(x);
        self.push(y, Op::Gap { x }, rg)
    }

    pub fn fc(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::fc(self.value(x), self.value(w), self.value(b))?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(y, Op::Fc { x, w, b }, rg)
    }

    pub fn channel_mask(&mut self, x: Var, mask: TensorR) -> Result<Var> {
        let y = ops::channel_mask(self.value(x), &mask)?;
        let rg = self.rg(x);
        self.push(y, Op::ChannelMask { x, mask }, rg)
    }

    pub fn channel_mix(&mut self, x: Var, matrix: TensorR) -> Result<Var> {
        let y = ops::channel_mix(self.value(x), &matrix)?;
        let rg = self.rg(x);
        self.push(y, Op::ChannelMix { x, matrix }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(y, Op::Add { a, b }, rg)
    }

    /// `sum_k w_k * x_k` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::shape("weighted_sum takes scalar nodes"));
            }
            total += w * self.value(v).data()[0];
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(TensorR::scalar(total), Op::WeightedSum { terms: terms.to_vec() }, rg)
    }

    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::softmax_xent(self.value(logits), labels)?;
        let rg = self.rg(logits);
        self.push(
            TensorR::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        )
    }

    pub fn power_project(&mut self, x: Var, p_max: f64, mode: ProjectionMode) -> Result<Var> {
        let (y, scales) = ops::power_project(self.value(x), p_max, mode)?;
        let rg = self.rg(x);
        self.push(y, Op::PowerProject { x, mode, scales }, rg)
    }

    pub fn entropy(&mut self, x: Var) -> Result<Var> {
        let y = ops::entropy(self.value(x))?;
        let rg = self.rg(x);
        self.push(TensorR::scalar(y), Op::Entropy { x }, rg)
    }

    /// Records a scalar loss computed elsewhere, with its gradient w.r.t. `x`.
    pub fn external(&mut self, x: Var, value: f64, grad: TensorR) -> Result<Var> {
        if grad.shape() != self.value(x).shape() {
            return Err(Error::shape("external gradient shape mismatch"));
        }
        let rg = self.rg(x);
        self.push(TensorR::scalar(value), Op::External { x, grad }, rg)
    }

    /// Reverse sweep from `root` seeded with `seed` (a tensor shaped like `root`).
    pub fn backward(&self, root: Var, seed: TensorR) -> Result<Gradients> {
        if seed.shape() != self.value(root).shape() {
            return Err(Error::shape("backward seed must match root shape"));
        }
        let n = root.0 + 1;
        let mut pending: Vec<Option<TensorR>> = (0..n).map(|_| None).collect();
        let mut kept: Vec<Option<TensorR>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        let mut visited = Vec::new();
        pending[root.0] = Some(seed);

        fn acc(pending: &mut [Option<TensorR>], v: Var, g: TensorR) {
            match &mut pending[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..n).rev() {
            let node = &self.nodes[idx];
            if let Op::Param(pid) = node.op {
                params.push((pid, idx));
            }
            let Some(g) = pending[idx].take() else { continue };
            if !node.requires_grad {
                continue;
            }
            visited.push(idx);
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    kept[idx] = Some(g);
                }
                Op::Conv2d { x, k, b, geom } => {
                    let need = [self.rg(*x), self.rg(*k), self.rg(*b)];
                    let (gx, gk, gb) = ops::conv2d_backward(self.value(*x), self.value(*k), *geom, &g, need)?;
                    if let Some(gx) = gx {
                        acc(&mut pending, *x, gx);
                    }
                    if let Some(gk) = gk {
                        acc(&mut pending, *k, gk);
                    }
                    if let Some(gb) = gb {
                        acc(&mut pending, *b, gb);
                    }
                }
                Op::BatchNorm { x, gamma, beta, saved } => {
                    let affine_only = !self.rg(*x);
                    let (gx, gg, gbeta) = ops::batchnorm_backward(saved, self.value(*gamma), &g, affine_only);
                    if let Some(gx) = gx {
                        acc(&mut pending, *x, gx);
                    }
                    if self.rg(*gamma) {
                        acc(&mut pending, *gamma, gg);
                    }
                    if self.rg(*beta) {
                        acc(&mut pending, *beta, gbeta);
                    }
                }
                Op::Activation { x, kind } => {
                    let gx = ops::activation_backward(self.value(*x), &node.value, *kind, &g);
                    acc(&mut pending, *x, gx);
                }
                Op::Grl { x, lambda } => acc(&mut pending, *x, ops::grl_backward(&g, *lambda)),
                Op::Gap { x } => {
                    let gx = ops::gap_backward(self.value(*x).shape(), &g);
                    acc(&mut pending, *x, gx);
                }
                Op::Fc { x, w, b } => {
                    let (gx, gw, gb) = ops::fc_backward(self.value(*x), self.value(*w), &g);
                    if self.rg(*x) {
                        acc(&mut pending, *x, gx);
                    }
                    if self.rg(*w) {
                        acc(&mut pending, *w, gw);
                    }
                    if self.rg(*b) {
                        acc(&mut pending, *b, gb);
                    }
                }
                Op::ChannelMask { x, mask } => {
                    let gx = ops::channel_mask(&g, mask)?;
                    acc(&mut pending, *x, gx);
                }
                Op::ChannelMix { x, matrix } => {
                    let gx = ops::channel_mix_backward(self.value(*x).shape(), matrix, &g);
                    acc(&mut pending, *x, gx);
                }
                Op::Add { a, b } => {
                    if self.rg(*a) {
                        acc(&mut pending, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut pending, *b, g);
                    }
                }
                Op::WeightedSum { terms } => {
                    let up = g.data()[0];
                    for &(v, w) in terms {
                        if self.rg(v) {
                            acc(&mut pending, v, TensorR::scalar(w * up));
                        }
                    }
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let gz = ops::softmax_xent_backward(probs, labels, g.data()[0]);
                    acc(&mut pending, *logits, gz);
                }
                Op::PowerProject { x, mode, scales } => {
                    let gx = ops::power_project_backward(self.value(*x), scales, *mode, &g);
                    acc(&mut pending, *x, gx);
                }
                Op::Entropy { x } => {
                    let gx = ops::entropy_backward(self.value(*x), g.data()[0]);
                    acc(&mut pending, *x, gx);
                }
                Op::External { x, grad } => {
                    let up = g.data()[0];
                    let gx = TensorR::from_fn(grad.shape(), |i| up * grad.data()[i]);
                    acc(&mut pending, *x, gx);
                }
            }
        }
        Ok(Gradients {
            grads: kept,
            params,
            visited,
        })
    }
}
