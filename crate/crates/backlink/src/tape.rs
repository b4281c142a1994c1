//! Reverse-mode tape.
//!
//! A forward pass appends nodes to a [`Tape`]; each node owns its output
//! value plus whatever context its backward rule needs (argmax indices,
//! dropout masks, batch statistics). Backward walks the nodes in reverse,
//! accumulating adjoints per value id, and returns gradients for parameter
//! leaves plus adjoints at any requested values.
//!
//! Every node carries a gradient scale factor in `[0, 1]` and a barrier
//! flag. The scale multiplies the adjoint before it flows to the node's
//! inputs; the barrier drops it entirely. Both leave forward values
//! untouched. Tapes are per-pass: built, consumed by `backward`, dropped.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::conv::{
    avgpool_global, avgpool_global_backward, conv2d_backward, conv2d_im2col, maxpool2x2,
    maxpool2x2_backward,
};
use crate::linalg::{add_bias_rows, matmul, matmul_nt, matmul_tn, sum_rows};
use crate::norm::{
    bn_backward, bn_eval_backward, bn_eval_forward_saved, bn_train_forward, BnBatchStats, BnSaved,
};
use crate::params::{GradMap, ParamKey};
use crate::{Error, Real, Result, Tensor};

pub type ValueId = usize;

enum Op<T> {
    Leaf,
    Param { key: ParamKey },
    MatMul { a: ValueId, b: ValueId },
    AddBias { x: ValueId, b: ValueId },
    Conv2d {
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        pad: usize,
    },
    Relu { x: ValueId },
    Add { a: ValueId, b: ValueId },
    BatchNorm {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        saved: BnSaved<T>,
    },
    BatchNormEval {
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        saved: BnSaved<T>,
    },
    MaxPool2x2 { x: ValueId, argmax: Vec<usize> },
    AvgPoolGlobal { x: ValueId },
    Reshape { x: ValueId },
    Dropout { x: ValueId, mask: Tensor<T> },
    Identity { x: ValueId },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    grad_scale: f64,
    barrier: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: ValueId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> ValueId {
        debug_assert!(value.all_finite(), "non-finite value produced by an op");
        self.nodes.push(Node {
            op,
            value,
            grad_scale: 1.0,
            barrier: false,
        });
        self.nodes.len() - 1
    }

    fn check(&self, id: ValueId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(Error::invalid("tape", format!("unknown value id {}", id)));
        }
        Ok(())
    }

    // ---- forward builders --------------------------------------------------

    /// Constant input leaf.
    /// Smallest magnitude flowing into any rectifier on this tape, or
    /// `None` when no rectifier was recorded. Finite-difference checks use
    /// this to reject forward passes evaluated too close to a kink.
    pub fn min_abs_relu_input(&self) -> Option<T> {
        let mut min: Option<T> = None;
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for &v in self.nodes[x].value.data() {
                    let a = v.abs();
                    min = Some(match min {
                        Some(m) if m <= a => m,
                        _ => a,
                    });
                }
            }
        }
        min
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> ValueId {
        self.push(Op::Leaf, value)
    }

    /// Parameter leaf; its adjoint is reported under `key`.
    pub fn param(&mut self, key: ParamKey, value: Tensor<T>) -> ValueId {
        self.push(Op::Param { key }, value)
    }

    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        let value = matmul(&self.nodes[a].value, &self.nodes[b].value)?;
        Ok(self.push(Op::MatMul { a, b }, value))
    }

    pub fn add_bias(&mut self, x: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(x)?;
        self.check(b)?;
        let value = add_bias_rows(&self.nodes[x].value, &self.nodes[b].value)?;
        Ok(self.push(Op::AddBias { x, b }, value))
    }

    pub fn conv2d(
        &mut self,
        x: ValueId,
        w: ValueId,
        bias: Option<ValueId>,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId> {
        self.check(x)?;
        self.check(w)?;
        if let Some(b) = bias {
            self.check(b)?;
        }
        let value = conv2d_im2col(
            &self.nodes[x].value,
            &self.nodes[w].value,
            bias.map(|b| &self.nodes[b].value),
            stride,
            pad,
        )?;
        Ok(self.push(
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            },
            value,
        ))
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let value = self.nodes[x].value.map(|v| v.maximum(T::zero()));
        Ok(self.push(Op::Relu { x }, value))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.check(a)?;
        self.check(b)?;
        let value = self.nodes[a].value.add(&self.nodes[b].value)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    /// Training-mode batch norm; returns the output id and the biased batch
    /// statistics so the caller can maintain running buffers.
    pub fn batch_norm(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<(ValueId, BnBatchStats<T>)> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (value, saved, stats) = bn_train_forward(
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            eps,
        )?;
        let id = self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            },
            value,
        );
        Ok((id, stats))
    }

    /// Inference-mode batch norm, normalizing with the supplied running
    /// buffers instead of batch statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        eps: f64,
    ) -> Result<ValueId> {
        self.check(x)?;
        self.check(gamma)?;
        self.check(beta)?;
        let (value, saved) = bn_eval_forward_saved(
            &self.nodes[x].value,
            &self.nodes[gamma].value,
            &self.nodes[beta].value,
            running_mean,
            running_var,
            eps,
        )?;
        Ok(self.push(
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                saved,
            },
            value,
        ))
    }

    pub fn maxpool2x2(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let (value, argmax) = maxpool2x2(&self.nodes[x].value)?;
        Ok(self.push(Op::MaxPool2x2 { x, argmax }, value))
    }

    pub fn avgpool_global(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let value = avgpool_global(&self.nodes[x].value)?;
        Ok(self.push(Op::AvgPoolGlobal { x }, value))
    }

    /// Reshape to `[batch, rest]`.
    pub fn flatten(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let s = self.nodes[x].value.shape();
        if s.is_empty() {
            return Err(Error::invalid("flatten", "scalar input"));
        }
        let batch = s[0];
        let rest: usize = s[1..].iter().product();
        let value = self.nodes[x].value.reshaped(vec![batch, rest])?;
        Ok(self.push(Op::Reshape { x }, value))
    }

    /// Inverted dropout with keep probability `1 - p`; the mask already
    /// carries the `1/(1-p)` scaling and is saved for backward.
    pub fn dropout(&mut self, x: ValueId, p: f64, rng: &mut ChaCha8Rng) -> Result<ValueId> {
        self.check(x)?;
        if !(0.0..1.0).contains(&p) {
            return Err(Error::invalid(
                "dropout",
                format!("rate must be in [0, 1), got {}", p),
            ));
        }
        let keep = 1.0 - p;
        let inv = T::from_f64(1.0 / keep);
        let mask = Tensor::from_fn(self.nodes[x].value.shape().to_vec(), |_| {
            if rng.gen::<f64>() < keep {
                inv
            } else {
                T::zero()
            }
        });
        let value = self.nodes[x].value.zip_map(&mask, "dropout", |a, m| a * m)?;
        Ok(self.push(Op::Dropout { x, mask }, value))
    }

    /// Identity in the forward direction; multiplies the backward adjoint
    /// by `scale`, which must lie in `[0, 1]`.
    pub fn scale_grad(&mut self, x: ValueId, scale: f64) -> Result<ValueId> {
        self.check(x)?;
        if !(0.0..=1.0).contains(&scale) {
            return Err(Error::invalid(
                "scale_grad",
                format!("scale must be in [0, 1], got {}", scale),
            ));
        }
        let value = self.nodes[x].value.clone();
        let id = self.push(Op::Identity { x }, value);
        self.nodes[id].grad_scale = scale;
        Ok(id)
    }

    /// Identity in the forward direction; stops the backward adjoint.
    pub fn stop_grad(&mut self, x: ValueId) -> Result<ValueId> {
        self.check(x)?;
        let value = self.nodes[x].value.clone();
        let id = self.push(Op::Identity { x }, value);
        self.nodes[id].barrier = true;
        Ok(id)
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse sweep from the given seeds.
    ///
    /// `opts.stop_at` treats the listed values as leaves: their adjoints are
    /// still accumulated (and reportable through `want_errors`) but nothing
    /// propagates through their producing ops. Parameter gradients for the
    /// same key accumulate by addition.
    pub fn backward(
        &self,
        seeds: &[(ValueId, Tensor<T>)],
        opts: &BackwardOptions,
    ) -> Result<BackwardResult<T>> {
        let mut adjoint: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, seed) in seeds {
            self.check(*id)?;
            if seed.shape() != self.nodes[*id].value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "backward seed",
                    lhs: self.nodes[*id].value.shape().to_vec(),
                    rhs: seed.shape().to_vec(),
                });
            }
            add_adjoint(&mut adjoint, *id, seed.clone())?;
        }

        let mut result = BackwardResult {
            param_grads: GradMap::new(),
            errors: BTreeMap::new(),
        };

        for i in (0..self.nodes.len()).rev() {
            let Some(adj) = adjoint[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if opts.want_errors.contains(&i) {
                result.errors.insert(i, adj.clone());
            }
            if let Op::Param { key } = &node.op {
                match result.param_grads.get_mut(key) {
                    Some(acc) => *acc = acc.add(&adj)?,
                    None => {
                        result.param_grads.insert(*key, adj.clone());
                    }
                }
            }
            if node.barrier || opts.stop_at.contains(&i) {
                continue;
            }
            let adj = if node.grad_scale != 1.0 {
                adj.scale(T::from_f64(node.grad_scale))
            } else {
                adj
            };
            self.distribute(i, &adj, &mut adjoint)?;
        }

        // Requested errors with no incoming path report as zeros.
        for id in &opts.want_errors {
            self.check(*id)?;
            result
                .errors
                .entry(*id)
                .or_insert_with(|| Tensor::zeros(self.nodes[*id].value.shape().to_vec()));
        }
        Ok(result)
    }

    fn distribute(
        &self,
        i: ValueId,
        adj: &Tensor<T>,
        adjoint: &mut Vec<Option<Tensor<T>>>,
    ) -> Result<()> {
        match &self.nodes[i].op {
            Op::Leaf | Op::Param { .. } => {}
            Op::MatMul { a, b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                add_adjoint(adjoint, *a, matmul_nt(adj, bv)?)?;
                add_adjoint(adjoint, *b, matmul_tn(av, adj)?)?;
            }
            Op::AddBias { x, b } => {
                add_adjoint(adjoint, *x, adj.clone())?;
                add_adjoint(adjoint, *b, sum_rows(adj)?)?;
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                pad,
            } => {
                let (dx, dw, db) = conv2d_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    adj,
                    *stride,
                    *pad,
                )?;
                add_adjoint(adjoint, *x, dx)?;
                add_adjoint(adjoint, *w, dw)?;
                if let Some(b) = bias {
                    add_adjoint(adjoint, *b, db)?;
                }
            }
            Op::Relu { x } => {
                let masked = self.nodes[*x]
                    .value
                    .zip_map(adj, "relu backward", |xv, d| {
                        if xv > T::zero() {
                            d
                        } else {
                            T::zero()
                        }
                    })?;
                add_adjoint(adjoint, *x, masked)?;
            }
            Op::Add { a, b } => {
                add_adjoint(adjoint, *a, adj.clone())?;
                add_adjoint(adjoint, *b, adj.clone())?;
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dgamma, dbeta) = bn_backward(saved, &self.nodes[*gamma].value, adj)?;
                add_adjoint(adjoint, *x, dx)?;
                add_adjoint(adjoint, *gamma, dgamma)?;
                add_adjoint(adjoint, *beta, dbeta)?;
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                saved,
            } => {
                let (dx, dgamma, dbeta) = bn_eval_backward(saved, &self.nodes[*gamma].value, adj)?;
                add_adjoint(adjoint, *x, dx)?;
                add_adjoint(adjoint, *gamma, dgamma)?;
                add_adjoint(adjoint, *beta, dbeta)?;
            }
            Op::MaxPool2x2 { x, argmax } => {
                let dx = maxpool2x2_backward(self.nodes[*x].value.shape(), argmax, adj);
                add_adjoint(adjoint, *x, dx)?;
            }
            Op::AvgPoolGlobal { x } => {
                let dx = avgpool_global_backward(self.nodes[*x].value.shape(), adj);
                add_adjoint(adjoint, *x, dx)?;
            }
            Op::Reshape { x } => {
                let dx = adj.reshaped(self.nodes[*x].value.shape().to_vec())?;
                add_adjoint(adjoint, *x, dx)?;
            }
            Op::Dropout { x, mask } => {
                let dx = adj.zip_map(mask, "dropout backward", |d, m| d * m)?;
                add_adjoint(adjoint, *x, dx)?;
            }
            Op::Identity { x } => {
                add_adjoint(adjoint, *x, adj.clone())?;
            }
        }
        Ok(())
    }
}

fn add_adjoint<T: Real>(
    adjoint: &mut Vec<Option<Tensor<T>>>,
    id: ValueId,
    delta: Tensor<T>,
) -> Result<()> {
    match &mut adjoint[id] {
        Some(acc) => *acc = acc.add(&delta)?,
        slot @ None => *slot = Some(delta),
    }
    Ok(())
}

#[derive(Default, Clone)]
pub struct BackwardOptions {
    pub stop_at: BTreeSet<ValueId>,
    pub want_errors: BTreeSet<ValueId>,
}

impl BackwardOptions {
    pub fn wanting(ids: impl IntoIterator<Item = ValueId>) -> Self {
        BackwardOptions {
            stop_at: BTreeSet::new(),
            want_errors: ids.into_iter().collect(),
        }
    }

    pub fn stop(mut self, ids: impl IntoIterator<Item = ValueId>) -> Self {
        self.stop_at.extend(ids);
        self
    }
}

pub struct BackwardResult<T> {
    pub param_grads: GradMap<T>,
    pub errors: BTreeMap<ValueId, Tensor<T>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn seed_at<T: Real>(tape: &Tape<T>, id: ValueId, v: T) -> Vec<(ValueId, Tensor<T>)> {
        vec![(id, Tensor::filled(tape.value(id).shape().to_vec(), v))]
    }

    #[test]
    fn linear_layer_gradients_match_hand_result() {
        // y = x * W with x=[3], W=[[2]]: dW = 3, dx = 2.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![3.0f64]).unwrap());
        let w = tape.param(ParamKey::unit(0, 0), Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let out = tape
            .backward(&seed_at(&tape, y, 1.0), &BackwardOptions::wanting([x]))
            .unwrap();
        assert_eq!(out.param_grads[&ParamKey::unit(0, 0)].data(), &[3.0]);
        assert_eq!(out.errors[&x].data(), &[2.0]);
    }

    #[test]
    fn relu_kills_gradient_at_negative_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![-1.0f64]).unwrap());
        let y = tape.relu(x).unwrap();
        let out = tape
            .backward(&seed_at(&tape, y, 5.0), &BackwardOptions::wanting([x]))
            .unwrap();
        assert_eq!(out.errors[&x].data(), &[0.0]);
    }

    #[test]
    fn rectifier_input_scan_finds_the_smallest_magnitude() {
        let mut tape = Tape::<f64>::new();
        assert!(tape.min_abs_relu_input().is_none());
        let x = tape.leaf(Tensor::vector(vec![-0.5, 0.02]));
        let y = tape.relu(x).unwrap();
        let _ = tape.relu(y).unwrap(); // second rectifier sees [0, 0.02]
        assert_eq!(tape.min_abs_relu_input(), Some(0.0));
    }

    #[test]
    fn barrier_blocks_upstream_but_downstream_params_learn() {
        // x -> W1 -> stop -> W2 -> y: W2 gets a gradient, W1 does not.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![1.0f64]).unwrap());
        let w1 = tape.param(ParamKey::unit(0, 0), Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let h = tape.matmul(x, w1).unwrap();
        let stopped = tape.stop_grad(h).unwrap();
        let w2 = tape.param(ParamKey::unit(1, 0), Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let y = tape.matmul(stopped, w2).unwrap();
        let out = tape
            .backward(&seed_at(&tape, y, 1.0), &BackwardOptions::default())
            .unwrap();
        assert!(out.param_grads.contains_key(&ParamKey::unit(1, 0)));
        assert!(!out.param_grads.contains_key(&ParamKey::unit(0, 0)));
    }

    #[test]
    fn scale_grad_scales_only_the_backward_pass() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![7.0f64, -3.0]).unwrap());
        let s = tape.scale_grad(x, 0.5).unwrap();
        assert_eq!(tape.value(s).data(), tape.value(x).data());
        let seed = Tensor::new(vec![1, 2], vec![0.4, -0.2]).unwrap();
        let out = tape
            .backward(&[(s, seed)], &BackwardOptions::wanting([x]))
            .unwrap();
        assert_eq!(out.errors[&x].data(), &[0.2, -0.1]);
    }

    #[test]
    fn scale_one_is_identity_and_scale_zero_is_a_barrier() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![1.0f64, 2.0]).unwrap());
        let s1 = tape.scale_grad(x, 1.0).unwrap();
        let s0 = tape.scale_grad(x, 0.0).unwrap();
        let seed = Tensor::new(vec![1, 2], vec![0.3, 0.9]).unwrap();
        let out1 = tape
            .backward(&[(s1, seed.clone())], &BackwardOptions::wanting([x]))
            .unwrap();
        assert_eq!(out1.errors[&x].data(), seed.data());
        let out0 = tape
            .backward(&[(s0, seed)], &BackwardOptions::wanting([x]))
            .unwrap();
        assert_eq!(out0.errors[&x].data(), &[0.0, 0.0]);
    }

    #[test]
    fn scale_outside_unit_interval_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::zeros(vec![1]));
        assert!(tape.scale_grad(x, 1.5).is_err());
        assert!(tape.scale_grad(x, -0.1).is_err());
    }

    #[test]
    fn stop_composed_with_scale_still_stops() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![4.0f64]).unwrap());
        let s = tape.scale_grad(x, 0.5).unwrap();
        let st = tape.stop_grad(s).unwrap();
        assert_eq!(tape.value(st).data(), &[4.0]);
        let out = tape
            .backward(&seed_at(&tape, st, 1.0), &BackwardOptions::wanting([x]))
            .unwrap();
        assert_eq!(out.errors[&x].data(), &[0.0]);
    }

    #[test]
    fn seed_accumulation_is_order_insensitive() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(vec![2, 2], |i| 0.3 * i as f64 + 0.1));
        let w = tape.param(
            ParamKey::unit(0, 0),
            Tensor::from_fn(vec![2, 2], |i| 0.7 - 0.2 * i as f64),
        );
        let y = tape.matmul(x, w).unwrap();
        let r = tape.relu(y).unwrap();
        let seeds: Vec<(ValueId, Tensor<f64>)> = vec![
            (r, Tensor::filled(vec![2, 2], 0.2)),
            (y, Tensor::filled(vec![2, 2], 0.811)),
            (r, Tensor::filled(vec![2, 2], 1.13)),
        ];
        let mut rev = seeds.clone();
        rev.reverse();
        let a = tape.backward(&seeds, &BackwardOptions::default()).unwrap();
        let b = tape.backward(&rev, &BackwardOptions::default()).unwrap();
        let ga = &a.param_grads[&ParamKey::unit(0, 0)];
        let gb = &b.param_grads[&ParamKey::unit(0, 0)];
        assert!(crate::tensor::max_abs_diff(ga, gb) <= 1e-10);
    }

    #[test]
    fn backward_is_linear_in_the_seed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_fn(vec![3, 3], |i| ((i * 7 % 5) as f64) - 2.0));
        let w = tape.param(
            ParamKey::unit(0, 0),
            Tensor::from_fn(vec![3, 3], |i| 0.1 * i as f64 - 0.4),
        );
        let y = tape.matmul(x, w).unwrap();
        let s1 = Tensor::from_fn(vec![3, 3], |i| (i as f64).cos());
        let s2 = Tensor::from_fn(vec![3, 3], |i| (i as f64 * 1.3).sin());
        let combined = s1.scale(2.0).add(&s2.scale(-0.5)).unwrap();
        let g1 = tape
            .backward(&[(y, s1)], &BackwardOptions::default())
            .unwrap()
            .param_grads;
        let g2 = tape
            .backward(&[(y, s2)], &BackwardOptions::default())
            .unwrap()
            .param_grads;
        let gc = tape
            .backward(&[(y, combined)], &BackwardOptions::default())
            .unwrap()
            .param_grads;
        let key = ParamKey::unit(0, 0);
        let lin = g1[&key].scale(2.0).add(&g2[&key].scale(-0.5)).unwrap();
        assert!(crate::tensor::max_abs_diff(&gc[&key], &lin) <= 1e-10);
    }

    #[test]
    fn stop_set_reports_adjoint_without_propagating() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 1], vec![2.0f64]).unwrap());
        let w1 = tape.param(ParamKey::unit(0, 0), Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let h = tape.matmul(x, w1).unwrap();
        let w2 = tape.param(ParamKey::unit(1, 0), Tensor::new(vec![1, 1], vec![5.0]).unwrap());
        let y = tape.matmul(h, w2).unwrap();
        let opts = BackwardOptions::wanting([h]).stop([h]);
        let out = tape.backward(&seed_at(&tape, y, 1.0), &opts).unwrap();
        // dL/dh = w2 = 5; nothing reaches w1.
        assert_eq!(out.errors[&h].data(), &[5.0]);
        assert!(out.param_grads.contains_key(&ParamKey::unit(1, 0)));
        assert!(!out.param_grads.contains_key(&ParamKey::unit(0, 0)));
    }

    #[test]
    fn dropout_mask_is_reused_in_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::filled(vec![4, 8], 1.0f64));
        let d = tape.dropout(x, 0.5, &mut rng).unwrap();
        let kept: Vec<bool> = tape.value(d).data().iter().map(|&v| v != 0.0).collect();
        assert!(kept.iter().any(|&k| k) && kept.iter().any(|&k| !k));
        let out = tape
            .backward(
                &seed_at(&tape, d, 1.0),
                &BackwardOptions::wanting([x]),
            )
            .unwrap();
        for (g, k) in out.errors[&x].data().iter().zip(kept) {
            if k {
                assert_eq!(*g, 2.0);
            } else {
                assert_eq!(*g, 0.0);
            }
        }
        assert!(tape.dropout(x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn seed_shape_mismatch_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::<f64>::zeros(vec![2, 2]));
        let bad = Tensor::zeros(vec![3]);
        assert!(tape.backward(&[(x, bad)], &BackwardOptions::default()).is_err());
    }
}
