//! Loss, optimizer, and learning-rate schedule.
//!
//! The classifier loss is softmax cross-entropy; its gradient at the
//! logits, `(softmax - onehot) / batch`, is what gets seeded into the tape
//! and routed backward. The optimizer is SGD with classical momentum and
//! decoupled-by-kind weight decay: only weight matrices decay unless
//! explicitly told otherwise, biases and normalization scales do not.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::params::{GradMap, ParamKey, ParamStore};
use crate::{Error, Real, Result, Tensor};

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy over a batch of logits `[batch, classes]`,
/// plus its gradient at the logits.
///
/// Rows are shifted by their maximum before exponentiation, so arbitrarily
/// large logits stay finite.
pub fn softmax_xent<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let shape = logits.shape();
    if shape.len() != 2 {
        return Err(Error::invalid(
            "loss",
            format!("logits must be [batch, classes], got {:?}", shape),
        ));
    }
    let (batch, classes) = (shape[0], shape[1]);
    if batch == 0 || labels.len() != batch {
        return Err(Error::invalid(
            "loss",
            format!("{} labels for a batch of {}", labels.len(), batch),
        ));
    }
    let data = logits.data();
    let mut dlogits = vec![T::zero(); data.len()];
    let mut total = T::zero();
    let inv_b = T::one() / T::from_f64(batch as f64);
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::invalid(
                "loss",
                format!("label {} out of range for {} classes", label, classes),
            ));
        }
        let r = &data[row * classes..(row + 1) * classes];
        let mut m = r[0];
        for &v in r {
            m = m.maximum(v);
        }
        let mut denom = T::zero();
        for &v in r {
            denom += (v - m).exp();
        }
        total += denom.ln() - (r[label] - m);
        for (j, &v) in r.iter().enumerate() {
            let p = (v - m).exp() / denom;
            let indicator = if j == label { T::one() } else { T::zero() };
            dlogits[row * classes + j] = (p - indicator) * inv_b;
        }
    }
    Ok((
        total * inv_b,
        Tensor::new(shape.to_vec(), dlogits)?,
    ))
}

/// Fraction of rows whose argmax equals the label (ties break low).
pub fn accuracy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
        return Err(Error::invalid(
            "accuracy",
            format!("logits {:?} against {} labels", shape, labels.len()),
        ));
    }
    let (batch, classes) = (shape[0], shape[1]);
    let data = logits.data();
    let mut hits = 0usize;
    for (row, &label) in labels.iter().enumerate() {
        let r = &data[row * classes..(row + 1) * classes];
        let mut best = 0usize;
        for j in 1..classes {
            if r[j] > r[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch as f64)
}

// ---------------------------------------------------------------------------
// Learning-rate schedule
// ---------------------------------------------------------------------------

/// Multiply the learning rate by `factor` from `at_epoch` onward.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDrop {
    pub at_epoch: usize,
    pub factor: f64,
}

/// Piecewise-constant schedule: a base rate and cumulative drops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    #[serde(default)]
    pub drops: Vec<LrDrop>,
}

impl LrSchedule {
    pub fn constant(base: f64) -> Self {
        LrSchedule {
            base,
            drops: Vec::new(),
        }
    }

    pub fn at_epoch(&self, epoch: usize) -> f64 {
        let mut lr = self.base;
        for d in &self.drops {
            if epoch >= d.at_epoch {
                lr *= d.factor;
            }
        }
        lr
    }
}

// ---------------------------------------------------------------------------
// SGD with momentum
// ---------------------------------------------------------------------------

/// SGD with classical momentum:
///
/// ```text
/// g' = g + weight_decay * w   (only for slots that decay)
/// v  = momentum * v + g'
/// w  = w - lr * v
/// ```
pub struct Sgd<T: Real> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Extend weight decay to biases and normalization parameters.
    pub decay_bn_and_bias: bool,
    velocity: BTreeMap<ParamKey, Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            decay_bn_and_bias: false,
            velocity: BTreeMap::new(),
        }
    }

    /// Apply one update. `lr_for` supplies the effective learning rate per
    /// parameter, which is how per-module rate scaling is expressed.
    pub fn step(
        &mut self,
        store: &mut ParamStore<T>,
        grads: &GradMap<T>,
        lr_for: impl Fn(ParamKey) -> f64,
    ) -> Result<()> {
        let m = T::from_f64(self.momentum);
        for (&key, grad) in grads {
            let entry = store.get(key)?;
            if !entry.kind.trainable() {
                return Err(Error::invalid(
                    "optimizer",
                    format!("gradient supplied for non-trainable slot {}", key),
                ));
            }
            let decays = entry.kind.decays_by_default() || self.decay_bn_and_bias;
            let wd = if decays {
                T::from_f64(self.weight_decay)
            } else {
                T::zero()
            };
            let w = entry.value.clone();
            let g = grad.zip_map(&w, "weight decay", |g, w| g + wd * w)?;
            let v = match self.velocity.remove(&key) {
                Some(prev) => prev.zip_map(&g, "momentum", |v, g| m * v + g)?,
                None => g,
            };
            let lr = T::from_f64(lr_for(key));
            let new_w = w.zip_map(&v, "sgd step", |w, v| w - lr * v)?;
            store.set_value(key, new_w)?;
            self.velocity.insert(key, v);
        }
        Ok(())
    }
}
