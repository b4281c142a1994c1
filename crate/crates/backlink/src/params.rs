//! Parameter storage.
//!
//! Every parameter and persistent buffer is addressed by a stable
//! [`ParamKey`]: which unit or classifier owns it, plus a slot index inside
//! that owner. Keys order deterministically, so gradient maps and optimizer
//! state iterate in a reproducible order.

use std::collections::BTreeMap;

use crate::{Error, Real, Result, Tensor};

/// Who owns a parameter: a backbone basic unit (by global unit index) or a
/// module's auxiliary classifier (by module index).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Owner {
    Unit(usize),
    Classifier(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub owner: Owner,
    pub slot: usize,
}

impl ParamKey {
    pub fn unit(unit: usize, slot: usize) -> Self {
        ParamKey {
            owner: Owner::Unit(unit),
            slot,
        }
    }

    pub fn classifier(module: usize, slot: usize) -> Self {
        ParamKey {
            owner: Owner::Classifier(module),
            slot,
        }
    }
}

impl std::fmt::Display for ParamKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.owner {
            Owner::Unit(u) => write!(f, "unit{}.{}", u, self.slot),
            Owner::Classifier(m) => write!(f, "cls{}.{}", m, self.slot),
        }
    }
}

/// Role of a tensor in its layer. Trainable kinds receive gradients;
/// running statistics are plain buffers maintained by the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    BnGamma,
    BnBeta,
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    /// Whether weight decay applies by default (biases and batch-norm
    /// affine parameters are skipped unless explicitly opted in).
    pub fn decays_by_default(self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone)]
pub struct ParamEntry<T> {
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Deterministically ordered map of all parameters and buffers of a
/// network plus its auxiliary classifiers.
#[derive(Clone, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<ParamKey, ParamEntry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: ParamKey, kind: ParamKind, value: Tensor<T>) {
        self.entries.insert(key, ParamEntry { kind, value });
    }

    pub fn get(&self, key: ParamKey) -> Result<&ParamEntry<T>> {
        self.entries
            .get(&key)
            .ok_or_else(|| Error::invalid("param store", format!("missing parameter {}", key)))
    }

    pub fn value(&self, key: ParamKey) -> Result<&Tensor<T>> {
        Ok(&self.get(key)?.value)
    }

    pub fn set_value(&mut self, key: ParamKey, value: Tensor<T>) -> Result<()> {
        let entry = self
            .entries
            .get_mut(&key)
            .ok_or_else(|| Error::invalid("param store", format!("missing parameter {}", key)))?;
        if entry.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                lhs: entry.value.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        entry.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamKey, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> + '_ {
        self.entries.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keys owned by the given unit range or classifier, in order.
    pub fn keys_for_owner(&self, pred: impl Fn(Owner) -> bool + Copy) -> Vec<ParamKey> {
        self.entries
            .keys()
            .copied()
            .filter(|k| pred(k.owner))
            .collect()
    }

    /// Cast the whole store into another precision.
    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        *k,
                        ParamEntry {
                            kind: e.kind,
                            value: e.value.cast::<U>(),
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Gradient map produced by a backward pass, keyed like the store.
pub type GradMap<T> = BTreeMap<ParamKey, Tensor<T>>;

/// `out += scale * grads` merged into an accumulator map.
pub fn accumulate_scaled<T: Real>(out: &mut GradMap<T>, grads: &GradMap<T>, scale: T) -> Result<()> {
    for (k, g) in grads {
        match out.get_mut(k) {
            Some(acc) => *acc = acc.add(&g.scale(scale))?,
            None => {
                out.insert(*k, g.scale(scale));
            }
        }
    }
    Ok(())
}
