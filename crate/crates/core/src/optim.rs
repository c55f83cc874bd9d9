//! SGD, Adagrad and Adam over dense tower tensors and lazily touched
//! embedding rows.
//!
//! Update rules are strategies behind [`UpdateRule`] and are looked up by
//! name. [`OptimState`] owns their slots: one per dense tensor, and one per
//! `(bank, field, id)` for embedding rows that have received a gradient.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EmbeddingBank, Field, MlpParams, RowGrads};
use crate::numerics::Scalar;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAGRAD_EPS: f64 = 1e-8;

/// Optimizer memory for one tensor or one embedding row.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Slot<S> {
    /// Adam first moment, Adagrad squared-gradient accumulator.
    pub first: Vec<S>,
    /// Adam second moment.
    pub second: Vec<S>,
    pub step: u64,
}

impl<S: Scalar> Slot<S> {
    fn ensure(&mut self, len: usize, moments: usize) {
        if moments >= 1 && self.first.len() != len {
            self.first = vec![S::zero(); len];
        }
        if moments >= 2 && self.second.len() != len {
            self.second = vec![S::zero(); len];
        }
    }
}

pub trait UpdateRule<S: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Number of moment vectors this rule keeps per slot.
    fn moments(&self) -> usize;

    fn update(&self, lr: S, param: &mut [S], grad: &[S], slot: &mut Slot<S>);
}

pub struct Sgd;

impl<S: Scalar> UpdateRule<S> for Sgd {
    fn name(&self) -> &'static str {
        "sgd"
    }

    fn moments(&self) -> usize {
        0
    }

    fn update(&self, lr: S, param: &mut [S], grad: &[S], slot: &mut Slot<S>) {
        slot.step += 1;
        for (p, &g) in param.iter_mut().zip(grad) {
            *p -= lr * g;
        }
    }
}

pub struct Adagrad;

impl<S: Scalar> UpdateRule<S> for Adagrad {
    fn name(&self) -> &'static str {
        "adagrad"
    }

    fn moments(&self) -> usize {
        1
    }

    fn update(&self, lr: S, param: &mut [S], grad: &[S], slot: &mut Slot<S>) {
        slot.ensure(param.len(), 1);
        slot.step += 1;
        let eps = S::from_f64(ADAGRAD_EPS);
        for ((p, &g), acc) in param.iter_mut().zip(grad).zip(slot.first.iter_mut()) {
            *acc += g * g;
            *p -= lr * g / (acc.sqrt() + eps);
        }
    }
}

pub struct Adam;

impl<S: Scalar> UpdateRule<S> for Adam {
    fn name(&self) -> &'static str {
        "adam"
    }

    fn moments(&self) -> usize {
        2
    }

    fn update(&self, lr: S, param: &mut [S], grad: &[S], slot: &mut Slot<S>) {
        slot.ensure(param.len(), 2);
        slot.step += 1;
        let (b1, b2, eps) = (
            S::from_f64(ADAM_BETA1),
            S::from_f64(ADAM_BETA2),
            S::from_f64(ADAM_EPS),
        );
        let t = i32::try_from(slot.step).unwrap_or(i32::MAX);
        let c1 = S::one() - b1.powi(t);
        let c2 = S::one() - b2.powi(t);
        for (((p, &g), m), v) in param
            .iter_mut()
            .zip(grad)
            .zip(slot.first.iter_mut())
            .zip(slot.second.iter_mut())
        {
            *m = b1 * *m + (S::one() - b1) * g;
            *v = b2 * *v + (S::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adagrad,
    Adam,
}

impl OptimizerKind {
    pub fn name(self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adagrad => "adagrad",
            OptimizerKind::Adam => "adam",
        }
    }
}

type RuleCtor<S> = fn() -> Box<dyn UpdateRule<S>>;

/// Registered update rules, in name order.
pub fn registry<S: Scalar>() -> Vec<(&'static str, RuleCtor<S>)> {
    vec![
        ("adagrad", || Box::new(Adagrad)),
        ("adam", || Box::new(Adam)),
        ("sgd", || Box::new(Sgd)),
    ]
}

pub fn rule_by_name<S: Scalar>(name: &str) -> Result<Box<dyn UpdateRule<S>>> {
    registry::<S>()
        .into_iter()
        .find(|(n, _)| *n == name)
        .map(|(_, ctor)| ctor())
        .ok_or_else(|| Error::Config(format!("unknown optimizer {name:?}")))
}

pub type RowSlots<S> = HashMap<(Field, u64), Slot<S>>;

pub struct OptimState<S: Scalar> {
    kind: OptimizerKind,
    learning_rate: f64,
    rule: Box<dyn UpdateRule<S>>,
    dense: Vec<Slot<S>>,
    sparse: BTreeMap<usize, RowSlots<S>>,
}

impl<S: Scalar> Clone for OptimState<S> {
    fn clone(&self) -> Self {
        Self {
            kind: self.kind,
            learning_rate: self.learning_rate,
            rule: rule_by_name(self.kind.name()).expect("registered"),
            dense: self.dense.clone(),
            sparse: self.sparse.clone(),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for OptimState<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OptimState")
            .field("kind", &self.kind)
            .field("learning_rate", &self.learning_rate)
            .field("dense_slots", &self.dense.len())
            .field("sparse_banks", &self.sparse.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl<S: Scalar> PartialEq for OptimState<S> {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind
            && self.learning_rate.to_bits() == other.learning_rate.to_bits()
            && self.dense == other.dense
            && self.sparse == other.sparse
    }
}

impl<S: Scalar> OptimState<S> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            rule: rule_by_name(kind.name()).expect("registered"),
            dense: Vec::new(),
            sparse: BTreeMap::new(),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn moments(&self) -> usize {
        self.rule.moments()
    }

    /// One update of every tower and attention tensor.
    pub fn step_dense(&mut self, params: &mut MlpParams<S>, grads: &MlpParams<S>) -> Result<()> {
        if params.tensor_shapes() != grads.tensor_shapes() {
            return Err(Error::shape(
                "step_dense",
                format!("{:?}", params.tensor_shapes()),
                format!("{:?}", grads.tensor_shapes()),
            ));
        }
        let lr = S::from_f64(self.learning_rate);
        let grad_tensors = grads.tensors();
        if self.dense.len() < grad_tensors.len() {
            self.dense.resize_with(grad_tensors.len(), Slot::default);
        }
        for ((p, g), slot) in params
            .tensors_mut()
            .into_iter()
            .zip(grad_tensors)
            .zip(self.dense.iter_mut())
        {
            self.rule.update(lr, p, g, slot);
        }
        Ok(())
    }

    /// Updates exactly the rows present in `grads`; every other row and slot
    /// is left untouched.
    pub fn step_sparse(&mut self, bank: &mut EmbeddingBank<S>, grads: &RowGrads<S>) -> Result<()> {
        let lr = S::from_f64(self.learning_rate);
        let slots = self.sparse.entry(bank.bank_id()).or_default();
        for ((field, id), g) in grads.iter() {
            let row = bank.row_of(field, id).ok_or(Error::Index {
                index: id as usize,
                len: bank.table(field).len(),
            })?;
            let slot = slots.entry((field, id)).or_default();
            self.rule.update(lr, bank.row_mut(field, row), g, slot);
        }
        Ok(())
    }

    /// Drops every embedding slot of `bank_id`. Dense slots are kept.
    pub fn reset_embedding_slots(&mut self, bank_id: usize) {
        self.sparse.remove(&bank_id);
    }

    pub fn reset_dense_slots(&mut self) {
        self.dense.clear();
    }

    pub fn dense_slots(&self) -> &[Slot<S>] {
        &self.dense
    }

    pub fn sparse_slots(&self) -> &BTreeMap<usize, RowSlots<S>> {
        &self.sparse
    }

    pub fn restore_slots(&mut self, dense: Vec<Slot<S>>, sparse: BTreeMap<usize, RowSlots<S>>) {
        self.dense = dense;
        self.sparse = sparse;
    }
}
