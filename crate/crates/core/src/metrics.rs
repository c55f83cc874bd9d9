//! Evaluation scores and parameter-similarity diagnostics.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{EmbeddingBank, Field, MlpParams};
use crate::numerics::Scalar;

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRecord {
    pub run_id: String,
    pub variant: String,
    pub dataset_index: usize,
    pub epoch: usize,
    pub bank_id: usize,
    pub train_mean_loss: f64,
    /// NaN when the test labels are single-class.
    pub test_auc: f64,
    pub test_logloss: f64,
    pub wall_ms: f64,
}

/// Rank statistic behind [`auc`] as exact integers `(2U, 2PN)`, where `U` is
/// the Mann-Whitney count of positive-over-negative pairs with ties worth one
/// half. Equivalent to the midrank formula
/// `(sum of positive ranks - P(P+1)/2) / (P*N)`.
pub fn auc_statistic(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape("auc", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Metric("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes (positives {pos}, negatives {neg})"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));

    let mut twice_u = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        let group_neg = (j - i + 1) as u64 - group_pos;
        twice_u += group_pos * (2 * neg_below + group_neg);
        neg_below += group_neg;
        i = j + 1;
    }
    Ok((twice_u, 2 * pos * neg))
}

/// Rank-based ROC AUC; tied scores count one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (num, den) = auc_statistic(scores, labels)?;
    Ok(num as f64 / den as f64)
}

pub const LOGLOSS_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn logloss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(Error::shape("logloss", probs.len(), labels.len()));
    }
    if probs.is_empty() {
        return Err(Error::Metric("logloss of empty set".into()));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub enum SnapshotSource {
    Mlp,
    Bank(usize),
}

/// A flattened parameter group. MLP snapshots follow tensor order (tower
/// then attention, weight row-major then bias); embedding snapshots are
/// keyed by `(field, id)` in sorted order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSnapshot {
    pub source: SnapshotSource,
    pub keys: Vec<(Field, u64)>,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl ParamSnapshot {
    pub fn from_mlp<S: Scalar>(mlp: &MlpParams<S>) -> Self {
        Self {
            source: SnapshotSource::Mlp,
            keys: Vec::new(),
            dim: 1,
            values: mlp.flatten().into_iter().map(Scalar::as_f64).collect(),
        }
    }

    pub fn from_bank<S: Scalar>(bank: &EmbeddingBank<S>) -> Self {
        let entries = bank.sorted_entries();
        Self {
            source: SnapshotSource::Bank(bank.bank_id()),
            keys: entries.iter().map(|(k, _)| *k).collect(),
            dim: bank.dim(),
            values: entries
                .iter()
                .flat_map(|(_, v)| v.iter().map(|x| x.as_f64()))
                .collect(),
        }
    }

    /// Restricts both snapshots to their common layout.
    fn aligned(a: &Self, b: &Self) -> Result<(Vec<f64>, Vec<f64>)> {
        match (&a.source, &b.source) {
            (SnapshotSource::Mlp, SnapshotSource::Mlp) => {
                if a.values.len() != b.values.len() {
                    return Err(Error::shape(
                        "param snapshot",
                        a.values.len(),
                        b.values.len(),
                    ));
                }
                Ok((a.values.clone(), b.values.clone()))
            }
            (SnapshotSource::Bank(_), SnapshotSource::Bank(_)) => {
                if a.dim != b.dim {
                    return Err(Error::shape("param snapshot", a.dim, b.dim));
                }
                let d = a.dim;
                let (mut i, mut j) = (0, 0);
                let (mut va, mut vb) = (Vec::new(), Vec::new());
                while i < a.keys.len() && j < b.keys.len() {
                    match a.keys[i].cmp(&b.keys[j]) {
                        Ordering::Less => i += 1,
                        Ordering::Greater => j += 1,
                        Ordering::Equal => {
                            va.extend_from_slice(&a.values[i * d..(i + 1) * d]);
                            vb.extend_from_slice(&b.values[j * d..(j + 1) * d]);
                            i += 1;
                            j += 1;
                        }
                    }
                }
                if va.is_empty() {
                    return Err(Error::Metric("snapshots share no embedding keys".into()));
                }
                Ok((va, vb))
            }
            _ => Err(Error::Metric(
                "cannot compare MLP and embedding snapshots".into(),
            )),
        }
    }
}

pub fn param_cosine(a: &ParamSnapshot, b: &ParamSnapshot) -> Result<f64> {
    let (x, y) = ParamSnapshot::aligned(a, b)?;
    let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Metric("zero-norm parameter vector".into()));
    }
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

pub fn param_l2(a: &ParamSnapshot, b: &ParamSnapshot) -> Result<f64> {
    let (x, y) = ParamSnapshot::aligned(a, b)?;
    Ok(x.iter()
        .zip(&y)
        .map(|(p, q)| (p - q) * (p - q))
        .sum::<f64>()
        .sqrt())
}
