use std::collections::HashMap;

use super::network::{mlp_backward, mlp_forward};
use super::{Dense, EmbeddingBank, Field, MlpParams, ModelConfig, Pooling, StackTrace};
use crate::data::SparseSample;
use crate::error::{Error, Result};
use crate::numerics::{add_assign, axpy, dot, sigmoid, Matrix, Scalar};

/// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
pub fn loss_bce<S: Scalar>(logit: S, label: u8) -> S {
    let y = if label == 1 { S::one() } else { S::zero() };
    logit.max(S::zero()) - logit * y + (-logit.abs()).exp().ln_1p()
}

#[derive(Clone, Debug)]
pub struct AttentionTrace<S> {
    pub cand: Vec<S>,
    pub behaviors: Matrix<S>,
    pub stack: StackTrace<S>,
    pub weights: Vec<S>,
}

#[derive(Clone, Debug)]
pub enum EmbedTrace<S> {
    /// No behaviors: the pooled half is zero.
    Empty,
    Mean {
        len: usize,
    },
    Attention(AttentionTrace<S>),
}

/// Softmax-weighted sum of behavior embeddings, scored by the attention unit
/// over `[cand, beh, cand - beh, cand * beh]`. Empty input pools to zero.
pub fn attention_pool<S: Scalar>(
    cand: &[S],
    behaviors: &Matrix<S>,
    layers: &[Dense<S>],
) -> Result<(Vec<S>, Option<AttentionTrace<S>>)> {
    let width = cand.len();
    if behaviors.rows() == 0 {
        return Ok((vec![S::zero(); width], None));
    }
    if behaviors.cols() != width {
        return Err(Error::shape("attention_pool", width, behaviors.cols()));
    }
    let mut unit_in = Matrix::zeros(behaviors.rows(), 4 * width);
    for j in 0..behaviors.rows() {
        let b = behaviors.row(j);
        let row = unit_in.row_mut(j);
        for d in 0..width {
            row[d] = cand[d];
            row[width + d] = b[d];
            row[2 * width + d] = cand[d] - b[d];
            row[3 * width + d] = cand[d] * b[d];
        }
    }
    let (scores, stack) = mlp_forward(layers, unit_in)?;
    let max = scores
        .data()
        .iter()
        .copied()
        .fold(S::neg_infinity(), S::max);
    let exps: Vec<S> = scores.data().iter().map(|&s| (s - max).exp()).collect();
    let total: S = exps.iter().copied().sum();
    let weights: Vec<S> = exps.iter().map(|&e| e / total).collect();
    let mut pooled = vec![S::zero(); width];
    for (j, &w) in weights.iter().enumerate() {
        axpy(w, behaviors.row(j), &mut pooled);
    }
    Ok((
        pooled,
        Some(AttentionTrace {
            cand: cand.to_vec(),
            behaviors: behaviors.clone(),
            stack,
            weights,
        }),
    ))
}

/// Builds the tower input for one sample from `bank`; unseen IDs read their
/// initial vectors.
pub fn embed_forward<S: Scalar>(
    cfg: &ModelConfig,
    bank: &EmbeddingBank<S>,
    mlp: &MlpParams<S>,
    sample: &SparseSample,
) -> Result<(Vec<S>, EmbedTrace<S>)> {
    let d = cfg.embed_dim;
    if bank.dim() != d {
        return Err(Error::shape("embed_forward", d, bank.dim()));
    }
    let mut x = vec![S::zero(); cfg.input_dim()];
    bank.fetch(Field::User, sample.user_id, &mut x[..d]);
    bank.fetch(Field::Item, sample.item_id, &mut x[d..2 * d]);
    bank.fetch(Field::Category, sample.category_id, &mut x[2 * d..3 * d]);

    let len = sample.behavior_seq.len();
    if len == 0 {
        return Ok((x, EmbedTrace::Empty));
    }
    let mut behaviors = Matrix::zeros(len, 2 * d);
    for (j, &(item, cat)) in sample.behavior_seq.iter().enumerate() {
        let row = behaviors.row_mut(j);
        bank.fetch(Field::Item, item, &mut row[..d]);
        bank.fetch(Field::Category, cat, &mut row[d..]);
    }
    let trace = match cfg.pooling {
        Pooling::Mean => {
            let pooled = &mut x[3 * d..];
            for j in 0..len {
                add_assign(pooled, behaviors.row(j));
            }
            let n = S::from_f64(len as f64);
            for v in pooled.iter_mut() {
                *v /= n;
            }
            EmbedTrace::Mean { len }
        }
        Pooling::Attention => {
            let cand = x[d..3 * d].to_vec();
            let (pooled, trace) = attention_pool(&cand, &behaviors, &mlp.attention)?;
            x[3 * d..].copy_from_slice(&pooled);
            EmbedTrace::Attention(trace.expect("non-empty sequence"))
        }
    };
    Ok((x, trace))
}

#[derive(Clone, Debug)]
pub struct BatchForward<S> {
    pub logits: Vec<S>,
    pub embed: Vec<EmbedTrace<S>>,
    pub tower: StackTrace<S>,
}

pub fn forward_batch<S: Scalar>(
    cfg: &ModelConfig,
    mlp: &MlpParams<S>,
    bank: &EmbeddingBank<S>,
    samples: &[&SparseSample],
) -> Result<BatchForward<S>> {
    let mut x = Matrix::zeros(samples.len(), cfg.input_dim());
    let mut embed = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let (row, trace) = embed_forward(cfg, bank, mlp, s)?;
        x.row_mut(i).copy_from_slice(&row);
        embed.push(trace);
    }
    let (out, tower) = mlp_forward(&mlp.tower, x)?;
    Ok(BatchForward {
        logits: out.into_data(),
        embed,
        tower,
    })
}

/// Per-`(field, id)` embedding gradients, accumulated in first-touch order.
#[derive(Clone, Debug)]
pub struct RowGrads<S> {
    keys: Vec<(Field, u64)>,
    index: HashMap<(Field, u64), usize>,
    grads: Matrix<S>,
    zero: Vec<S>,
}

impl<S: Scalar> RowGrads<S> {
    pub fn new(dim: usize) -> Self {
        Self {
            keys: Vec::new(),
            index: HashMap::new(),
            grads: Matrix::zeros(0, dim),
            zero: vec![S::zero(); dim],
        }
    }

    pub fn add(&mut self, field: Field, id: u64, g: &[S]) {
        let slot = match self.index.get(&(field, id)) {
            Some(&s) => s,
            None => {
                let s = self.grads.push_row(&self.zero).expect("row width");
                self.keys.push((field, id));
                self.index.insert((field, id), s);
                s
            }
        };
        add_assign(self.grads.row_mut(slot), g);
    }

    pub fn get(&self, field: Field, id: u64) -> Option<&[S]> {
        self.index.get(&(field, id)).map(|&s| self.grads.row(s))
    }

    pub fn iter(&self) -> impl Iterator<Item = ((Field, u64), &[S])> + '_ {
        self.keys
            .iter()
            .enumerate()
            .map(|(s, &k)| (k, self.grads.row(s)))
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.grads.is_finite()
    }
}

/// Backpropagates `d_logits` through tower, pooling and embedding lookups.
pub fn backward_batch<S: Scalar>(
    cfg: &ModelConfig,
    mlp: &MlpParams<S>,
    fwd: &BatchForward<S>,
    samples: &[&SparseSample],
    d_logits: &[S],
) -> Result<(MlpParams<S>, RowGrads<S>)> {
    let d = cfg.embed_dim;
    let mut grads = mlp.zeros_like();
    let mut rows = RowGrads::new(d);
    let d_out = Matrix::from_vec(d_logits.len(), 1, d_logits.to_vec())?;
    let dx = mlp_backward(&mlp.tower, &fwd.tower, d_out, &mut grads.tower)?;

    for (i, s) in samples.iter().enumerate() {
        let g = dx.row(i);
        rows.add(Field::User, s.user_id, &g[..d]);
        rows.add(Field::Item, s.item_id, &g[d..2 * d]);
        rows.add(Field::Category, s.category_id, &g[2 * d..3 * d]);
        let d_pooled = &g[3 * d..];
        match &fwd.embed[i] {
            EmbedTrace::Empty => {}
            EmbedTrace::Mean { len } => {
                let n = S::from_f64(*len as f64);
                let share: Vec<S> = d_pooled.iter().map(|&v| v / n).collect();
                for &(item, cat) in &s.behavior_seq {
                    rows.add(Field::Item, item, &share[..d]);
                    rows.add(Field::Category, cat, &share[d..]);
                }
            }
            EmbedTrace::Attention(tr) => {
                attention_backward(tr, mlp, &mut grads, &mut rows, s, d_pooled, d)?;
            }
        }
    }
    Ok((grads, rows))
}

fn attention_backward<S: Scalar>(
    tr: &AttentionTrace<S>,
    mlp: &MlpParams<S>,
    grads: &mut MlpParams<S>,
    rows: &mut RowGrads<S>,
    sample: &SparseSample,
    d_pooled: &[S],
    d: usize,
) -> Result<()> {
    let width = 2 * d;
    let len = tr.weights.len();
    // Softmax Jacobian: ds_j = w_j * (dw_j - sum_k w_k dw_k).
    let d_w: Vec<S> = (0..len)
        .map(|j| dot(d_pooled, tr.behaviors.row(j)))
        .collect();
    let mean: S = tr.weights.iter().zip(&d_w).map(|(&w, &g)| w * g).sum();
    let d_scores: Vec<S> = tr
        .weights
        .iter()
        .zip(&d_w)
        .map(|(&w, &g)| w * (g - mean))
        .collect();
    let d_in = mlp_backward(
        &mlp.attention,
        &tr.stack,
        Matrix::from_vec(len, 1, d_scores)?,
        &mut grads.attention,
    )?;

    let mut d_cand = vec![S::zero(); width];
    let mut d_beh = vec![S::zero(); width];
    for (j, &(item, cat)) in sample.behavior_seq.iter().enumerate() {
        let r = d_in.row(j);
        let b = tr.behaviors.row(j);
        for k in 0..width {
            let (dc, db, ddiff, dprod) = (r[k], r[width + k], r[2 * width + k], r[3 * width + k]);
            d_cand[k] += dc + ddiff + dprod * b[k];
            d_beh[k] = tr.weights[j] * d_pooled[k] + db - ddiff + dprod * tr.cand[k];
        }
        rows.add(Field::Item, item, &d_beh[..d]);
        rows.add(Field::Category, cat, &d_beh[d..]);
    }
    rows.add(Field::Item, sample.item_id, &d_cand[..d]);
    rows.add(Field::Category, sample.category_id, &d_cand[d..]);
    Ok(())
}

/// Gradients of the mean batch BCE.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    pub mlp: MlpParams<S>,
    pub rows: RowGrads<S>,
    /// Sum of per-sample losses (the batch loss is `loss_sum / batch_len`).
    pub loss_sum: f64,
    pub batch_len: usize,
}

impl<S> Gradients<S> {
    pub fn mean_loss(&self) -> f64 {
        self.loss_sum / self.batch_len as f64
    }
}

pub fn batch_gradients<S: Scalar>(
    cfg: &ModelConfig,
    mlp: &MlpParams<S>,
    bank: &EmbeddingBank<S>,
    samples: &[&SparseSample],
) -> Result<Gradients<S>> {
    let fwd = forward_batch(cfg, mlp, bank, samples)?;
    let n = S::from_f64(samples.len() as f64);
    let mut loss_sum = 0.0;
    let mut d_logits = Vec::with_capacity(samples.len());
    for (&z, s) in fwd.logits.iter().zip(samples) {
        loss_sum += loss_bce(z, s.label).as_f64();
        let y = if s.label == 1 { S::one() } else { S::zero() };
        d_logits.push((sigmoid(z) - y) / n);
    }
    if !loss_sum.is_finite() {
        return Err(Error::Numeric("non-finite loss".into()));
    }
    let (mlp_grads, rows) = backward_batch(cfg, mlp, &fwd, samples, &d_logits)?;
    if !mlp_grads.is_finite() || !rows.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(Gradients {
        mlp: mlp_grads,
        rows,
        loss_sum,
        batch_len: samples.len(),
    })
}

/// Mean BCE of the batch, accumulated in the scalar type.
pub fn batch_loss<S: Scalar>(
    cfg: &ModelConfig,
    mlp: &MlpParams<S>,
    bank: &EmbeddingBank<S>,
    samples: &[&SparseSample],
) -> Result<S> {
    let fwd = forward_batch(cfg, mlp, bank, samples)?;
    let total: S = fwd
        .logits
        .iter()
        .zip(samples)
        .map(|(&z, s)| loss_bce(z, s.label))
        .sum();
    Ok(total / S::from_f64(samples.len() as f64))
}

pub fn predict_logits<S: Scalar>(
    cfg: &ModelConfig,
    mlp: &MlpParams<S>,
    bank: &EmbeddingBank<S>,
    samples: &[SparseSample],
    chunk: usize,
) -> Result<Vec<S>> {
    let mut out = Vec::with_capacity(samples.len());
    for part in samples.chunks(chunk.max(1)) {
        let refs: Vec<&SparseSample> = part.iter().collect();
        out.extend(forward_batch(cfg, mlp, bank, &refs)?.logits);
    }
    Ok(out)
}
