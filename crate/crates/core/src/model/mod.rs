//! Embedding + MLP click-through-rate model.
//!
//! Three scalar categorical fields (user, item, category) and one behavior
//! sequence of `(item, category)` pairs. Behavior entries share the item and
//! category tables with the candidate. The tower input is
//! `[user, item, category, pooled_item, pooled_category]`.

mod batch;
mod embedding;
mod network;

pub use batch::{
    attention_pool, backward_batch, batch_gradients, batch_loss, embed_forward, forward_batch,
    loss_bce, predict_logits, AttentionTrace, BatchForward, EmbedTrace, Gradients, RowGrads,
};
pub use embedding::{init_embedding_row, EmbeddingBank, FieldTable};
pub use network::{mlp_backward, mlp_forward, Dense, MlpParams, StackTrace};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    User,
    Item,
    Category,
}

impl Field {
    pub const ALL: [Field; 3] = [Field::User, Field::Item, Field::Category];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::User => "user",
            Field::Item => "item",
            Field::Category => "category",
        }
    }

    pub fn parse(s: &str) -> Option<Field> {
        Field::ALL.into_iter().find(|f| f.name() == s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// Bound `sqrt(6 / (fan_in + fan_out))` with both fans equal to the embedding width.
    GlorotUniform,
    /// Uniform on `[-range, range]`.
    Uniform(f64),
}

impl InitKind {
    pub fn bound(self, dim: usize) -> f64 {
        match self {
            InitKind::GlorotUniform => (6.0 / (2 * dim) as f64).sqrt(),
            InitKind::Uniform(r) => r,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    Attention,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    pub attention_hidden: Vec<usize>,
    pub pooling: Pooling,
    pub embed_init: InitKind,
    pub loss: LossKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 16,
            hidden: vec![64, 32],
            attention_hidden: vec![32],
            pooling: Pooling::Mean,
            embed_init: InitKind::GlorotUniform,
            loss: LossKind::Bce,
        }
    }
}

impl ModelConfig {
    /// Three scalar fields plus the pooled item and category halves.
    pub fn input_dim(&self) -> usize {
        5 * self.embed_dim
    }

    /// Attention unit input: `[cand, beh, cand - beh, cand * beh]`.
    pub fn attention_input_dim(&self) -> usize {
        4 * 2 * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 1 {
            return Err(Error::Config("model.embed_dim must be >= 1".into()));
        }
        if self
            .hidden
            .iter()
            .chain(&self.attention_hidden)
            .any(|&h| h < 1)
        {
            return Err(Error::Config("model hidden widths must be >= 1".into()));
        }
        if let InitKind::Uniform(r) = self.embed_init {
            if !(r > 0.0 && r.is_finite()) {
                return Err(Error::Config(
                    "model.embed_init uniform range must be > 0".into(),
                ));
            }
        }
        Ok(())
    }
}
