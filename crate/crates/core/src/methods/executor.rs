use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{mlp_seed, DataRef, Plan, Step};
use crate::data::{Dataset, SparseSample};
use crate::error::{Error, Result};
use crate::metrics::{auc, logloss, MetricRecord};
use crate::model::{batch_gradients, predict_logits, EmbeddingBank, Field, MlpParams, ModelConfig};
use crate::numerics::{sigmoid, Scalar};
use crate::optim::{OptimState, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    /// Keep embedding optimizer slots when a bank is re-initialized.
    pub keep_embed_slots: bool,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub base_seed: u64,
    pub run_id: String,
    /// Wall-clock timings make the metrics log non-reproducible, so they are opt-in.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerKind::Adam,
            learning_rate: 0.001,
            keep_embed_slots: false,
            batch_size: 256,
            eval_batch_size: 1024,
            base_seed: 2024,
            run_id: "run".to_string(),
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size < 1 || self.eval_batch_size < 1 {
            return Err(Error::Config("batch sizes must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(
                "learning_rate must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a run mutates: current MLP, live banks, optimizer and the
/// position in the plan.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState<S: Scalar> {
    pub mlp: MlpParams<S>,
    pub banks: BTreeMap<usize, EmbeddingBank<S>>,
    pub optim: OptimState<S>,
    pub cursor: usize,
    /// Bank used by the most recent training pass.
    pub last_bank: Option<usize>,
}

impl<S: Scalar> TrainingState<S> {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            mlp: MlpParams::init(&cfg.model, mlp_seed(cfg.base_seed)),
            banks: BTreeMap::new(),
            optim: OptimState::new(cfg.optimizer, cfg.learning_rate),
            cursor: 0,
            last_bank: None,
        }
    }

    pub fn final_bank(&self) -> Option<&EmbeddingBank<S>> {
        self.last_bank.and_then(|b| self.banks.get(&b))
    }
}

pub struct RunInputs<'a> {
    pub train: &'a Dataset,
    /// Continual pieces of `train`, in time order.
    pub parts: &'a [Dataset],
    pub test: &'a Dataset,
}

impl RunInputs<'_> {
    fn dataset(&self, r: DataRef) -> Result<&Dataset> {
        match r {
            DataRef::Full => Ok(self.train),
            DataRef::Part(t) => self.parts.get(t.wrapping_sub(1)).ok_or_else(|| {
                Error::Config(format!(
                    "plan needs continual dataset {t} but {} were provided",
                    self.parts.len()
                ))
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunResult<S: Scalar> {
    pub plan: Plan,
    pub records: Vec<MetricRecord>,
    pub state: TrainingState<S>,
}

impl<S: Scalar> RunResult<S> {
    pub fn aucs(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.test_auc).collect()
    }
}

/// One shuffled pass over `ds` in minibatches. Frozen parts receive no
/// update; a frozen bank is also not grown. Returns the mean training loss.
#[allow(clippy::too_many_arguments)]
pub fn train_one_epoch<S: Scalar>(
    cfg: &TrainConfig,
    mlp: &mut MlpParams<S>,
    bank: &mut EmbeddingBank<S>,
    ds: &Dataset,
    optim: &mut OptimState<S>,
    epoch_seed: u64,
    train_embedding: bool,
    train_mlp: bool,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));

    let mut loss_sum = 0.0;
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&SparseSample> = idx.iter().map(|&i| &ds.samples[i]).collect();
        if train_embedding {
            for s in &batch {
                bank.ensure_row(Field::User, s.user_id);
                bank.ensure_row(Field::Item, s.item_id);
                bank.ensure_row(Field::Category, s.category_id);
                for &(item, cat) in &s.behavior_seq {
                    bank.ensure_row(Field::Item, item);
                    bank.ensure_row(Field::Category, cat);
                }
            }
        }
        let grads = batch_gradients(&cfg.model, mlp, bank, &batch).map_err(|e| match e {
            Error::Numeric(msg) => Error::Numeric(format!("{msg} in batch {b}")),
            other => other,
        })?;
        loss_sum += grads.loss_sum;
        if train_mlp {
            optim.step_dense(mlp, &grads.mlp)?;
        }
        if train_embedding {
            optim.step_sparse(bank, &grads.rows)?;
        }
    }
    Ok(loss_sum / ds.len() as f64)
}

/// Test AUC and logloss. A single-class test set reports NaN AUC.
pub fn evaluate<S: Scalar>(
    cfg: &TrainConfig,
    mlp: &MlpParams<S>,
    bank: &EmbeddingBank<S>,
    test: &Dataset,
) -> Result<(f64, f64)> {
    let logits = predict_logits(&cfg.model, mlp, bank, &test.samples, cfg.eval_batch_size)?;
    let scores: Vec<f64> = logits.iter().map(|z| z.as_f64()).collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite prediction on test set".into()));
    }
    let labels: Vec<u8> = test.samples.iter().map(|s| s.label).collect();
    let probs: Vec<f64> = scores.iter().map(|&z| sigmoid(z)).collect();
    let a = match auc(&scores, &labels) {
        Ok(v) => v,
        Err(Error::Metric(_)) => f64::NAN,
        Err(e) => return Err(e),
    };
    Ok((a, logloss(&probs, &labels)?))
}

fn bank_mut<S: Scalar>(state: &mut TrainingState<S>, id: usize) -> Result<&mut EmbeddingBank<S>> {
    state
        .banks
        .get_mut(&id)
        .ok_or_else(|| Error::Config(format!("plan uses bank {id} before initializing it")))
}

/// Runs `plan` from `state.cursor` up to step `stop_at` (exclusive; default:
/// the end), returning one record per executed training pass.
pub fn execute<S: Scalar>(
    cfg: &TrainConfig,
    plan: &Plan,
    inputs: &RunInputs<'_>,
    state: &mut TrainingState<S>,
    stop_at: Option<usize>,
) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let end = stop_at.unwrap_or(plan.steps.len()).min(plan.steps.len());
    let mut records = Vec::new();
    while state.cursor < end {
        match &plan.steps[state.cursor] {
            Step::InitMlp { seed } => {
                state.mlp = MlpParams::init(&cfg.model, *seed);
                state.optim.reset_dense_slots();
            }
            Step::InitBank { bank_id, seed } => {
                let bank =
                    EmbeddingBank::new(*bank_id, *seed, cfg.model.embed_init, cfg.model.embed_dim);
                state.banks.insert(*bank_id, bank);
                if !cfg.keep_embed_slots {
                    state.optim.reset_embedding_slots(*bank_id);
                }
            }
            Step::CopyBank { from, to } => {
                let copy = bank_mut(state, *from)?.relabeled(*to);
                state.banks.insert(*to, copy);
            }
            Step::DropBank { bank_id } => {
                state.banks.remove(bank_id);
                state.optim.reset_embedding_slots(*bank_id);
            }
            Step::Train {
                data,
                bank_id,
                epoch,
                pass_seed,
                train_embedding,
                train_mlp,
            } => {
                let start = Instant::now();
                let ds = inputs.dataset(*data)?;
                let TrainingState {
                    mlp, banks, optim, ..
                } = state;
                let bank = banks.get_mut(bank_id).ok_or_else(|| {
                    Error::Config(format!("plan uses bank {bank_id} before initializing it"))
                })?;
                let loss = train_one_epoch(
                    cfg,
                    mlp,
                    bank,
                    ds,
                    optim,
                    *pass_seed,
                    *train_embedding,
                    *train_mlp,
                )?;
                let (test_auc, test_logloss) = evaluate(cfg, mlp, bank, inputs.test)?;
                state.last_bank = Some(*bank_id);
                records.push(MetricRecord {
                    run_id: cfg.run_id.clone(),
                    variant: plan.method.clone(),
                    dataset_index: data.index(),
                    epoch: *epoch,
                    bank_id: *bank_id,
                    train_mean_loss: loss,
                    test_auc,
                    test_logloss,
                    wall_ms: if cfg.record_wall_time {
                        start.elapsed().as_secs_f64() * 1e3
                    } else {
                        0.0
                    },
                });
            }
        }
        state.cursor += 1;
    }
    Ok(records)
}
