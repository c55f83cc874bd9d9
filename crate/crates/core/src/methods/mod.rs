//! Multi-epoch training methods.
//!
//! Every method (direct multi-epoch training, non-continual and continual
//! MEDA, and the ablation variants) is a [`TrainingMethod`] registered by name
//! in a [`MethodRegistry`]. A method only decides *what* happens: it compiles
//! to a [`Plan`], a flat list of [`Step`]s such as "reinitialize bank 2" or
//! "train bank 2 on dataset 1 for one pass". The executor in
//! [`executor`] runs plans, evaluating on the test set after each pass. The
//! executor keeps a cursor into the plan, so a run can stop at any step
//! boundary and resume from a checkpoint.

mod builtin;
pub mod executor;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use builtin::{
    D1EmbAsFixed, D1EmbAsInitial, Direct, FreezeWhen, Freezing, MedaC, MedaCOrder, MedaNc,
    MultiMlp, OrderKind, ReinitMlp, SameInit, SameInitTarget,
};
pub use executor::{
    evaluate, execute, train_one_epoch, RunInputs, RunResult, TrainConfig, TrainingState,
};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, Scalar};

const MLP_TAG: u64 = 0x004D_4C50;
const SHUFFLE_TAG: u64 = 0x0053_4855;

/// Seed of bank `r`: `base_seed XOR r`.
pub fn bank_seed(base_seed: u64, bank: usize) -> u64 {
    base_seed ^ bank as u64
}

/// Seed of the initial MLP.
pub fn mlp_seed(base_seed: u64) -> u64 {
    derive_seed(&[base_seed, MLP_TAG])
}

/// Seed of an independently re-drawn MLP, distinct for every `draw >= 1`.
pub fn fresh_mlp_seed(base_seed: u64, draw: usize) -> u64 {
    derive_seed(&[base_seed, MLP_TAG, draw as u64])
}

/// Shuffle seed for a pass over dataset `t` labelled `epoch`.
pub fn pass_seed(base_seed: u64, dataset: usize, epoch: usize) -> u64 {
    derive_seed(&[base_seed, SHUFFLE_TAG, dataset as u64, epoch as u64])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataRef {
    /// The whole training set (reported as dataset 1).
    Full,
    /// Continual piece `t`, 1-based.
    Part(usize),
}

impl DataRef {
    pub fn index(self) -> usize {
        match self {
            DataRef::Full => 1,
            DataRef::Part(t) => t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Step {
    /// Replace the MLP with a fresh draw and clear its optimizer slots.
    InitMlp {
        seed: u64,
    },
    /// Replace bank `bank_id` with an empty lazily initialized bank.
    InitBank {
        bank_id: usize,
        seed: u64,
    },
    /// Copy bank `from` into slot `to`.
    CopyBank {
        from: usize,
        to: usize,
    },
    DropBank {
        bank_id: usize,
    },
    /// One pass over `data` with bank `bank_id`, then evaluate.
    Train {
        data: DataRef,
        bank_id: usize,
        epoch: usize,
        pass_seed: u64,
        train_embedding: bool,
        train_mlp: bool,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub method: String,
    pub steps: Vec<Step>,
}

impl Plan {
    fn new(method: &str) -> Self {
        Self {
            method: method.to_string(),
            steps: Vec::new(),
        }
    }

    fn push(&mut self, step: Step) -> &mut Self {
        self.steps.push(step);
        self
    }

    pub fn train_steps(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| matches!(s, Step::Train { .. }))
            .count()
    }
}

/// Ordered `(dataset t, bank r)` passes of continual MEDA, both 1-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schedule {
    pub k: usize,
    pub num_datasets: usize,
    pub passes: Vec<(usize, usize)>,
}

impl Schedule {
    /// Every bank once per dataset: `t` ascending, then `r` ascending.
    pub fn full(k: usize, num_datasets: usize) -> Self {
        let passes = (1..=num_datasets)
            .flat_map(|t| (1..=k).map(move |r| (t, r)))
            .collect();
        Self {
            k,
            num_datasets,
            passes,
        }
    }

    pub fn new(k: usize, num_datasets: usize, passes: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for &(t, r) in &passes {
            if t < 1 || t > num_datasets {
                return Err(Error::Config(format!(
                    "schedule references dataset {t} outside 1..={num_datasets}"
                )));
            }
            if r < 1 || r > k {
                return Err(Error::Config(format!(
                    "schedule references bank {r} outside 1..={k}"
                )));
            }
            if !seen.insert((t, r)) {
                return Err(Error::Config(format!("schedule repeats pass ({t}, {r})")));
            }
        }
        Ok(Self {
            k,
            num_datasets,
            passes,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum D1Mode {
    /// The first dataset is trained once with a single bank.
    #[default]
    Once,
    /// The first dataset is trained `k` times with fresh banks, and the last bank is carried over.
    Multi,
}

/// Method-independent knobs a plan is built from.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodParams {
    pub k: usize,
    pub num_datasets: usize,
    pub schedule: Option<Schedule>,
    pub d1_mode: D1Mode,
    pub base_seed: u64,
}

impl MethodParams {
    pub fn new(k: usize, num_datasets: usize, base_seed: u64) -> Self {
        Self {
            k,
            num_datasets,
            schedule: None,
            d1_mode: D1Mode::Once,
            base_seed,
        }
    }
}

pub trait TrainingMethod: Send + Sync {
    fn name(&self) -> &'static str;

    fn description(&self) -> &'static str;

    /// Whether the method consumes the continual split of the training set.
    fn continual(&self) -> bool;

    fn plan(&self, params: &MethodParams) -> Result<Plan>;
}

pub struct MethodRegistry {
    methods: BTreeMap<&'static str, Box<dyn TrainingMethod>>,
}

impl MethodRegistry {
    pub fn empty() -> Self {
        Self {
            methods: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        builtin::register_all(&mut r);
        r
    }

    pub fn register(&mut self, method: Box<dyn TrainingMethod>) {
        self.methods.insert(method.name(), method);
    }

    /// Accepts `direct`, `meda_nc`, `meda_c`, a bare variant tag, or
    /// `variant:<tag>`.
    pub fn get(&self, name: &str) -> Result<&dyn TrainingMethod> {
        let key = name.strip_prefix("variant:").unwrap_or(name);
        self.methods
            .get(key)
            .map(|m| m.as_ref())
            .ok_or_else(|| Error::Config(format!("unknown method or variant {name:?}")))
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.keys().copied().collect()
    }
}

pub const VARIANT_TAGS: [&str; 15] = [
    "emb_fix",
    "mlp_fix",
    "emb_fix_after_1",
    "mlp_fix_after_1",
    "emb_same_init",
    "mlp_same_init",
    "emb_reinit",
    "mlp_reinit",
    "d1_emb_as_initial",
    "d1_emb_as_fixed",
    "medac_emb_reuse",
    "medac_multi_mlp",
    "medac_reversed_order",
    "medac_omit_even",
    "medac_omit_odd",
];

fn run_named<S: Scalar>(
    name: &str,
    params: &MethodParams,
    inputs: &RunInputs<'_>,
    cfg: &TrainConfig,
) -> Result<RunResult<S>> {
    let registry = MethodRegistry::builtin();
    let plan = registry.get(name)?.plan(params)?;
    let mut state = TrainingState::new(cfg);
    let records = execute(cfg, &plan, inputs, &mut state, None)?;
    Ok(RunResult {
        plan,
        records,
        state,
    })
}

/// `k` consecutive epochs of the same parameters; `k = 1` is single-epoch training.
pub fn run_direct<S: Scalar>(
    k: usize,
    inputs: &RunInputs<'_>,
    cfg: &TrainConfig,
) -> Result<RunResult<S>> {
    run_named(
        "direct",
        &MethodParams::new(k, 1, cfg.base_seed),
        inputs,
        cfg,
    )
}

/// Fresh embedding bank each epoch, MLP carried forward.
pub fn run_meda_nc<S: Scalar>(
    k: usize,
    inputs: &RunInputs<'_>,
    cfg: &TrainConfig,
) -> Result<RunResult<S>> {
    run_named(
        "meda_nc",
        &MethodParams::new(k, 1, cfg.base_seed),
        inputs,
        cfg,
    )
}

/// `k` banks, each trained at most once per continual dataset, per `schedule`.
pub fn run_meda_c<S: Scalar>(
    schedule: &Schedule,
    inputs: &RunInputs<'_>,
    cfg: &TrainConfig,
) -> Result<RunResult<S>> {
    if inputs.parts.len() != schedule.num_datasets {
        return Err(Error::Config(format!(
            "schedule expects {} datasets, {} provided",
            schedule.num_datasets,
            inputs.parts.len()
        )));
    }
    let mut params = MethodParams::new(schedule.k, schedule.num_datasets, cfg.base_seed);
    params.schedule = Some(schedule.clone());
    run_named("meda_c", &params, inputs, cfg)
}

pub fn run_variant<S: Scalar>(
    variant: &str,
    params: &MethodParams,
    inputs: &RunInputs<'_>,
    cfg: &TrainConfig,
) -> Result<RunResult<S>> {
    if !VARIANT_TAGS.contains(&variant) {
        return Err(Error::Config(format!("unknown variant tag {variant:?}")));
    }
    run_named(variant, params, inputs, cfg)
}
