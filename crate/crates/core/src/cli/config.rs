use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{
    add_random_negatives, generate_synthetic, read_log_tsv, split_chronological, split_continual,
    subsample, Dataset, GenConfig, DEFAULT_MAX_SEQ_LEN,
};
use crate::error::{Error, Result};
use crate::methods::{D1Mode, MethodParams, MethodRegistry, Schedule, TrainConfig};
use crate::model::ModelConfig;
use crate::optim::OptimizerKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Tsv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub source: DataSource,
    /// Full chronological log, split into train and test by `test_fraction`.
    pub tsv_path: Option<PathBuf>,
    /// Separate test log; when set, `tsv_path` is used whole for training.
    pub test_tsv_path: Option<PathBuf>,
    pub max_seq_len: usize,
    pub test_fraction: f64,
    /// Number of continual datasets the training part is cut into.
    pub num_datasets: usize,
    /// Cumulative cut points in (0, 1); equal pieces when absent.
    pub boundaries: Option<Vec<f64>>,
    /// Data keeping rate applied to the training part.
    pub rho: f64,
    pub subsample_seed: u64,
    pub neg_per_pos: usize,
    pub negatives_seed: u64,
    pub synthetic: GenConfig,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            tsv_path: None,
            test_tsv_path: None,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            test_fraction: 0.1,
            num_datasets: 1,
            boundaries: None,
            rho: 1.0,
            subsample_seed: 7,
            neg_per_pos: 0,
            negatives_seed: 11,
            synthetic: GenConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub keep_embed_slots: bool,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            lr: 0.001,
            keep_embed_slots: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// `direct`, `meda_nc`, `meda_c` or `variant:<tag>`.
    pub method: String,
    pub k: usize,
    /// Explicit `[t, r]` passes for `meda_c`; full order when absent.
    pub schedule: Option<Vec<(usize, usize)>>,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub base_seed: u64,
    /// Defaults to `<method>-k<k>-s<seed>`.
    pub run_id: Option<String>,
    pub d1_mode: D1Mode,
    pub record_wall_time: bool,
    /// Also checkpoint after every training pass into `checkpoints/pass_NNN`.
    pub checkpoint_every_pass: bool,
    pub output_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            method: "direct".into(),
            k: 1,
            schedule: None,
            batch_size: 256,
            eval_batch_size: 1024,
            base_seed: 2024,
            run_id: None,
            d1_mode: D1Mode::Once,
            record_wall_time: false,
            checkpoint_every_pass: false,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataSection,
    pub model: ModelConfig,
    pub optim: OptimSection,
    pub run: RunSection,
}

/// Datasets a run consumes.
pub struct PreparedData {
    pub train: Dataset,
    pub parts: Vec<Dataset>,
    pub test: Dataset,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Effective config with every default written out.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    pub fn run_id(&self) -> String {
        self.run.run_id.clone().unwrap_or_else(|| {
            let m = self
                .run
                .method
                .strip_prefix("variant:")
                .unwrap_or(&self.run.method);
            format!("{m}-k{}-s{}", self.run.k, self.run.base_seed)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.source == DataSource::Synthetic {
            d.synthetic.validate()?;
        } else if d.tsv_path.is_none() {
            return Err(Error::Config(
                "data.tsv_path is required when data.source = \"tsv\"".into(),
            ));
        }
        if !(d.test_fraction > 0.0 && d.test_fraction < 1.0) && d.test_tsv_path.is_none() {
            return Err(Error::Config(
                "data.test_fraction must lie in (0, 1)".into(),
            ));
        }
        if d.num_datasets < 1 {
            return Err(Error::Config("data.num_datasets must be >= 1".into()));
        }
        if let Some(b) = &d.boundaries {
            if b.len() + 1 != d.num_datasets {
                return Err(Error::Config(format!(
                    "data.boundaries has {} cut points but data.num_datasets = {} needs {}",
                    b.len(),
                    d.num_datasets,
                    d.num_datasets - 1
                )));
            }
        }
        if !(d.rho > 0.0 && d.rho <= 1.0) {
            return Err(Error::Config("data.rho must lie in (0, 1]".into()));
        }
        self.model.validate()?;
        if !(self.optim.lr >= 0.0 && self.optim.lr.is_finite()) {
            return Err(Error::Config("optim.lr must be finite and >= 0".into()));
        }
        let r = &self.run;
        if r.k < 1 {
            return Err(Error::Config("run.k must be >= 1".into()));
        }
        if r.batch_size < 1 || r.eval_batch_size < 1 {
            return Err(Error::Config("run.batch_size must be >= 1".into()));
        }
        let registry = MethodRegistry::builtin();
        let method = registry.get(&r.method).map_err(|_| {
            Error::Config(format!(
                "run.method {:?} is not a known method or variant",
                r.method
            ))
        })?;
        if r.schedule.is_some() && method.name() != "meda_c" {
            return Err(Error::Config(
                "run.schedule only applies to method meda_c".into(),
            ));
        }
        method.plan(&self.method_params()?).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("run: {m}")),
            other => other,
        })?;
        Ok(())
    }

    pub fn method_params(&self) -> Result<MethodParams> {
        let mut p = MethodParams::new(self.run.k, self.data.num_datasets, self.run.base_seed);
        p.d1_mode = self.run.d1_mode;
        if let Some(passes) = &self.run.schedule {
            p.schedule = Some(
                Schedule::new(self.run.k, self.data.num_datasets, passes.clone()).map_err(|e| {
                    match e {
                        Error::Config(m) => Error::Config(format!("run.schedule: {m}")),
                        other => other,
                    }
                })?,
            );
        }
        Ok(p)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model.clone(),
            optimizer: self.optim.kind,
            learning_rate: self.optim.lr,
            keep_embed_slots: self.optim.keep_embed_slots,
            batch_size: self.run.batch_size,
            eval_batch_size: self.run.eval_batch_size,
            base_seed: self.run.base_seed,
            run_id: self.run_id(),
            record_wall_time: self.run.record_wall_time,
        }
    }

    /// The full log (train and test together) before any splitting.
    pub fn load_log(&self) -> Result<Dataset> {
        match self.data.source {
            DataSource::Synthetic => generate_synthetic(&self.data.synthetic),
            DataSource::Tsv => {
                let path = self.data.tsv_path.as_ref().expect("validated");
                let (ds, report) = read_log_tsv(path, self.data.max_seq_len)?;
                if report.malformed > 0 {
                    eprintln!(
                        "{}: skipped {} malformed of {} lines",
                        path.display(),
                        report.malformed,
                        report.lines
                    );
                }
                Ok(ds)
            }
        }
    }

    pub fn prepare_data(&self) -> Result<PreparedData> {
        let d = &self.data;
        let (train, test) = match (&d.source, &d.test_tsv_path) {
            (DataSource::Tsv, Some(test_path)) => {
                let train = self.load_log()?;
                let (test, _) = read_log_tsv(test_path, d.max_seq_len)?;
                (train, test)
            }
            _ => split_chronological(&self.load_log()?, d.test_fraction)?,
        };
        let train = if d.rho < 1.0 {
            subsample(&train, d.rho, d.subsample_seed)?
        } else {
            train
        };
        let train = if d.neg_per_pos > 0 {
            add_random_negatives(&train, d.neg_per_pos, d.negatives_seed)?
        } else {
            train
        };
        let parts = split_continual(&train, d.num_datasets, d.boundaries.as_deref())?;
        Ok(PreparedData { train, parts, test })
    }
}
