//! Checkpoints and metric logs.
//!
//! A checkpoint is a directory:
//!
//! ```text
//! manifest.json              format version, dtype, model config, run meta,
//!                            bank index, optimizer index, every file with
//!                            its byte length and SHA-256
//! tensors/<name>.bin         little-endian row-major blobs
//! vocab/<bank>_<field>.tsv   field<TAB>id<TAB>row, sorted by id
//! slots/<bank>_<field>.tsv   id<TAB>step for sparse optimizer slots, in the
//!                            row order of the matching slot blobs
//! ```
//!
//! Saving writes into a sibling temporary directory and renames it into
//! place, so a failed save never leaves a half-written checkpoint behind.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::methods::{TrainConfig, TrainingState};
use crate::metrics::MetricRecord;
use crate::model::{EmbeddingBank, Field, FieldTable, InitKind, MlpParams, ModelConfig};
use crate::numerics::{Matrix, Scalar};
use crate::optim::{OptimState, OptimizerKind, RowSlots, Slot};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";

/// Run-level facts stored with a checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub run_id: String,
    pub method: String,
    pub base_seed: u64,
    /// Next plan step to execute on resume.
    pub cursor: usize,
    pub last_bank: Option<usize>,
    /// Effective experiment config, if the caller has one.
    pub config: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FileEntry {
    path: String,
    bytes: u64,
    sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct BankEntry {
    bank_id: usize,
    init_seed: u64,
    init: InitKind,
    dim: usize,
    rows: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DenseSlotEntry {
    step: u64,
    first_len: usize,
    second_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct SparseSlotEntry {
    bank_id: usize,
    field: Field,
    count: usize,
    first_len: usize,
    second_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct OptimEntry {
    kind: OptimizerKind,
    learning_rate: f64,
    dense: Vec<DenseSlotEntry>,
    sparse: Vec<SparseSlotEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    model: ModelConfig,
    meta: CheckpointMeta,
    mlp_tensors: Vec<String>,
    banks: Vec<BankEntry>,
    optimizer: OptimEntry,
    files: Vec<FileEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BankStorage {
    pub bank_id: usize,
    pub rows: usize,
    pub dim: usize,
    pub bytes: u64,
}

/// Parameter payload sizes. Embedding bytes are `sum(rows) * D * scalar size`
/// over all banks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StorageReport {
    pub banks: Vec<BankStorage>,
    pub embedding_bytes: u64,
    pub mlp_bytes: u64,
    /// Everything on disk, including vocab maps, optimizer slots and manifest.
    pub total_file_bytes: u64,
}

impl StorageReport {
    pub fn render(&self) -> String {
        let mut out = String::from("bank_id\trows\tdim\tbytes\n");
        for b in &self.banks {
            let _ = writeln!(out, "{}\t{}\t{}\t{}", b.bank_id, b.rows, b.dim, b.bytes);
        }
        let _ = writeln!(out, "embedding_bytes\t{}", self.embedding_bytes);
        let _ = writeln!(out, "mlp_bytes\t{}", self.mlp_bytes);
        let _ = writeln!(out, "total_file_bytes\t{}", self.total_file_bytes);
        out
    }
}

/// Embedding accounting without touching the disk.
pub fn storage_report<S: Scalar>(
    mlp: &MlpParams<S>,
    banks: &BTreeMap<usize, EmbeddingBank<S>>,
) -> StorageReport {
    let banks: Vec<BankStorage> = banks
        .values()
        .map(|b| BankStorage {
            bank_id: b.bank_id(),
            rows: b.total_rows(),
            dim: b.dim(),
            bytes: (b.total_rows() * b.dim() * S::BYTES) as u64,
        })
        .collect();
    StorageReport {
        embedding_bytes: banks.iter().map(|b| b.bytes).sum(),
        mlp_bytes: (mlp.num_params() * S::BYTES) as u64,
        banks,
        total_file_bytes: 0,
    }
}

pub struct Checkpoint<S: Scalar> {
    pub model: ModelConfig,
    pub meta: CheckpointMeta,
    pub mlp: MlpParams<S>,
    pub banks: BTreeMap<usize, EmbeddingBank<S>>,
    pub optim: OptimState<S>,
}

fn to_bytes<S: Scalar>(values: &[S]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * S::BYTES);
    for &v in values {
        v.extend_le_bytes(&mut out);
    }
    out
}

fn from_bytes<S: Scalar>(bytes: &[u8], name: &str) -> Result<Vec<S>> {
    if !bytes.len().is_multiple_of(S::BYTES) {
        return Err(Error::Corruption(format!(
            "{name}: {} bytes is not a whole number of {} values",
            bytes.len(),
            S::DTYPE
        )));
    }
    Ok(bytes.chunks_exact(S::BYTES).map(S::from_le_slice).collect())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

struct Writer {
    root: PathBuf,
    files: Vec<FileEntry>,
}

impl Writer {
    fn put(&mut self, rel: String, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(&rel);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.files.push(FileEntry {
            path: rel,
            bytes: bytes.len() as u64,
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }
}

fn bank_field_key(bank_id: usize, field: Field) -> String {
    format!("{bank_id}_{}", field.name())
}

fn temp_sibling(path: &Path) -> Result<PathBuf> {
    let name = path.file_name().ok_or_else(|| {
        Error::Config(format!(
            "checkpoint path {} has no file name",
            path.display()
        ))
    })?;
    let mut tmp = name.to_os_string();
    tmp.push(format!(".tmp-{}", std::process::id()));
    Ok(path.with_file_name(tmp))
}

/// Writes a checkpoint directory at `path`, replacing any previous one.
pub fn save_checkpoint<S: Scalar>(
    path: &Path,
    model: &ModelConfig,
    mlp: &MlpParams<S>,
    banks: &BTreeMap<usize, EmbeddingBank<S>>,
    optim: &OptimState<S>,
    meta: &CheckpointMeta,
) -> Result<StorageReport> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = temp_sibling(path)?;
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    let result = write_dir(&tmp, model, mlp, banks, optim, meta).and_then(|total| {
        if path.exists() {
            fs::remove_dir_all(path).map_err(|e| Error::io(path, e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        Ok(total)
    });
    match result {
        Ok(total) => {
            let mut report = storage_report(mlp, banks);
            report.total_file_bytes = total;
            Ok(report)
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&tmp);
            Err(e)
        }
    }
}

fn write_dir<S: Scalar>(
    root: &Path,
    model: &ModelConfig,
    mlp: &MlpParams<S>,
    banks: &BTreeMap<usize, EmbeddingBank<S>>,
    optim: &OptimState<S>,
    meta: &CheckpointMeta,
) -> Result<u64> {
    for sub in ["tensors", "vocab", "slots"] {
        let p = root.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut w = Writer {
        root: root.to_path_buf(),
        files: Vec::new(),
    };

    let mlp_tensors = mlp.tensor_names();
    for (name, t) in mlp_tensors.iter().zip(mlp.tensors()) {
        w.put(format!("tensors/mlp.{name}.bin"), &to_bytes(t))?;
    }

    let mut bank_entries = Vec::new();
    for bank in banks.values() {
        let mut rows = BTreeMap::new();
        for field in Field::ALL {
            let table = bank.table(field);
            let key = bank_field_key(bank.bank_id(), field);
            w.put(
                format!("tensors/bank.{key}.bin"),
                &to_bytes(table.rows().data()),
            )?;
            let mut order: Vec<(u64, usize)> = table
                .ids()
                .iter()
                .enumerate()
                .map(|(r, &id)| (id, r))
                .collect();
            order.sort_unstable();
            let mut tsv = String::new();
            for (id, r) in order {
                let _ = writeln!(tsv, "{}\t{id}\t{r}", field.name());
            }
            w.put(format!("vocab/{key}.tsv"), tsv.as_bytes())?;
            rows.insert(field.name().to_string(), table.len());
        }
        bank_entries.push(BankEntry {
            bank_id: bank.bank_id(),
            init_seed: bank.init_seed(),
            init: bank.init_kind(),
            dim: bank.dim(),
            rows,
        });
    }

    let mut dense = Vec::new();
    for (i, slot) in optim.dense_slots().iter().enumerate() {
        w.put(
            format!("tensors/optim.dense.{i}.first.bin"),
            &to_bytes(&slot.first),
        )?;
        w.put(
            format!("tensors/optim.dense.{i}.second.bin"),
            &to_bytes(&slot.second),
        )?;
        dense.push(DenseSlotEntry {
            step: slot.step,
            first_len: slot.first.len(),
            second_len: slot.second.len(),
        });
    }

    let mut sparse = Vec::new();
    for (&bank_id, slots) in optim.sparse_slots() {
        for field in Field::ALL {
            let mut entries: Vec<(u64, &Slot<S>)> = slots
                .iter()
                .filter(|((f, _), _)| *f == field)
                .map(|((_, id), s)| (*id, s))
                .collect();
            if entries.is_empty() {
                continue;
            }
            entries.sort_unstable_by_key(|(id, _)| *id);
            let first_len = entries[0].1.first.len();
            let second_len = entries[0].1.second.len();
            if entries
                .iter()
                .any(|(_, s)| s.first.len() != first_len || s.second.len() != second_len)
            {
                return Err(Error::Format(format!(
                    "inconsistent optimizer slot widths in bank {bank_id} field {}",
                    field.name()
                )));
            }
            let key = bank_field_key(bank_id, field);
            let mut tsv = String::new();
            let (mut first, mut second) = (Vec::new(), Vec::new());
            for (id, s) in &entries {
                let _ = writeln!(tsv, "{id}\t{}", s.step);
                first.extend_from_slice(&s.first);
                second.extend_from_slice(&s.second);
            }
            w.put(format!("slots/{key}.tsv"), tsv.as_bytes())?;
            w.put(
                format!("tensors/optim.sparse.{key}.first.bin"),
                &to_bytes(&first),
            )?;
            w.put(
                format!("tensors/optim.sparse.{key}.second.bin"),
                &to_bytes(&second),
            )?;
            sparse.push(SparseSlotEntry {
                bank_id,
                field,
                count: entries.len(),
                first_len,
                second_len,
            });
        }
    }

    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dtype: S::DTYPE.to_string(),
        model: model.clone(),
        meta: meta.clone(),
        mlp_tensors,
        banks: bank_entries,
        optimizer: OptimEntry {
            kind: optim.kind(),
            learning_rate: optim.learning_rate(),
            dense,
            sparse,
        },
        files: w.files,
    };
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    text.push('\n');
    let mp = root.join(MANIFEST);
    fs::write(&mp, &text).map_err(|e| Error::io(&mp, e))?;
    Ok(manifest.files.iter().map(|f| f.bytes).sum::<u64>() + text.len() as u64)
}

struct Reader {
    root: PathBuf,
    files: HashMap<String, FileEntry>,
}

impl Reader {
    fn get(&self, rel: &str) -> Result<Vec<u8>> {
        let entry = self
            .files
            .get(rel)
            .ok_or_else(|| Error::Format(format!("manifest does not list {rel}")))?;
        let path = self.root.join(rel);
        let bytes = fs::read(&path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Corruption(format!("missing file {rel}")),
            _ => Error::io(&path, e),
        })?;
        if bytes.len() as u64 != entry.bytes {
            return Err(Error::Corruption(format!(
                "{rel}: expected {} bytes, found {}",
                entry.bytes,
                bytes.len()
            )));
        }
        if sha256_hex(&bytes) != entry.sha256 {
            return Err(Error::Corruption(format!("{rel}: checksum mismatch")));
        }
        Ok(bytes)
    }

    fn values<S: Scalar>(&self, rel: &str, len: usize) -> Result<Vec<S>> {
        let v = from_bytes(&self.get(rel)?, rel)?;
        if v.len() != len {
            return Err(Error::Corruption(format!(
                "{rel}: expected {len} values, found {}",
                v.len()
            )));
        }
        Ok(v)
    }

    fn text(&self, rel: &str) -> Result<String> {
        String::from_utf8(self.get(rel)?)
            .map_err(|_| Error::Corruption(format!("{rel}: not valid UTF-8")))
    }
}

fn bad_line(rel: &str, line: usize) -> Error {
    Error::Corruption(format!("{rel}: malformed line {}", line + 1))
}

/// Reads a checkpoint written by [`save_checkpoint`], verifying every file.
pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let mp = path.join(MANIFEST);
    let text = fs::read_to_string(&mp).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => {
            Error::Format(format!("no {MANIFEST} in {}", path.display()))
        }
        _ => Error::io(&mp, e),
    })?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mp.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
            manifest.format_version
        )));
    }
    if manifest.dtype != S::DTYPE {
        return Err(Error::Format(format!(
            "checkpoint holds {} values but {} was requested",
            manifest.dtype,
            S::DTYPE
        )));
    }
    manifest.model.validate()?;
    let reader = Reader {
        root: path.to_path_buf(),
        files: manifest
            .files
            .iter()
            .map(|f| (f.path.clone(), f.clone()))
            .collect(),
    };

    let template = MlpParams::<S>::init(&manifest.model, 0);
    if template.tensor_names() != manifest.mlp_tensors {
        return Err(Error::Format(
            "MLP tensor list does not match the model config".into(),
        ));
    }
    let tensors = manifest
        .mlp_tensors
        .iter()
        .zip(template.tensors())
        .map(|(name, t)| reader.values(&format!("tensors/mlp.{name}.bin"), t.len()))
        .collect::<Result<Vec<_>>>()?;
    let mlp = MlpParams::from_tensors(&manifest.model, tensors)?;

    let mut banks = BTreeMap::new();
    for entry in &manifest.banks {
        let mut tables = Vec::with_capacity(3);
        for field in Field::ALL {
            let key = bank_field_key(entry.bank_id, field);
            let n = *entry.rows.get(field.name()).ok_or_else(|| {
                Error::Format(format!("bank {} lacks {}", entry.bank_id, field.name()))
            })?;
            let vocab = format!("vocab/{key}.tsv");
            let mut ids = vec![None; n];
            for (ln, line) in reader.text(&vocab)?.lines().enumerate() {
                let mut parts = line.split('\t');
                let (f, id, row) = (parts.next(), parts.next(), parts.next());
                let id: u64 = id
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad_line(&vocab, ln))?;
                let row: usize = row
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad_line(&vocab, ln))?;
                if f != Some(field.name())
                    || parts.next().is_some()
                    || row >= n
                    || ids[row].is_some()
                {
                    return Err(bad_line(&vocab, ln));
                }
                ids[row] = Some(id);
            }
            let ids: Vec<u64> = ids
                .into_iter()
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Corruption(format!("{vocab}: rows missing")))?;
            let data = reader.values(&format!("tensors/bank.{key}.bin"), n * entry.dim)?;
            let rows = if n == 0 {
                Matrix::zeros(0, entry.dim)
            } else {
                Matrix::from_vec(n, entry.dim, data)?
            };
            tables.push(FieldTable::from_parts(ids, rows)?);
        }
        let tables: [FieldTable<S>; 3] = tables
            .try_into()
            .map_err(|_| Error::Format("bank does not have exactly three field tables".into()))?;
        banks.insert(
            entry.bank_id,
            EmbeddingBank::from_tables(
                entry.bank_id,
                entry.init_seed,
                entry.init,
                entry.dim,
                tables,
            )?,
        );
    }

    let opt = &manifest.optimizer;
    let mut optim = OptimState::new(opt.kind, opt.learning_rate);
    let mut dense = Vec::with_capacity(opt.dense.len());
    for (i, d) in opt.dense.iter().enumerate() {
        dense.push(Slot {
            first: reader.values(&format!("tensors/optim.dense.{i}.first.bin"), d.first_len)?,
            second: reader.values(&format!("tensors/optim.dense.{i}.second.bin"), d.second_len)?,
            step: d.step,
        });
    }
    let mut sparse: BTreeMap<usize, RowSlots<S>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for s in &opt.sparse {
        if !seen.insert((s.bank_id, s.field)) {
            return Err(Error::Format(format!(
                "duplicate slot group for bank {} field {}",
                s.bank_id,
                s.field.name()
            )));
        }
        let key = bank_field_key(s.bank_id, s.field);
        let index = format!("slots/{key}.tsv");
        let first: Vec<S> = reader.values(
            &format!("tensors/optim.sparse.{key}.first.bin"),
            s.count * s.first_len,
        )?;
        let second: Vec<S> = reader.values(
            &format!("tensors/optim.sparse.{key}.second.bin"),
            s.count * s.second_len,
        )?;
        let text = reader.text(&index)?;
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() != s.count {
            return Err(Error::Corruption(format!(
                "{index}: expected {} entries, found {}",
                s.count,
                lines.len()
            )));
        }
        let group = sparse.entry(s.bank_id).or_default();
        for (i, line) in lines.iter().enumerate() {
            let (id, step) = line
                .split_once('\t')
                .and_then(|(a, b)| Some((a.parse::<u64>().ok()?, b.parse::<u64>().ok()?)))
                .ok_or_else(|| bad_line(&index, i))?;
            group.insert(
                (s.field, id),
                Slot {
                    first: first[i * s.first_len..(i + 1) * s.first_len].to_vec(),
                    second: second[i * s.second_len..(i + 1) * s.second_len].to_vec(),
                    step,
                },
            );
        }
    }
    optim.restore_slots(dense, sparse);

    Ok(Checkpoint {
        model: manifest.model,
        meta: manifest.meta,
        mlp,
        banks,
        optim,
    })
}

/// Saves a full training state, including the plan cursor.
pub fn save_state<S: Scalar>(
    path: &Path,
    cfg: &TrainConfig,
    method: &str,
    state: &TrainingState<S>,
    config_echo: Option<serde_json::Value>,
) -> Result<StorageReport> {
    let meta = CheckpointMeta {
        run_id: cfg.run_id.clone(),
        method: method.to_string(),
        base_seed: cfg.base_seed,
        cursor: state.cursor,
        last_bank: state.last_bank,
        config: config_echo,
    };
    save_checkpoint(
        path,
        &cfg.model,
        &state.mlp,
        &state.banks,
        &state.optim,
        &meta,
    )
}

/// Loads a state saved by [`save_state`], checking it belongs to `cfg`.
pub fn load_state<S: Scalar>(
    path: &Path,
    cfg: &TrainConfig,
    method: &str,
) -> Result<TrainingState<S>> {
    let ck = load_checkpoint::<S>(path)?;
    if ck.model != cfg.model {
        return Err(Error::Config(
            "checkpoint model config differs from the run config".into(),
        ));
    }
    if ck.meta.method != method || ck.meta.base_seed != cfg.base_seed {
        return Err(Error::Config(format!(
            "checkpoint is for method {:?} seed {}, run is {method:?} seed {}",
            ck.meta.method, ck.meta.base_seed, cfg.base_seed
        )));
    }
    if ck.optim.kind() != cfg.optimizer
        || ck.optim.learning_rate().to_bits() != cfg.learning_rate.to_bits()
    {
        return Err(Error::Config(
            "checkpoint optimizer differs from the run config".into(),
        ));
    }
    Ok(TrainingState {
        mlp: ck.mlp,
        banks: ck.banks,
        optim: ck.optim,
        cursor: ck.meta.cursor,
        last_bank: ck.meta.last_bank,
    })
}

pub const METRICS_HEADER: [&str; 9] = [
    "run_id",
    "variant",
    "dataset_index",
    "epoch",
    "bank_id",
    "train_mean_loss",
    "test_auc",
    "test_logloss",
    "wall_ms",
];

fn record_fields(r: &MetricRecord) -> [String; 9] {
    [
        r.run_id.clone(),
        r.variant.clone(),
        r.dataset_index.to_string(),
        r.epoch.to_string(),
        r.bank_id.to_string(),
        format!("{:.6}", r.train_mean_loss),
        format!("{:.6}", r.test_auc),
        format!("{:.6}", r.test_logloss),
        format!("{:.6}", r.wall_ms),
    ]
}

/// Header plus one line per record; floats use six decimals and NaN AUC is `NaN`.
pub fn format_metrics_csv(records: &[MetricRecord]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let fmt_err = |e: csv::Error| Error::Format(format!("metrics csv: {e}"));
    w.write_record(METRICS_HEADER).map_err(fmt_err)?;
    for r in records {
        w.write_record(record_fields(r)).map_err(fmt_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Format(format!("metrics csv: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(format!("metrics csv: {e}")))
}

pub fn parse_metrics_csv(text: &str, origin: &str) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header = rdr
        .headers()
        .map_err(|e| Error::Format(format!("{origin}: {e}")))?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Format(format!("{origin}: unexpected header")));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let bad = || Error::Format(format!("{origin}: malformed row {}", i + 2));
        let row = row.map_err(|_| bad())?;
        if row.len() != METRICS_HEADER.len() {
            return Err(bad());
        }
        let int = |j: usize| row[j].parse::<usize>().map_err(|_| bad());
        let float = |j: usize| row[j].parse::<f64>().map_err(|_| bad());
        out.push(MetricRecord {
            run_id: row[0].to_string(),
            variant: row[1].to_string(),
            dataset_index: int(2)?,
            epoch: int(3)?,
            bank_id: int(4)?,
            train_mean_loss: float(5)?,
            test_auc: float(6)?,
            test_logloss: float(7)?,
            wall_ms: float(8)?,
        });
    }
    Ok(out)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_metrics_csv(&text, &path.display().to_string())
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let text = format_metrics_csv(records)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Adds `records` to the log at `path`. Existing rows whose run_id appears in
/// `records` are replaced, so re-running a run never duplicates it.
pub fn append_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut all = if path.exists() {
        read_metrics_csv(path)?
    } else {
        Vec::new()
    };
    let ids: BTreeSet<&str> = records.iter().map(|r| r.run_id.as_str()).collect();
    all.retain(|r| !ids.contains(r.run_id.as_str()));
    all.extend(records.iter().cloned());
    write_metrics_csv(path, &all)
}
