#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use meda::cli::{ExperimentConfig, PreparedData};
use meda::data::{
    generate_synthetic, split_chronological, split_continual, Dataset, GenConfig, SparseSample,
};
use meda::methods::{RunInputs, TrainConfig};
use meda::model::{
    batch_gradients, batch_loss, forward_batch, EmbedTrace, Field, Gradients, InitKind,
    ModelConfig, Pooling,
};
use meda::model::{EmbeddingBank, MlpParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn benchmark_config() -> ExperimentConfig {
    ExperimentConfig::load(&manifest_dir().join("configs/benchmark.toml"))
        .expect("benchmark config")
}

/// The shipped benchmark, generated and split once per test binary.
pub fn benchmark() -> &'static PreparedData {
    static DATA: OnceLock<PreparedData> = OnceLock::new();
    DATA.get_or_init(|| benchmark_config().prepare_data().expect("benchmark data"))
}

pub fn inputs(d: &PreparedData) -> RunInputs<'_> {
    RunInputs {
        train: &d.train,
        parts: &d.parts,
        test: &d.test,
    }
}

pub fn small_gen(seed: u64) -> GenConfig {
    GenConfig {
        n_samples: 6000,
        n_users: 400,
        n_items: 300,
        n_categories: 20,
        seed,
        signal_scale: 1.5,
        user_bias_scale: 0.3,
        item_bias_scale: 1.0,
        ..GenConfig::default()
    }
}

/// Train/test split plus `t` continual parts of a small synthetic log.
pub fn small_data(seed: u64, t: usize) -> (Dataset, Vec<Dataset>, Dataset) {
    let ds = generate_synthetic(&small_gen(seed)).unwrap();
    let (train, test) = split_chronological(&ds, 0.2).unwrap();
    let parts = split_continual(&train, t, None).unwrap();
    (train, parts, test)
}

pub fn small_train_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            embed_dim: 4,
            hidden: vec![8, 4],
            attention_hidden: vec![4],
            pooling: Pooling::Mean,
            embed_init: InitKind::Uniform(0.05),
            ..ModelConfig::default()
        },
        learning_rate: 0.01,
        batch_size: 64,
        ..TrainConfig::default()
    }
}

/// Pairwise AUC oracle: fraction of positive/negative pairs ordered
/// correctly, ties counting one half.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Largest amount by which a curve falls below its running maximum.
pub fn max_drop_below_running_max(values: &[f64]) -> f64 {
    let mut best = f64::NEG_INFINITY;
    let mut worst = 0.0f64;
    for &v in values {
        best = best.max(v);
        worst = worst.max(best - v);
    }
    worst
}

pub fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

/// True when two directory trees hold the same files with the same bytes.
pub fn same_tree(a: &Path, b: &Path) -> bool {
    let fa = files_under(a);
    fa == files_under(b)
        && fa
            .iter()
            .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap())
}

pub struct GradCase {
    pub cfg: ModelConfig,
    pub mlp: MlpParams<f64>,
    pub bank: EmbeddingBank<f64>,
    pub samples: Vec<SparseSample>,
}

/// A random small model and batch. Behavior sequences repeat IDs and may
/// contain the candidate item itself.
pub fn random_grad_case(seed: u64) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = rng.random_range(2..=4);
    let hidden: Vec<usize> = (0..rng.random_range(1..=2))
        .map(|_| rng.random_range(2..=5))
        .collect();
    let cfg = ModelConfig {
        embed_dim: dim,
        hidden,
        attention_hidden: vec![rng.random_range(2..=4)],
        pooling: if rng.random_bool(0.5) {
            Pooling::Attention
        } else {
            Pooling::Mean
        },
        embed_init: InitKind::Uniform(0.5),
        ..ModelConfig::default()
    };
    let mlp = MlpParams::init(&cfg, rng.random());
    let mut bank = EmbeddingBank::new(1, rng.random(), cfg.embed_init, dim);
    let batch = rng.random_range(1..=3);
    let mut samples = Vec::new();
    for t in 0..batch {
        let item = rng.random_range(0..4u64);
        let len = rng.random_range(0..=4);
        let mut seq: Vec<(u64, u64)> = (0..len)
            .map(|_| (rng.random_range(0..4u64), rng.random_range(0..3u64)))
            .collect();
        if len >= 2 {
            seq[1] = seq[0];
        }
        if len >= 3 {
            seq[2].0 = item;
        }
        samples.push(SparseSample {
            timestamp: t,
            user_id: rng.random_range(0..2u64),
            item_id: item,
            category_id: rng.random_range(0..3u64),
            behavior_seq: seq,
            label: rng.random_range(0..2u8),
        });
    }
    for s in &samples {
        bank.ensure_row(Field::User, s.user_id);
        bank.ensure_row(Field::Item, s.item_id);
        bank.ensure_row(Field::Category, s.category_id);
        for &(i, c) in &s.behavior_seq {
            bank.ensure_row(Field::Item, i);
            bank.ensure_row(Field::Category, c);
        }
    }
    GradCase {
        cfg,
        mlp,
        bank,
        samples,
    }
}

/// Smallest |pre-activation| over every hidden ReLU unit in the case.
pub fn min_kink_distance(case: &GradCase) -> f64 {
    let refs: Vec<&SparseSample> = case.samples.iter().collect();
    let fwd = forward_batch(&case.cfg, &case.mlp, &case.bank, &refs).unwrap();
    let mut m = fwd.tower.min_abs_hidden_preactivation();
    for e in &fwd.embed {
        if let EmbedTrace::Attention(t) = e {
            m = m.min(t.stack.min_abs_hidden_preactivation());
        }
    }
    m
}

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;
pub const FD_ABS_FLOOR: f64 = 1e-8;

pub struct GradReport {
    pub checked: usize,
    pub worst_rel: f64,
    pub failures: Vec<String>,
}

/// Magnitude above which a coordinate's relative error is reported.
pub const FD_REPORT_FLOOR: f64 = 1e-6;

fn agree(analytic: f64, numeric: f64) -> (bool, f64) {
    let diff = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    let rel = diff / scale.max(f64::MIN_POSITIVE);
    (
        diff <= FD_ABS_FLOOR || rel < FD_REL_TOL,
        if scale >= FD_REPORT_FLOOR { rel } else { 0.0 },
    )
}

/// Compares every analytic gradient coordinate of the case with central
/// finite differences of the batch loss.
pub fn check_gradients(case: &GradCase) -> GradReport {
    let refs: Vec<&SparseSample> = case.samples.iter().collect();
    let grads = batch_gradients(&case.cfg, &case.mlp, &case.bank, &refs).unwrap();
    compare_gradients(case, &grads)
}

/// Finite-difference comparison against a supplied set of gradients.
#[allow(clippy::needless_range_loop)]
pub fn compare_gradients(case: &GradCase, grads: &Gradients<f64>) -> GradReport {
    let refs: Vec<&SparseSample> = case.samples.iter().collect();
    let mut report = GradReport {
        checked: 0,
        worst_rel: 0.0,
        failures: Vec::new(),
    };
    let record = |what: String, a: f64, n: f64, report: &mut GradReport| {
        let (ok, rel) = agree(a, n);
        report.checked += 1;
        report.worst_rel = report.worst_rel.max(rel);
        if !ok {
            report
                .failures
                .push(format!("{what}: analytic {a:e} numeric {n:e}"));
        }
    };

    let names = case.mlp.tensor_names();
    let grad_tensors = grads.mlp.tensors();
    for (t, name) in names.iter().enumerate() {
        for i in 0..grad_tensors[t].len() {
            let loss_at = |delta: f64| {
                let mut m = case.mlp.clone();
                m.tensors_mut()[t][i] += delta;
                batch_loss(&case.cfg, &m, &case.bank, &refs).unwrap()
            };
            let numeric = (loss_at(FD_STEP) - loss_at(-FD_STEP)) / (2.0 * FD_STEP);
            record(
                format!("{name}[{i}]"),
                grad_tensors[t][i],
                numeric,
                &mut report,
            );
        }
    }

    for field in Field::ALL {
        let ids: Vec<u64> = case.bank.table(field).ids().to_vec();
        for id in ids {
            let row = case.bank.row_of(field, id).unwrap();
            for d in 0..case.cfg.embed_dim {
                let loss_at = |delta: f64| {
                    let mut b = case.bank.clone();
                    b.row_mut(field, row)[d] += delta;
                    batch_loss(&case.cfg, &case.mlp, &b, &refs).unwrap()
                };
                let numeric = (loss_at(FD_STEP) - loss_at(-FD_STEP)) / (2.0 * FD_STEP);
                let analytic = grads.rows.get(field, id).map_or(0.0, |g| g[d]);
                record(
                    format!("{}:{id}[{d}]", field.name()),
                    analytic,
                    numeric,
                    &mut report,
                );
            }
        }
    }
    report
}

/// The first `n` seeds whose cases sit at least `margin` away from every
/// ReLU kink, so central differences never straddle one.
pub fn smooth_grad_cases(n: usize, margin: f64) -> Vec<(u64, GradCase)> {
    let mut out = Vec::new();
    let mut seed = 1u64;
    while out.len() < n {
        let case = random_grad_case(seed);
        if min_kink_distance(&case) >= margin {
            out.push((seed, case));
        }
        seed += 1;
    }
    out
}
