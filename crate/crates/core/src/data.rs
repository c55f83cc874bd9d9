//! Sparse impression logs: synthetic generation, TSV ingestion and the
//! chronological / continual / subsampling splits used by every experiment.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, sigmoid};

pub const DEFAULT_MAX_SEQ_LEN: usize = 20;

/// One impression. `behavior_seq` holds `(item_id, category_id)` pairs,
/// most recent first.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SparseSample {
    pub timestamp: u64,
    pub user_id: u64,
    pub item_id: u64,
    pub category_id: u64,
    pub behavior_seq: Vec<(u64, u64)>,
    pub label: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldKind {
    ScalarCategorical,
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub fields: Vec<FieldSpec>,
    pub max_seq_len: usize,
}

impl Default for FieldSchema {
    fn default() -> Self {
        let scalar = |n: &str| FieldSpec {
            name: n.to_string(),
            kind: FieldKind::ScalarCategorical,
        };
        Self {
            fields: vec![
                scalar("user"),
                scalar("item"),
                scalar("category"),
                FieldSpec {
                    name: "behavior".to_string(),
                    kind: FieldKind::Sequence,
                },
            ],
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub samples: Vec<SparseSample>,
    pub schema: FieldSchema,
}

impl Dataset {
    pub fn new(samples: Vec<SparseSample>, schema: FieldSchema) -> Self {
        Self { samples, schema }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let pos = self.samples.iter().filter(|s| s.label == 1).count();
        pos as f64 / self.samples.len() as f64
    }

    fn with_samples(&self, samples: Vec<SparseSample>) -> Self {
        Self {
            samples,
            schema: self.schema.clone(),
        }
    }

    pub fn is_time_sorted(&self) -> bool {
        self.samples
            .windows(2)
            .all(|w| w[0].timestamp <= w[1].timestamp)
    }

    /// Serializes in the TSV log format, one sample per line.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let seq = s
                .behavior_seq
                .iter()
                .map(|(i, c)| format!("{i}:{c}"))
                .collect::<Vec<_>>()
                .join("|");
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}",
                s.timestamp, s.user_id, s.item_id, s.category_id, seq, s.label
            );
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub n_samples: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub n_categories: usize,
    pub latent_dim: usize,
    pub zipf_exponent: f64,
    pub target_positive_rate: f64,
    pub max_seq_len: usize,
    pub seed: u64,
    /// Multiplier on the user/item latent inner product inside the logit.
    pub signal_scale: f64,
    /// Standard deviation of per-user additive logit offsets.
    pub user_bias_scale: f64,
    /// Standard deviation of per-item additive logit offsets.
    pub item_bias_scale: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_samples: 400_000,
            n_users: 60_000,
            n_items: 60_000,
            n_categories: 200,
            latent_dim: 8,
            zipf_exponent: 1.1,
            target_positive_rate: 0.5,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            seed: 2024,
            signal_scale: 1.0,
            user_bias_scale: 0.0,
            item_bias_scale: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_samples", self.n_samples),
            ("n_users", self.n_users),
            ("n_items", self.n_items),
            ("n_categories", self.n_categories),
            ("latent_dim", self.latent_dim),
        ];
        for (name, v) in counts {
            if v < 1 {
                return Err(Error::Config(format!("data.synthetic.{name} must be >= 1")));
            }
        }
        if self.zipf_exponent.is_nan() || self.zipf_exponent < 0.0 {
            return Err(Error::Config(
                "data.synthetic.zipf_exponent must be >= 0".into(),
            ));
        }
        if !(self.target_positive_rate > 0.0 && self.target_positive_rate < 1.0) {
            return Err(Error::Config(
                "data.synthetic.target_positive_rate must lie in (0, 1)".into(),
            ));
        }
        if !self.signal_scale.is_finite()
            || !(self.user_bias_scale >= 0.0 && self.user_bias_scale.is_finite())
            || !(self.item_bias_scale >= 0.0 && self.item_bias_scale.is_finite())
        {
            return Err(Error::Config(
                "data.synthetic.signal_scale must be finite and bias scales finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

const CALIBRATION_STEPS: usize = 200;
const CALIBRATION_TOL: f64 = 1e-6;

/// Finds the offset `b` with `mean(sigmoid(logit + b)) == target` by bisection.
fn calibrate_offset(logits: &[f64], target: f64) -> Result<f64> {
    let rate = |b: f64| logits.iter().map(|&z| sigmoid(z + b)).sum::<f64>() / logits.len() as f64;
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    for _ in 0..CALIBRATION_STEPS {
        let mid = 0.5 * (lo + hi);
        let r = rate(mid);
        if (r - target).abs() < CALIBRATION_TOL {
            return Ok(mid);
        }
        if r < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Config(format!(
        "positive-rate calibration did not reach {target} within {CALIBRATION_STEPS} bisection steps"
    )))
}

/// Draws a synthetic click log from a latent-factor model.
///
/// Users are uniform, items follow a Zipf popularity law, and each label is
/// Bernoulli with `sigmoid(signal_scale * <u, v> + user_bias + item_bias + b)`
/// where `b` is calibrated so the expected positive rate matches the target.
/// A sample's behavior sequence lists that user's earlier positives.
pub fn generate_synthetic(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let stream = |tag: u64| ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, tag]));

    let mut rng = stream(1);
    let user_vecs: Vec<f64> = (0..cfg.n_users * cfg.latent_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let item_vecs: Vec<f64> = (0..cfg.n_items * cfg.latent_dim)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();

    let mut rng = stream(2);
    let mut normal = |scale: f64| -> f64 {
        if scale == 0.0 {
            0.0
        } else {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        }
    };
    let user_bias: Vec<f64> = (0..cfg.n_users)
        .map(|_| normal(cfg.user_bias_scale))
        .collect();
    let item_bias: Vec<f64> = (0..cfg.n_items)
        .map(|_| normal(cfg.item_bias_scale))
        .collect();

    let mut rng = stream(3);
    let item_category: Vec<u64> = (0..cfg.n_items)
        .map(|_| rng.random_range(0..cfg.n_categories as u64))
        .collect();

    let zipf = Zipf::new(cfg.n_items as f64, cfg.zipf_exponent)
        .map_err(|e| Error::Config(format!("zipf distribution: {e}")))?;
    let mut rng = stream(4);
    let pairs: Vec<(usize, usize)> = (0..cfg.n_samples)
        .map(|_| {
            let user = rng.random_range(0..cfg.n_users);
            let rank = zipf.sample(&mut rng) as usize;
            (user, rank.clamp(1, cfg.n_items) - 1)
        })
        .collect();

    let d = cfg.latent_dim;
    let logits: Vec<f64> = pairs
        .iter()
        .map(|&(u, i)| {
            let uv = &user_vecs[u * d..(u + 1) * d];
            let iv = &item_vecs[i * d..(i + 1) * d];
            let ip: f64 = uv.iter().zip(iv).map(|(a, b)| a * b).sum();
            cfg.signal_scale * ip + user_bias[u] + item_bias[i]
        })
        .collect();
    let offset = calibrate_offset(&logits, cfg.target_positive_rate)?;

    let mut rng = stream(5);
    let mut history: HashMap<usize, VecDeque<(u64, u64)>> = HashMap::new();
    let mut samples = Vec::with_capacity(cfg.n_samples);
    for (t, (&(user, item), &z)) in pairs.iter().zip(&logits).enumerate() {
        let p = sigmoid(z + offset);
        let label = u8::from(rng.random::<f64>() < p);
        let hist = history.entry(user).or_default();
        let behavior_seq: Vec<(u64, u64)> = hist.iter().copied().collect();
        let category = item_category[item];
        if label == 1 && cfg.max_seq_len > 0 {
            hist.push_front((item as u64, category));
            hist.truncate(cfg.max_seq_len);
        }
        samples.push(SparseSample {
            timestamp: t as u64,
            user_id: user as u64,
            item_id: item as u64,
            category_id: category,
            behavior_seq,
            label,
        });
    }
    Ok(Dataset::new(
        samples,
        FieldSchema {
            max_seq_len: cfg.max_seq_len,
            ..FieldSchema::default()
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ReadReport {
    pub lines: usize,
    pub malformed: usize,
}

fn parse_line(line: &str, max_seq_len: usize) -> Option<SparseSample> {
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 6 {
        return None;
    }
    let behavior_seq = if cols[4].is_empty() {
        Vec::new()
    } else {
        let mut seq = Vec::new();
        for pair in cols[4].split('|') {
            let (i, c) = pair.split_once(':')?;
            seq.push((i.parse().ok()?, c.parse().ok()?));
        }
        seq.truncate(max_seq_len);
        seq
    };
    let label = match cols[5] {
        "0" => 0,
        "1" => 1,
        _ => return None,
    };
    Some(SparseSample {
        timestamp: cols[0].parse().ok()?,
        user_id: cols[1].parse().ok()?,
        item_id: cols[2].parse().ok()?,
        category_id: cols[3].parse().ok()?,
        behavior_seq,
        label,
    })
}

/// Parses a TSV log held in memory. Malformed lines are skipped and counted;
/// more than 1% malformed is a format error.
pub fn parse_log_tsv(text: &str, max_seq_len: usize) -> Result<(Dataset, ReadReport)> {
    let mut samples = Vec::new();
    let mut report = ReadReport {
        lines: 0,
        malformed: 0,
    };
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        report.lines += 1;
        match parse_line(line, max_seq_len) {
            Some(s) => samples.push(s),
            None => report.malformed += 1,
        }
    }
    if report.malformed * 100 > report.lines {
        return Err(Error::Format(format!(
            "{} of {} lines malformed (limit 1%)",
            report.malformed, report.lines
        )));
    }
    let ds = Dataset::new(
        samples,
        FieldSchema {
            max_seq_len,
            ..FieldSchema::default()
        },
    );
    if !ds.is_time_sorted() {
        return Err(Error::Ordering("log is not sorted by timestamp".into()));
    }
    Ok((ds, report))
}

pub fn read_log_tsv(path: &Path, max_seq_len: usize) -> Result<(Dataset, ReadReport)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_log_tsv(&text, max_seq_len)
}

pub fn write_log_tsv(path: &Path, ds: &Dataset) -> Result<()> {
    fs::write(path, ds.to_tsv()).map_err(|e| Error::io(path, e))
}

/// Moves the last `ceil(n * test_fraction)` samples into the test split.
pub fn split_chronological(ds: &Dataset, test_fraction: f64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    if !ds.is_time_sorted() {
        return Err(Error::Ordering("dataset is not sorted by timestamp".into()));
    }
    let n = ds.len();
    let n_test = ((n as f64 * test_fraction) - 1e-9).ceil().max(0.0) as usize;
    let cut = n - n_test.min(n);
    Ok((
        ds.with_samples(ds.samples[..cut].to_vec()),
        ds.with_samples(ds.samples[cut..].to_vec()),
    ))
}

/// Splits a training set into `parts` contiguous chronological pieces.
/// `boundaries` are cumulative fractions; by default the pieces are equal.
pub fn split_continual(
    train: &Dataset,
    parts: usize,
    boundaries: Option<&[f64]>,
) -> Result<Vec<Dataset>> {
    if parts < 1 {
        return Err(Error::Config(
            "number of continual datasets must be >= 1".into(),
        ));
    }
    let fractions: Vec<f64> = match boundaries {
        Some(b) => b.to_vec(),
        None => (1..parts).map(|i| i as f64 / parts as f64).collect(),
    };
    if fractions.len() != parts - 1 {
        return Err(Error::Config(format!(
            "{} boundaries given for {parts} datasets (need {})",
            fractions.len(),
            parts - 1
        )));
    }
    let mut prev = 0.0;
    for &f in &fractions {
        if !(f > prev && f < 1.0) {
            return Err(Error::Config(format!(
                "continual boundaries must be strictly increasing inside (0, 1): {fractions:?}"
            )));
        }
        prev = f;
    }
    let n = train.len();
    let mut cuts: Vec<usize> = fractions
        .iter()
        .map(|f| (n as f64 * f + 1e-9).floor() as usize)
        .collect();
    cuts.insert(0, 0);
    cuts.push(n);
    Ok(cuts
        .windows(2)
        .map(|w| train.with_samples(train.samples[w[0]..w[1]].to_vec()))
        .collect())
}

/// Keeps each sample independently with probability `rho`, preserving order.
pub fn subsample(ds: &Dataset, rho: f64, seed: u64) -> Result<Dataset> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::Config(format!("rho must lie in (0, 1], got {rho}")));
    }
    if rho == 1.0 {
        return Ok(ds.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x5AB5]));
    let kept = ds
        .samples
        .iter()
        .filter(|_| rng.random::<f64>() < rho)
        .cloned()
        .collect();
    Ok(ds.with_samples(kept))
}

/// For positive-only logs: after each positive, inserts `per_positive`
/// negatives whose item is drawn uniformly from the items seen in the log.
pub fn add_random_negatives(ds: &Dataset, per_positive: usize, seed: u64) -> Result<Dataset> {
    if per_positive == 0 {
        return Ok(ds.clone());
    }
    let mut catalog: Vec<(u64, u64)> = ds
        .samples
        .iter()
        .map(|s| (s.item_id, s.category_id))
        .collect();
    catalog.sort_unstable();
    catalog.dedup_by_key(|p| p.0);
    if catalog.is_empty() {
        return Err(Error::Data(
            "cannot sample negatives from an empty log".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x4E6]));
    let mut out = Vec::with_capacity(ds.len() * (1 + per_positive));
    for s in &ds.samples {
        out.push(s.clone());
        if s.label == 1 {
            for _ in 0..per_positive {
                let (item, cat) = catalog[rng.random_range(0..catalog.len())];
                out.push(SparseSample {
                    item_id: item,
                    category_id: cat,
                    label: 0,
                    ..s.clone()
                });
            }
        }
    }
    Ok(ds.with_samples(out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> GenConfig {
        GenConfig {
            n_samples: 1000,
            n_users: 50,
            n_items: 200,
            n_categories: 10,
            latent_dim: 4,
            ..GenConfig::default()
        }
    }

    fn toy(n: usize) -> Dataset {
        let samples = (0..n as u64)
            .map(|t| SparseSample {
                timestamp: t,
                user_id: t % 3,
                item_id: t,
                category_id: t % 2,
                behavior_seq: vec![],
                label: (t % 2) as u8,
            })
            .collect();
        Dataset::new(samples, FieldSchema::default())
    }

    #[test]
    fn generate_count_and_determinism() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a.len(), 1000);
        let b = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(a.to_tsv(), b.to_tsv());
        assert!(a.is_time_sorted());
    }

    #[test]
    fn zero_signal_gives_balanced_labels() {
        let cfg = GenConfig {
            signal_scale: 0.0,
            n_samples: 20_000,
            ..small_cfg()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let rate = ds.positive_rate();
        assert!((0.45..=0.55).contains(&rate), "rate {rate}");
    }

    #[test]
    fn calibrated_rate_tracks_target() {
        let cfg = GenConfig {
            target_positive_rate: 0.2,
            n_samples: 20_000,
            signal_scale: 0.7,
            ..small_cfg()
        };
        let rate = generate_synthetic(&cfg).unwrap().positive_rate();
        assert!((rate - 0.2).abs() < 0.02, "rate {rate}");
    }

    #[test]
    fn behavior_sequences_are_causal() {
        let cfg = GenConfig {
            max_seq_len: 5,
            ..small_cfg()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let mut positives: HashMap<u64, Vec<(u64, u64)>> = HashMap::new();
        for s in &ds.samples {
            assert!(s.behavior_seq.len() <= 5);
            let prev = positives.entry(s.user_id).or_default();
            let expect: Vec<(u64, u64)> = prev.iter().rev().take(5).copied().collect();
            assert_eq!(s.behavior_seq, expect);
            if s.label == 1 {
                prev.push((s.item_id, s.category_id));
            }
        }
    }

    #[test]
    fn invalid_gen_config() {
        let cfg = GenConfig {
            target_positive_rate: 1.0,
            ..small_cfg()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
        let cfg = GenConfig {
            n_users: 0,
            ..small_cfg()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn tsv_parsing() {
        let text = "1\t2\t3\t4\t5:6|7:8\t1\n2\t2\t3\t4\t\t0\n3\t9\t9\t9\t1:1\t0\n";
        let (ds, report) = parse_log_tsv(text, 20).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(report.malformed, 0);
        assert_eq!(ds.samples[0].behavior_seq, vec![(5, 6), (7, 8)]);
        assert!(ds.samples[1].behavior_seq.is_empty());
    }

    #[test]
    fn tsv_round_trip() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let (back, _) = parse_log_tsv(&ds.to_tsv(), ds.schema.max_seq_len).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn tsv_malformed_threshold() {
        let mut text = toy(200).to_tsv();
        text.push_str("garbage line\n");
        let (ds, report) = parse_log_tsv(&text, 20).unwrap();
        assert_eq!((ds.len(), report.malformed), (200, 1));
        text.push_str("1\t2\t3\n1\t2\t3\t4\t\t7\n");
        assert!(matches!(parse_log_tsv(&text, 20), Err(Error::Format(_))));
    }

    #[test]
    fn tsv_unsorted_rejected() {
        let text = "5\t1\t1\t1\t\t0\n4\t1\t1\t1\t\t1\n";
        assert!(matches!(parse_log_tsv(text, 20), Err(Error::Ordering(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = read_log_tsv(Path::new("/nonexistent/x.tsv"), 20).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn chronological_split() {
        let (tr, te) = split_chronological(&toy(10), 0.1).unwrap();
        assert_eq!((tr.len(), te.len()), (9, 1));
        let (tr, te) = split_chronological(&toy(4), 0.5).unwrap();
        assert_eq!((tr.len(), te.len()), (2, 2));
        assert_eq!(te.samples[0].timestamp, 2);
        let max_train = tr.samples.iter().map(|s| s.timestamp).max().unwrap();
        assert!(te.samples.iter().all(|s| s.timestamp >= max_train));

        let mut unsorted = toy(4);
        unsorted.samples.swap(0, 3);
        assert!(matches!(
            split_chronological(&unsorted, 0.5),
            Err(Error::Ordering(_))
        ));
        assert!(matches!(
            split_chronological(&toy(4), 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn continual_split() {
        let ds = toy(100);
        let one = split_continual(&ds, 1, None).unwrap();
        assert_eq!(one, vec![ds.clone()]);
        let two = split_continual(&ds, 2, None).unwrap();
        assert_eq!((two[0].len(), two[1].len()), (50, 50));
        let three = split_continual(&ds, 3, Some(&[0.25, 0.5])).unwrap();
        let sizes: Vec<usize> = three.iter().map(Dataset::len).collect();
        assert_eq!(sizes, vec![25, 25, 50]);
        let joined: Vec<SparseSample> = three.into_iter().flat_map(|d| d.samples).collect();
        assert_eq!(joined, ds.samples);

        assert!(split_continual(&ds, 3, Some(&[0.5, 0.25])).is_err());
        assert!(split_continual(&ds, 2, Some(&[1.0])).is_err());
        assert!(split_continual(&ds, 0, None).is_err());
    }

    #[test]
    fn subsample_cases() {
        let ds = toy(100_000);
        assert_eq!(subsample(&ds, 1.0, 3).unwrap(), ds);
        let half = subsample(&ds, 0.5, 3).unwrap();
        // 3-sigma binomial band is roughly +/-475; [49k, 51k] is wider still.
        assert!((49_000..=51_000).contains(&half.len()), "{}", half.len());
        assert_eq!(half, subsample(&ds, 0.5, 3).unwrap());
        assert!(half.is_time_sorted());
        assert!(matches!(subsample(&ds, 0.0, 3), Err(Error::Config(_))));
        assert!(matches!(subsample(&ds, 1.5, 3), Err(Error::Config(_))));
    }

    #[test]
    fn random_negatives() {
        let text = "1\t1\t10\t1\t\t1\n2\t2\t11\t2\t\t1\n";
        let (ds, _) = parse_log_tsv(text, 20).unwrap();
        let out = add_random_negatives(&ds, 2, 1).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out.samples.iter().filter(|s| s.label == 0).count(), 4);
        assert!(out.is_time_sorted());
    }
}
