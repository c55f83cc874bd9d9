//! Command-line experiment runner.
//!
//! Every run is described by a TOML [`ExperimentConfig`]; flags only override
//! a few fields. Set `MEDA_CHECK_MODE=1` to run in 64-bit floating point.

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::Command;

use clap::{Args, Parser, Subcommand};

pub use config::{
    DataSection, DataSource, ExperimentConfig, OptimSection, PreparedData, RunSection,
};

use crate::data::write_log_tsv;
use crate::error::{Error, Result};
use crate::methods::{evaluate, execute, MethodRegistry, RunInputs, Step, TrainingState};
use crate::metrics::{param_cosine, param_l2, MetricRecord, ParamSnapshot};
use crate::numerics::Scalar;
use crate::persist::{
    append_metrics_csv, load_checkpoint, load_state, read_metrics_csv, save_state,
};

pub const CHECK_MODE_ENV: &str = "MEDA_CHECK_MODE";

#[derive(Debug, Parser)]
#[command(
    name = "meda",
    version,
    about = "Multi-epoch CTR training with embedding re-initialization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Write the configured synthetic log as TSV.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train per config; writes metrics.csv, checkpoint/ and config.toml.
    Train(TrainArgs),
    /// Score a checkpoint on the configured test set.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bank to evaluate with; defaults to the last trained bank.
        #[arg(long)]
        bank: Option<usize>,
    },
    /// Cosine similarity and L2 distance between two checkpoints.
    DiffParams {
        a: PathBuf,
        b: PathBuf,
        /// `mlp` or `bank:<r>`.
        #[arg(long, default_value = "mlp")]
        source: String,
    },
    /// Per-run best and final AUC with deltas against single-epoch training.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, required_unless_present = "grid")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Continue from a checkpoint written by an earlier invocation.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop after this many training passes (the run can be resumed).
    #[arg(long)]
    pub stop_after: Option<usize>,
    /// Run each config in its own process, with output under `<out>/<stem>`.
    #[arg(long, num_args = 1.., conflicts_with_all = ["config", "resume", "stop_after"])]
    pub grid: Vec<PathBuf>,
}

/// Parses `args` and runs; returns the process exit code.
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn check_mode() -> bool {
    std::env::var(CHECK_MODE_ENV).is_ok_and(|v| v == "1")
}

fn dispatch(cmd: Cmd) -> Result<i32> {
    match cmd {
        Cmd::Generate { config, out } => {
            let cfg = match config {
                Some(p) => ExperimentConfig::load(&p)?,
                None => ExperimentConfig::default(),
            };
            cfg.validate()?;
            cmd_generate(&cfg, &out)?;
            Ok(0)
        }
        Cmd::Train(args) if !args.grid.is_empty() => cmd_grid(&args),
        Cmd::Train(args) => {
            let mut cfg = ExperimentConfig::load(args.config.as_deref().expect("clap"))?;
            if let Some(s) = args.seed {
                cfg.run.base_seed = s;
            }
            if let Some(k) = args.k {
                cfg.run.k = k;
            }
            if let Some(o) = &args.out {
                cfg.run.output_dir = o.clone();
            }
            let out = if check_mode() {
                cmd_train::<f64>(&cfg, args.resume.as_deref(), args.stop_after)?
            } else {
                cmd_train::<f32>(&cfg, args.resume.as_deref(), args.stop_after)?
            };
            print!("{}", summary_table(&out));
            Ok(0)
        }
        Cmd::Eval {
            config,
            checkpoint,
            bank,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let (auc, ll) = if check_mode() {
                cmd_eval::<f64>(&cfg, &checkpoint, bank)?
            } else {
                cmd_eval::<f32>(&cfg, &checkpoint, bank)?
            };
            println!("test_auc\t{auc:.6}\ntest_logloss\t{ll:.6}");
            Ok(0)
        }
        Cmd::DiffParams { a, b, source } => {
            let (cos, l2) = if check_mode() {
                cmd_diff_params::<f64>(&a, &b, &source)?
            } else {
                cmd_diff_params::<f32>(&a, &b, &source)?
            };
            println!("cosine\t{cos:.6}\nl2\t{l2:.6}");
            Ok(0)
        }
        Cmd::Report { csv } => {
            print!("{}", cmd_report(&csv)?);
            Ok(0)
        }
    }
}

pub fn cmd_generate(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let ds = cfg.load_log()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_log_tsv(out, &ds)?;
    eprintln!(
        "wrote {} samples (positive rate {:.4}) to {}",
        ds.len(),
        ds.positive_rate(),
        out.display()
    );
    Ok(())
}

/// Runs a config end to end and returns every metric row of the run.
pub fn cmd_train<S: Scalar>(
    cfg: &ExperimentConfig,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<Vec<MetricRecord>> {
    cfg.validate()?;
    let tc = cfg.train_config();
    let out_dir = cfg.run.output_dir.clone();
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let echo = cfg.to_toml()?;
    let echo_path = out_dir.join("config.toml");
    std::fs::write(&echo_path, &echo).map_err(|e| Error::io(&echo_path, e))?;
    // The checkpoint copy omits the output directory so that identical runs
    // written to different places produce identical checkpoints.
    let mut located_nowhere = cfg.clone();
    located_nowhere.run.output_dir = PathBuf::new();
    let echo_json = serde_json::to_value(&located_nowhere)
        .map_err(|e| Error::Config(format!("config serialization: {e}")))?;

    let data = cfg.prepare_data()?;
    let inputs = RunInputs {
        train: &data.train,
        parts: &data.parts,
        test: &data.test,
    };
    let registry = MethodRegistry::builtin();
    let method = registry.get(&cfg.run.method)?;
    let plan = method.plan(&cfg.method_params()?)?;

    let csv_path = out_dir.join("metrics.csv");
    let run_id = tc.run_id.clone();
    let (mut state, mut records) = match resume {
        Some(ck) => {
            let state = load_state::<S>(ck, &tc, &plan.method)?;
            let done = plan.steps[..state.cursor.min(plan.steps.len())]
                .iter()
                .filter(|s| matches!(s, Step::Train { .. }))
                .count();
            let previous: Vec<MetricRecord> = if csv_path.exists() {
                read_metrics_csv(&csv_path)?
                    .into_iter()
                    .filter(|r| r.run_id == run_id)
                    .collect()
            } else {
                Vec::new()
            };
            if previous.len() < done {
                return Err(Error::Data(format!(
                    "{} holds {} rows for run {run_id:?} but the checkpoint is after {done} passes",
                    csv_path.display(),
                    previous.len()
                )));
            }
            (state, previous[..done].to_vec())
        }
        None => (TrainingState::<S>::new(&tc), Vec::new()),
    };

    let train_positions: Vec<usize> = plan
        .steps
        .iter()
        .enumerate()
        .filter(|(_, s)| matches!(s, Step::Train { .. }))
        .map(|(i, _)| i + 1)
        .collect();
    let start = state.cursor;
    for (done, &end) in train_positions.iter().filter(|&&e| e > start).enumerate() {
        if stop_after.is_some_and(|n| done >= n) {
            break;
        }
        records.extend(execute(&tc, &plan, &inputs, &mut state, Some(end))?);
        if cfg.run.checkpoint_every_pass {
            let p = out_dir
                .join("checkpoints")
                .join(format!("pass_{:03}", records.len()));
            save_state(&p, &tc, &plan.method, &state, Some(echo_json.clone()))?;
        }
    }
    if stop_after.is_none() {
        records.extend(execute(&tc, &plan, &inputs, &mut state, None)?);
    }

    append_metrics_csv(&csv_path, &records)?;
    let report = save_state(
        &out_dir.join("checkpoint"),
        &tc,
        &plan.method,
        &state,
        Some(echo_json),
    )?;
    let report_path = out_dir.join("storage.tsv");
    std::fs::write(&report_path, report.render()).map_err(|e| Error::io(&report_path, e))?;
    Ok(records)
}

pub fn summary_table(records: &[MetricRecord]) -> String {
    let mut out = String::from("dataset\tepoch\tbank\ttest_auc\tdelta_vs_first\n");
    let Some(first) = records.first() else {
        return out;
    };
    for r in records {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{:.6}\t{:+.6}",
            r.dataset_index,
            r.epoch,
            r.bank_id,
            r.test_auc,
            r.test_auc - first.test_auc
        );
    }
    if let Some((i, best)) = best_auc(records) {
        let _ = writeln!(
            out,
            "best pass {} (dataset {}, epoch {}) auc {:.6}",
            i + 1,
            records[i].dataset_index,
            records[i].epoch,
            best
        );
    }
    out
}

fn best_auc(records: &[MetricRecord]) -> Option<(usize, f64)> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| !r.test_auc.is_nan())
        .fold(None, |acc, (i, r)| match acc {
            Some((_, b)) if b >= r.test_auc => acc,
            _ => Some((i, r.test_auc)),
        })
}

pub fn cmd_eval<S: Scalar>(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    bank: Option<usize>,
) -> Result<(f64, f64)> {
    cfg.validate()?;
    let ck = load_checkpoint::<S>(checkpoint)?;
    let id = bank
        .or(ck.meta.last_bank)
        .ok_or_else(|| Error::Config("checkpoint has no trained bank; pass --bank".into()))?;
    let b = ck
        .banks
        .get(&id)
        .ok_or_else(|| Error::Config(format!("checkpoint has no bank {id}")))?;
    let data = cfg.prepare_data()?;
    let mut tc = cfg.train_config();
    tc.model = ck.model.clone();
    evaluate(&tc, &ck.mlp, b, &data.test)
}

pub fn cmd_diff_params<S: Scalar>(a: &Path, b: &Path, source: &str) -> Result<(f64, f64)> {
    let ca = load_checkpoint::<S>(a)?;
    let cb = load_checkpoint::<S>(b)?;
    let (sa, sb) = if source == "mlp" {
        (
            ParamSnapshot::from_mlp(&ca.mlp),
            ParamSnapshot::from_mlp(&cb.mlp),
        )
    } else {
        let r: usize = source
            .strip_prefix("bank:")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                Error::Config(format!("--source must be mlp or bank:<r>, got {source:?}"))
            })?;
        let get = |c: &crate::persist::Checkpoint<S>, p: &Path| {
            c.banks
                .get(&r)
                .map(ParamSnapshot::from_bank)
                .ok_or_else(|| Error::Config(format!("{} has no bank {r}", p.display())))
        };
        (get(&ca, a)?, get(&cb, b)?)
    };
    Ok((param_cosine(&sa, &sb)?, param_l2(&sa, &sb)?))
}

/// One summary row per run, sorted by variant then run id. The single-epoch
/// reference is the first pass of a `direct` run when one is present, and
/// otherwise each run's own first pass.
pub fn cmd_report(paths: &[PathBuf]) -> Result<String> {
    let mut runs: BTreeMap<(String, String), Vec<MetricRecord>> = BTreeMap::new();
    for p in paths {
        for r in read_metrics_csv(p).map_err(|e| match e {
            Error::Io { .. } => e,
            Error::Format(m) => Error::Format(m),
            other => Error::Format(other.to_string()),
        })? {
            runs.entry((r.variant.clone(), r.run_id.clone()))
                .or_default()
                .push(r);
        }
    }
    if runs.is_empty() {
        return Err(Error::Format("no metric rows found".into()));
    }
    let reference = runs
        .iter()
        .find(|((v, _), _)| v == "direct")
        .and_then(|(_, rs)| rs.first().map(|r| r.test_auc));
    let mut out = String::from(
        "variant\trun_id\tpasses\tbest_auc\tfinal_auc\tsingle_epoch_auc\tdelta_best\tdelta_final\n",
    );
    for ((variant, run_id), rs) in &runs {
        let single = reference.unwrap_or(rs[0].test_auc);
        let best = best_auc(rs).map_or(f64::NAN, |(_, b)| b);
        let last = rs[rs.len() - 1].test_auc;
        let _ = writeln!(
            out,
            "{variant}\t{run_id}\t{}\t{best:.6}\t{last:.6}\t{single:.6}\t{:+.6}\t{:+.6}",
            rs.len(),
            best - single,
            last - single
        );
    }
    Ok(out)
}

fn cmd_grid(args: &TrainArgs) -> Result<i32> {
    let exe = std::env::current_exe().map_err(|e| Error::io("current executable", e))?;
    let base = args.out.clone().unwrap_or_else(|| PathBuf::from("grid"));
    let mut children = Vec::new();
    for cfg in &args.grid {
        let stem = cfg
            .file_stem()
            .ok_or_else(|| Error::Config(format!("grid config {} has no name", cfg.display())))?;
        let mut cmd = Command::new(&exe);
        cmd.arg("train")
            .arg("--config")
            .arg(cfg)
            .arg("--out")
            .arg(base.join(stem));
        if let Some(s) = args.seed {
            cmd.arg("--seed").arg(s.to_string());
        }
        if let Some(k) = args.k {
            cmd.arg("--k").arg(k.to_string());
        }
        let child = cmd.spawn().map_err(|e| Error::io(&exe, e))?;
        children.push((cfg.clone(), child));
    }
    let mut worst = 0;
    for (cfg, mut child) in children {
        let status = child.wait().map_err(|e| Error::io(&exe, e))?;
        let code = status.code().unwrap_or(1);
        if code != 0 {
            eprintln!("{}: exited with {code}", cfg.display());
            worst = worst.max(code);
        }
    }
    Ok(worst)
}
