//! `emp` command line: train, eval, gradcheck, ablate, export-embeddings.
//!
//! Exit codes: 0 success, 1 runtime failure (including a failed gradient
//! check), 2 bad arguments or configuration, 3 aborted on a non-finite value.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use thiserror::Error;

use crate::config::{parse_config, ConfigError, Protocol, RunConfig};
use crate::data::{DataError, LabeledDataset, NormStats};
use crate::encoder::{Encoder, EncoderConfig, EncoderError};
use crate::eval::{
    effective_rank, extract_features, knn_eval, linear_probe, transfer_eval, EvalError, EvalResult, FeatureTable,
    ProbeResult, Provenance, Split,
};
use crate::nn::CheckpointError;
use crate::trainer::{emp_grad_check, train, TrainError, TrainOptions};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint {path}: {source}")]
    Checkpoint {
        path: String,
        #[source]
        source: CheckpointError,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("gradient check failed: max relative error {max_rel:.3e} > {tolerance:.0e}")]
    GradCheckFailed { max_rel: f64, tolerance: f64 },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 2,
            CliError::Train(e) if e.is_non_finite() => 3,
            CliError::Train(TrainError::Config(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "emp", about = "Multi-patch self-supervised training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Reproducible run: zero wall-clock column, identical outputs per seed.
    #[arg(long)]
    deterministic: bool,
    /// Parent directory of the run directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an encoder.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// probe, knn or transfer.
        #[arg(long)]
        protocol: Protocol,
        /// Name of an `eval.targets` entry; required for transfer.
        #[arg(long)]
        target_dataset: Option<String>,
    },
    /// Compare analytic and finite-difference gradients of the objective.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train and probe over a grid of patch counts and batch sizes.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated patch counts.
        #[arg(long, value_delimiter = ',')]
        n: Vec<usize>,
        /// Comma-separated batch sizes.
        #[arg(long, value_delimiter = ',')]
        batch: Vec<usize>,
    },
    /// Write bag-of-features embeddings of a split to CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Output file; defaults to `embeddings.csv` in the run directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Creates `parent/name`, or `name-1`, `name-2`, ... if taken.
pub fn create_run_dir(parent: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(parent).map_err(io_err(parent))?;
    for i in 0.. {
        let dir = if i == 0 {
            parent.join(name)
        } else {
            parent.join(format!("{name}-{i}"))
        };
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
    unreachable!()
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = parse_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if common.deterministic {
        cfg.deterministic = true;
        cfg.train.deterministic = true;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

/// Loaded data plus the fully resolved configuration.
pub struct Prepared {
    pub cfg: RunConfig,
    pub encoder: EncoderConfig,
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub norm: NormStats,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (train, test) = cfg.dataset.load()?;
    let norm = cfg.dataset.norm_for(&train);
    let cfg = cfg.resolved(norm)?;
    Ok(Prepared {
        encoder: cfg.encoder.resolve()?,
        cfg,
        train,
        test,
        norm,
    })
}

fn start_run(cfg: &RunConfig, name: &str) -> Result<(Prepared, PathBuf)> {
    let prep = prepare(cfg)?;
    let dir = create_run_dir(&prep.cfg.out_dir, name)?;
    let path = dir.join("config.toml");
    std::fs::write(&path, prep.cfg.to_toml()).map_err(io_err(&path))?;
    Ok((prep, dir))
}

fn load_encoder(prep: &Prepared, checkpoint: &Path) -> Result<Encoder> {
    let mut enc = Encoder::build(&prep.encoder, prep.cfg.eval_patches().out, 0)?;
    enc.network_mut()
        .load_checkpoint(checkpoint)
        .map_err(|source| CliError::Checkpoint {
            path: checkpoint.display().to_string(),
            source,
        })?;
    Ok(enc)
}

/// Bag-of-features tables for the train and test splits of `prep`.
pub fn feature_tables(prep: &Prepared, enc: &Encoder, checkpoint: &str) -> Result<(FeatureTable, FeatureTable)> {
    let geom = prep.cfg.eval_patches();
    let seed = prep.cfg.eval.seed;
    let prov = |split: &str| Provenance {
        checkpoint: checkpoint.to_string(),
        dataset: format!("{:?}/{split}", prep.cfg.dataset.kind).to_lowercase(),
        m_eval: geom.m_eval,
        seed,
    };
    let train = extract_features(enc, &prep.train, geom, &prep.norm, seed, prov("train"))?;
    let test = extract_features(enc, &prep.test, geom, &prep.norm, seed ^ 0x7e57, prov("test"))?;
    Ok((train, test))
}

/// Linear probe of a frozen encoder on the configured dataset.
pub fn probe_encoder(prep: &Prepared, enc: &Encoder) -> Result<ProbeResult> {
    let (train, test) = feature_tables(prep, enc, "")?;
    Ok(linear_probe(&train, &test, &prep.cfg.eval.probe)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    std::fs::write(path, text + "\n").map_err(io_err(path))
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (prep, dir) = start_run(cfg, "train")?;
    let opts = TrainOptions {
        out_dir: Some(dir.clone()),
        sidecar: Some(prep.cfg.to_toml()),
        record_projections: false,
    };
    let outcome = train(&prep.cfg.train, &prep.train, &prep.encoder, prep.norm, &opts)?;
    if let Some(last) = outcome.metrics.last() {
        println!(
            "step {} loss {:.6} tcr {:.6} inv {:.6} rank {:.3}",
            last.step, last.total_loss, last.tcr_term, last.invariance_term, last.effective_rank
        );
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, protocol: Protocol, target: Option<&str>) -> Result<()> {
    let (prep, dir) = start_run(cfg, "eval")?;
    let enc = load_encoder(&prep, checkpoint)?;
    let ckpt = checkpoint.display().to_string();
    let e = &prep.cfg.eval;
    let dataset = format!("{:?}", prep.cfg.dataset.kind).to_lowercase();
    let (dataset, accuracy, params) = match protocol {
        Protocol::Probe => {
            let (train, test) = feature_tables(&prep, &enc, &ckpt)?;
            let r = linear_probe(&train, &test, &e.probe)?;
            let params = serde_json::json!({
                "probe": e.probe,
                "m_eval": e.m_eval,
                "train_accuracy": r.train_accuracy,
            });
            (dataset, r.test_accuracy, params)
        }
        Protocol::Knn => {
            let (train, test) = feature_tables(&prep, &enc, &ckpt)?;
            let acc = knn_eval(&train, &test, e.k)?;
            (dataset, acc, serde_json::json!({ "k": e.k, "m_eval": e.m_eval }))
        }
        Protocol::Transfer => {
            let name = target.ok_or_else(|| CliError::Usage("transfer needs --target-dataset".into()))?;
            let target_cfg = e
                .targets
                .get(name)
                .ok_or_else(|| CliError::Usage(format!("no eval.targets entry named {name:?}")))?;
            let (t_train, t_test) = target_cfg.load()?;
            let source = Split {
                name: dataset.clone(),
                train: &prep.train,
                test: &prep.test,
            };
            let target_split = Split {
                name: name.to_string(),
                train: &t_train,
                test: &t_test,
            };
            let r = transfer_eval(&enc, &source, &target_split, prep.cfg.eval_patches(), &prep.norm, e.seed, &e.probe)?;
            let params = serde_json::json!({
                "probe": e.probe,
                "m_eval": e.m_eval,
                "source": dataset,
                "in_domain": r.in_domain,
            });
            (name.to_string(), r.out_of_domain, params)
        }
    };
    let result = EvalResult {
        dataset,
        checkpoint: ckpt,
        protocol: protocol.to_string(),
        accuracy,
        k_or_probe_params: params,
        seed: prep.cfg.seed,
    };
    write_json(&dir.join("eval.json"), &result)?;
    println!("{} {} accuracy {:.4}", result.protocol, result.dataset, result.accuracy);
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let enc = cfg.encoder.resolve()?;
    let g = &cfg.gradcheck;
    let report = emp_grad_check(&enc, &cfg.train.loss, g)?;
    print!("{}", report.render());
    let max_rel = report.max_rel_error();
    println!("max relative error {max_rel:.3e} (tolerance {:.0e})", g.tolerance);
    if !(max_rel <= g.tolerance) {
        return Err(CliError::GradCheckFailed {
            max_rel,
            tolerance: g.tolerance,
        });
    }
    Ok(())
}

/// One training run of an ablation grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRun {
    pub cell: usize,
    pub n_patches: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub probe_accuracy: f64,
    pub final_rank: f64,
}

/// Trains and probes every `(batch, n, seed)` combination. Cells are
/// numbered batch-major. With `dir`, each run's metrics and checkpoints go
/// to `dir/cell_{c}_seed_{s}`. `on_run` sees each run as it finishes.
pub fn run_ablation(
    prep: &Prepared,
    ns: &[usize],
    batches: &[usize],
    seeds: &[u64],
    dir: Option<&Path>,
    mut on_run: impl FnMut(&AblationRun),
) -> Result<Vec<AblationRun>> {
    let mut runs = Vec::new();
    let mut cell = 0;
    for &batch_size in batches {
        for &n_patches in ns {
            for &seed in seeds {
                let mut tc = prep.cfg.train.clone();
                tc.n_patches = n_patches;
                tc.batch_size = batch_size;
                tc.seed = seed;
                if let Some(steps) = prep.cfg.ablate.steps {
                    tc.steps = Some(steps);
                }
                tc.validate().map_err(TrainError::Config)?;
                let opts = TrainOptions {
                    out_dir: dir.map(|d| d.join(format!("cell_{cell}_seed_{seed}"))),
                    sidecar: None,
                    record_projections: false,
                };
                let outcome = train(&tc, &prep.train, &prep.encoder, prep.norm, &opts)?;
                let probe = probe_encoder(prep, &outcome.encoder)?;
                let run = AblationRun {
                    cell,
                    n_patches,
                    batch_size,
                    seed,
                    probe_accuracy: probe.test_accuracy,
                    final_rank: outcome.metrics.last().map_or(f64::NAN, |m| m.effective_rank),
                };
                on_run(&run);
                runs.push(run);
            }
            cell += 1;
        }
    }
    Ok(runs)
}

/// Seed-averaged accuracy per cell, in cell order.
pub fn summarize_ablation(runs: &[AblationRun]) -> Vec<(usize, usize, usize, f64)> {
    let mut out: Vec<(usize, usize, usize, f64)> = Vec::new();
    let mut counts: Vec<usize> = Vec::new();
    for r in runs {
        match out.last_mut() {
            Some(last) if last.0 == r.cell => {
                last.3 += r.probe_accuracy;
                *counts.last_mut().expect("paired") += 1;
            }
            _ => {
                out.push((r.cell, r.n_patches, r.batch_size, r.probe_accuracy));
                counts.push(1);
            }
        }
    }
    for (row, c) in out.iter_mut().zip(counts) {
        row.3 /= c as f64;
    }
    out
}

fn cmd_ablate(cfg: &RunConfig, ns: &[usize], batches: &[usize]) -> Result<()> {
    let (prep, dir) = start_run(cfg, "ablate")?;
    let pick = |cli: &[usize], conf: &[usize], fallback: usize| -> Vec<usize> {
        if !cli.is_empty() {
            cli.to_vec()
        } else if !conf.is_empty() {
            conf.to_vec()
        } else {
            vec![fallback]
        }
    };
    let ns = pick(ns, &prep.cfg.ablate.n, prep.cfg.train.n_patches);
    let batches = pick(batches, &prep.cfg.ablate.batch, prep.cfg.train.batch_size);
    if let Some(&n) = ns.iter().find(|&&n| n < 2) {
        return Err(CliError::Usage(format!("--n: patch counts must be >= 2, got {n}")));
    }
    if let Some(&b) = batches.iter().find(|&&b| b < 2) {
        return Err(CliError::Usage(format!("--batch: batch sizes must be >= 2, got {b}")));
    }
    let seeds = if prep.cfg.ablate.seeds.is_empty() {
        vec![prep.cfg.seed]
    } else {
        prep.cfg.ablate.seeds.clone()
    };
    let runs = run_ablation(&prep, &ns, &batches, &seeds, Some(&dir), |r| {
        println!(
            "n={} b={} seed {}: probe accuracy {:.4}, final rank {:.2}",
            r.n_patches, r.batch_size, r.seed, r.probe_accuracy, r.final_rank
        )
    })?;

    let path = dir.join("runs.csv");
    let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
    writeln!(f, "cell,n_patches,batch_size,seed,probe_accuracy,final_rank").map_err(io_err(&path))?;
    for r in &runs {
        writeln!(
            f,
            "{},{},{},{},{:.6},{:.6}",
            r.cell, r.n_patches, r.batch_size, r.seed, r.probe_accuracy, r.final_rank
        )
        .map_err(io_err(&path))?;
    }
    let path = dir.join("summary.csv");
    let mut f = std::fs::File::create(&path).map_err(io_err(&path))?;
    writeln!(f, "cell,n_patches,batch_size,probe_accuracy").map_err(io_err(&path))?;
    for (cell, n, b, acc) in summarize_ablation(&runs) {
        writeln!(f, "{cell},{n},{b},{acc:.6}").map_err(io_err(&path))?;
        println!("cell {cell}: n={n} b={b} probe accuracy {acc:.4}");
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

fn cmd_export(cfg: &RunConfig, checkpoint: &Path, split: &str, output: Option<&Path>) -> Result<()> {
    let (prep, dir) = start_run(cfg, "export")?;
    let enc = load_encoder(&prep, checkpoint)?;
    let (train, test) = feature_tables(&prep, &enc, &checkpoint.display().to_string())?;
    let table = match split {
        "train" => train,
        "test" => test,
        other => return Err(CliError::Usage(format!("--split must be train or test, got {other:?}"))),
    };
    let path = output.map_or_else(|| dir.join("embeddings.csv"), Path::to_path_buf);
    crate::eval::export_embeddings(&table, &path)?;
    println!(
        "{} rows x {} features, effective rank {:.3} -> {}",
        table.len(),
        table.dim(),
        effective_rank(table.vectors())?,
        path.display()
    );
    Ok(())
}

fn set_threads() {
    if let Some(n) = std::env::var("EMP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // fails only if the pool was already built, which is harmless
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train { common } => cmd_train(&load_config(&common)?),
        Command::Eval {
            common,
            checkpoint,
            protocol,
            target_dataset,
        } => cmd_eval(&load_config(&common)?, &checkpoint, protocol, target_dataset.as_deref()),
        Command::Gradcheck { common } => cmd_gradcheck(&load_config(&common)?),
        Command::Ablate { common, n, batch } => cmd_ablate(&load_config(&common)?, &n, &batch),
        Command::ExportEmbeddings {
            common,
            checkpoint,
            split,
            output,
        } => cmd_export(&load_config(&common)?, &checkpoint, &split, output.as_deref()),
    }
}

/// Runs one command; `argv[0]` is the program name. Returns the exit code.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    set_threads();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn run_dirs_get_suffixes() {
        let tmp = tempfile::tempdir().unwrap();
        let a = create_run_dir(tmp.path(), "train").unwrap();
        let b = create_run_dir(tmp.path(), "train").unwrap();
        let c = create_run_dir(tmp.path(), "train").unwrap();
        assert_eq!(a.file_name().unwrap(), "train");
        assert_eq!(b.file_name().unwrap(), "train-1");
        assert_eq!(c.file_name().unwrap(), "train-2");
    }

    #[test]
    fn summary_averages_seeds() {
        let run = |cell, seed, acc| AblationRun {
            cell,
            n_patches: 2 + cell,
            batch_size: 8,
            seed,
            probe_accuracy: acc,
            final_rank: 1.0,
        };
        let s = summarize_ablation(&[run(0, 1, 0.5), run(0, 2, 0.7), run(1, 1, 0.9)]);
        assert_eq!(s.len(), 2);
        assert!((s[0].3 - 0.6).abs() < 1e-12);
        assert_eq!((s[1].0, s[1].1, s[1].3), (1, 3, 0.9));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run_command(["emp", "frobnicate"]), 2);
        assert_eq!(run_command(["emp", "train", "--config", "/nonexistent/cfg.toml"]), 2);
        assert_eq!(run_command(["emp", "--help"]), 0);
    }
}
