//! `ppgnet`: synthesize, prepare, train, cross-validate, transfer, evaluate,
//! verify gradients and inspect models from the command line.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or I/O
//! error, 3 gradient verification failure.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use ppgnet::autograd::suite::primitive_suite;
use ppgnet::dataio::{load_recording, load_windowed, read_weights, save_recording, save_weights, save_windowed, WindowedDataset};
use ppgnet::metrics::{EvalReport, ReportMeta};
use ppgnet::model::{network_grad_check, Block, ModelConfig, PpgNet};
use ppgnet::prepare::prepare_all;
use ppgnet::synth::{synth_cohort_with, CohortStyle};
use ppgnet::trainer::{
    cross_validate, evaluate, run_condition, train, write_history, Condition, ConditionSetup, FoldPlan, Init, Scheme,
};

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "ppgnet", version, about = "Heart rate from wrist PPG with a CNN + LSTM network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration ([model], [train], [prepare], [paths]).
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one configuration field, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set train.epochs=N`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Shorthand for `--set train.learning_rate=X`.
    #[arg(long)]
    lr: Option<f64>,
    /// Shorthand for `--set train.batch_size=N`.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Shorthand for setting both `train.seed` and `model.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(e) = self.epochs {
            overrides.push(format!("train.epochs={e}"));
        }
        if let Some(lr) = self.lr {
            overrides.push(format!("train.learning_rate={lr:?}"));
        }
        if let Some(b) = self.batch_size {
            overrides.push(format!("train.batch_size={b}"));
        }
        if let Some(s) = self.seed {
            overrides.push(format!("train.seed={s}"));
            overrides.push(format!("model.seed={s}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides).map_err(|e| usage(format!("{e:#}")))
    }

    /// Whether the epoch count was given explicitly (flag, override or file).
    fn sets_epochs(&self) -> Result<bool> {
        if self.epochs.is_some() || self.overrides.iter().any(|o| o.trim_start().starts_with("train.epochs")) {
            return Ok(true);
        }
        let Some(path) = &self.config else { return Ok(false) };
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let table: toml::Table = text.parse().map_err(|e| usage(format!("{e}")))?;
        Ok(table
            .get("train")
            .and_then(|t| t.as_table())
            .is_some_and(|t| t.contains_key("epochs")))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort of paired PPG/ECG recordings.
    Synth {
        /// Output directory for manifests and signal files.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 10)]
        subjects: usize,
        /// Recording length in seconds.
        #[arg(long, default_value_t = 300.0)]
        duration: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Standard deviation of additive PPG noise.
        #[arg(long, default_value_t = CohortStyle::default().noise_sigma)]
        noise: f64,
        /// Amplitude of the motion-artifact bursts.
        #[arg(long, default_value_t = CohortStyle::default().artifact_level)]
        artifact: f64,
    },
    /// Turn recordings into a labelled, normalized windowed dataset.
    Prepare {
        /// Manifest files, directories of manifests, or glob patterns.
        #[arg(required = true)]
        inputs: Vec<String>,
        /// Output dataset file.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Train one network on a whole dataset.
    Train {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output weights file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch loss CSV.
        #[arg(long)]
        history: Option<PathBuf>,
        /// Start from these weights instead of a random initialization.
        #[arg(long)]
        init: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Cross-validate: one fresh network per fold.
    Cv {
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// loso, kfold:K (subject-disjoint) or kfold-windows:K.
        #[arg(long, default_value = "kfold:5")]
        scheme: String,
        /// Report directory; also receives per-fold histories and weights.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Folds trained concurrently. Results do not depend on it.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run a transfer-learning condition (1–4) on a target dataset.
    Transfer {
        /// Source-trained weights (required for conditions 2–4).
        #[arg(long)]
        source_weights: Option<PathBuf>,
        /// Target dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=4))]
        condition: u8,
        /// Fold scheme of conditions 1 and 3.
        #[arg(long, default_value = "kfold:5")]
        scheme: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Score a weights file on a dataset.
    Eval {
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Check every differentiable primitive and the whole network against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampled coordinates per network tensor.
        #[arg(long, default_value_t = 8)]
        coords: usize,
    },
    /// Per-block parameter counts and layer shapes.
    Info {
        /// Inspect a weights file.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Also print the resolved configuration with every default filled in.
        #[arg(long)]
        show_config: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

/// Errors that map to exit codes other than the generic data error.
#[derive(Debug, thiserror::Error)]
enum Failure {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Verification(String),
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Failure::Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<Failure>() {
                Some(Failure::Usage(_)) => ExitCode::from(1),
                Some(Failure::Verification(_)) => ExitCode::from(3),
                None => ExitCode::from(2),
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth {
            out,
            subjects,
            duration,
            seed,
            noise,
            artifact,
        } => cmd_synth(&out, subjects, duration, seed, noise, artifact),
        Command::Prepare { inputs, out, config } => cmd_prepare(&inputs, &out, &config.load()?),
        Command::Train {
            dataset,
            out,
            history,
            init,
            config,
        } => {
            let cfg = config.load()?;
            let dataset = required(dataset, &cfg.paths.dataset, "--dataset")?;
            let out = required(out, &cfg.paths.weights, "--out")?;
            cmd_train(&dataset, &out, history.as_deref(), init.as_deref(), &cfg)
        }
        Command::Cv {
            dataset,
            scheme,
            out,
            jobs,
            config,
        } => {
            let cfg = config.load()?;
            let dataset = required(dataset, &cfg.paths.dataset, "--dataset")?;
            let out = required(out, &cfg.paths.out, "--out")?;
            cmd_cv(&dataset, parse_scheme(&scheme)?, &out, jobs, &cfg)
        }
        Command::Transfer {
            source_weights,
            dataset,
            condition,
            scheme,
            out,
            jobs,
            config,
        } => {
            let condition = Condition::from_number(condition).map_err(|e| usage(e.to_string()))?;
            let mut cfg = config.load()?;
            if !config.sets_epochs()? {
                if let Some(e) = condition.default_epochs() {
                    cfg.train.epochs = e;
                }
            }
            let dataset = required(dataset, &cfg.paths.dataset, "--dataset")?;
            let out = required(out, &cfg.paths.out, "--out")?;
            let weights = source_weights.or_else(|| cfg.paths.weights.clone());
            cmd_transfer(condition, weights.as_deref(), &dataset, parse_scheme(&scheme)?, &out, jobs, &cfg)
        }
        Command::Eval {
            weights,
            dataset,
            out,
            config,
        } => {
            let cfg = config.load()?;
            let weights = required(weights, &cfg.paths.weights, "--weights")?;
            let dataset = required(dataset, &cfg.paths.dataset, "--dataset")?;
            let out = required(out, &cfg.paths.out, "--out")?;
            cmd_eval(&weights, &dataset, &out, &cfg)
        }
        Command::Gradcheck { seed, coords } => cmd_gradcheck(seed, coords),
        Command::Info {
            weights,
            show_config,
            config,
        } => {
            let cfg = config.load()?;
            cmd_info(weights.as_deref(), &cfg)?;
            if show_config {
                println!("\n{}", cfg.to_toml()?);
            }
            Ok(())
        }
    }
}

fn required(arg: Option<PathBuf>, from_config: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    arg.or_else(|| from_config.clone())
        .ok_or_else(|| usage(format!("{flag} is required (or set it under [paths])")))
}

fn parse_scheme(s: &str) -> Result<Scheme> {
    match s.parse() {
        Ok(Scheme::Holdout) => Err(usage("holdout is not a cross-validation scheme")),
        Ok(s) => Ok(s),
        Err(e) => Err(usage(e.to_string())),
    }
}

/// Refuses to write over a file the command reads.
fn ensure_distinct(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| std::fs::canonicalize(p).ok();
    if let Some(o) = canon(out) {
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&o)) {
            bail!(usage(format!("output {} would overwrite an input", out.display())));
        }
    }
    Ok(())
}

fn cmd_synth(out: &Path, subjects: usize, duration: f64, seed: u64, noise: f64, artifact: f64) -> Result<()> {
    if subjects == 0 || !(duration > 8.0) || !(noise >= 0.0) || !(artifact >= 0.0) {
        bail!(usage("need at least one subject, a duration above 8 s, and non-negative noise and artifact levels"));
    }
    let style = CohortStyle {
        noise_sigma: noise,
        artifact_level: artifact,
        ..CohortStyle::default()
    };
    let cohort = synth_cohort_with(subjects, duration, seed, &style)?;
    for rec in &cohort {
        let path = save_recording(rec, out)?;
        info!("wrote {}", path.display());
    }
    println!("synthesized {subjects} recordings of {duration} s into {}", out.display());
    Ok(())
}

/// Expands files, directories (their `*.toml` files) and glob patterns.
fn manifest_paths(inputs: &[String]) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for input in inputs {
        let p = Path::new(input);
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("cannot list {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e == "toml"))
                .collect();
            found.sort();
            paths.extend(found);
        } else if p.exists() {
            paths.push(p.to_path_buf());
        } else {
            let matches = glob::glob(input).map_err(|e| usage(format!("bad pattern {input:?}: {e}")))?;
            let mut found = matches.collect::<Result<Vec<_>, _>>()?;
            if found.is_empty() {
                bail!("no manifest matches {input:?}");
            }
            found.sort();
            paths.extend(found);
        }
    }
    paths.dedup();
    Ok(paths)
}

fn cmd_prepare(inputs: &[String], out: &Path, cfg: &RunConfig) -> Result<()> {
    let manifests = manifest_paths(inputs)?;
    let refs: Vec<&Path> = manifests.iter().map(PathBuf::as_path).collect();
    ensure_distinct(out, &refs)?;
    let recordings = manifests
        .iter()
        .map(|p| load_recording(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    let (dataset, counts) = prepare_all(&recordings, &cfg.prepare)?;
    if dataset.is_empty() {
        warn!("no windows were produced");
    }
    save_windowed(&dataset, out)?;
    println!(
        "{} recordings: {} windows segmented, {} kept, {} dropped ({} without a label, {} outside the label band)",
        recordings.len(),
        counts.segmented,
        counts.kept,
        counts.dropped(),
        counts.dropped_unlabelled,
        counts.dropped_out_of_band
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn load_dataset(path: &Path) -> Result<WindowedDataset> {
    load_windowed(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn model_from(cfg: &ModelConfig, weights: Option<&Path>) -> Result<PpgNet> {
    let mut model = PpgNet::build(cfg.clone())?;
    if let Some(w) = weights {
        read_weights(w)?
            .apply_to(&mut model)
            .with_context(|| format!("applying weights {}", w.display()))?;
    }
    Ok(model)
}

fn cmd_train(dataset: &Path, out: &Path, history: Option<&Path>, init: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let mut inputs = vec![dataset];
    inputs.extend(init);
    ensure_distinct(out, &inputs)?;
    let data = load_dataset(dataset)?;
    let mut model = model_from(&cfg.model, init)?;
    let losses = train(&mut model, &data, &cfg.train)?;
    save_weights(&model, out)?;
    if let Some(h) = history {
        write_history(h, &losses)?;
    }
    println!(
        "trained {} epochs on {} windows; final mean loss {:.4}; wrote {}",
        cfg.train.epochs,
        data.len(),
        losses.last().copied().unwrap_or(f64::NAN),
        out.display()
    );
    Ok(())
}

/// Report plus per-fold histories and weights into `out`.
fn write_outcome(out: &Path, report: &EvalReport, models: &[PpgNet], histories: &[Vec<f64>]) -> Result<()> {
    report.write(out)?;
    for (i, (model, history)) in models.iter().zip(histories).enumerate() {
        if !history.is_empty() {
            write_history(&out.join(format!("history_fold{i}.csv")), history)?;
            save_weights(model, &out.join(format!("fold{i}.weights")))?;
        }
    }
    print_summary(report, out);
    Ok(())
}

fn print_summary(report: &EvalReport, out: &Path) {
    let fmt_pcc = |p: Option<f64>| p.map_or("n/a".to_string(), |p| format!("{p:.3}"));
    for i in 0..report.n_folds() {
        let a = report.fold(i).expect("fold exists");
        println!(
            "fold {i}: MAE {:.3} ± {:.3} BPM, PCC {}, {} windows",
            a.mae,
            a.sdae,
            fmt_pcc(a.pcc),
            a.n_windows
        );
    }
    for (name, a) in [("pooled", report.pooled()), ("fold mean", report.fold_mean())] {
        println!("{name}: MAE {:.3} ± {:.3} BPM, PCC {}", a.mae, a.sdae, fmt_pcc(a.pcc));
    }
    println!("wrote report to {}", out.display());
}

fn cmd_cv(dataset: &Path, scheme: Scheme, out: &Path, jobs: usize, cfg: &RunConfig) -> Result<()> {
    let data = load_dataset(dataset)?;
    let plan = FoldPlan::new(&data, scheme, cfg.train.seed)?;
    let outcome = cross_validate(&data, &plan, &cfg.model, &cfg.train, Init::Random, jobs)?;
    write_outcome(out, &outcome.report, &outcome.models, &outcome.histories)
}

fn cmd_transfer(
    condition: Condition,
    weights: Option<&Path>,
    dataset: &Path,
    scheme: Scheme,
    out: &Path,
    jobs: usize,
    cfg: &RunConfig,
) -> Result<()> {
    let pretrained = match (condition, weights) {
        (Condition::Scratch, _) => None,
        (_, Some(w)) => Some(read_weights(w).with_context(|| format!("loading weights {}", w.display()))?),
        (_, None) => bail!(usage(format!("condition {} needs --source-weights", condition.number()))),
    };
    let data = load_dataset(dataset)?;
    let setup = ConditionSetup {
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        scheme,
        jobs,
    };
    let outcome = run_condition(condition, &data, pretrained.as_ref(), &setup)?;
    let meta = &outcome.report.meta;
    println!(
        "condition {}: {} of {} parameters trainable, epochs {}",
        condition.number(),
        meta.trainable_parameters,
        meta.total_parameters,
        meta.epochs.map_or("—".to_string(), |e| e.to_string())
    );
    write_outcome(out, &outcome.report, &outcome.models, &outcome.histories)
}

fn cmd_eval(weights: &Path, dataset: &Path, out: &Path, cfg: &RunConfig) -> Result<()> {
    let model = model_from(&cfg.model, Some(weights))?;
    let data = load_dataset(dataset)?;
    let counts = model.count_parameters();
    let meta = ReportMeta {
        condition: None,
        scheme: Scheme::Holdout.to_string(),
        epochs: None,
        seed: cfg.train.seed,
        total_parameters: counts.total,
        trainable_parameters: counts.trainable,
        folds: vec![ppgnet::metrics::FoldMeta {
            train_subjects: Vec::new(),
            test_subjects: data.subjects(),
            train_windows: 0,
            test_windows: data.len(),
        }],
    };
    let report = evaluate(&model, &data, meta)?;
    report.write(out)?;
    print_summary(&report, out);
    Ok(())
}

fn cmd_gradcheck(seed: u64, coords: usize) -> Result<()> {
    let mut reports = primitive_suite(seed)?;
    reports.push(network_grad_check(ModelConfig::default(), 2, coords, seed)?);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    for r in &reports {
        println!("{r}");
    }
    if failed.is_empty() {
        println!("all {} gradient checks passed", reports.len());
        Ok(())
    } else {
        Err(Failure::Verification(format!("gradient check failed: {}", failed.join(", "))).into())
    }
}

fn cmd_info(weights: Option<&Path>, cfg: &RunConfig) -> Result<()> {
    let mut model = model_from(&cfg.model, weights)?;
    let trainable: std::collections::BTreeSet<Block> =
        Block::ALL.into_iter().filter(|b| !cfg.train.freeze.contains(b)).collect();
    model.freeze_except(&trainable);
    let counts = model.count_parameters();
    println!("{:<10} {:>10}  trainable", "block", "parameters");
    for (block, n) in &counts.per_block {
        println!("{:<10} {:>10}  {}", block.name(), n, if model.is_trainable(*block) { "yes" } else { "no" });
    }
    println!("{:<10} {:>10}", "total", counts.total);
    println!("{:<10} {:>10}", "trainable", counts.trainable);
    println!("shapes: {}", model.shape_ledger());
    Ok(())
}
