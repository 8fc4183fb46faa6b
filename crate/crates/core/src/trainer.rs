//! SGD training, cross-validation fold plans, and the four transfer conditions.
//!
//! Conditions:
//!
//! 1. random initialization, cross-validated on the target (750 epochs)
//! 2. source-trained weights evaluated on the whole target, no retraining
//! 3. source-trained weights, only LSTM2 and the dense head trainable,
//!    cross-validated on the target (65 epochs)
//! 4. as 3, retrained on a 15% per-subject sample of the target and evaluated
//!    on the other 85% (90 epochs)
//!
//! Everything is seeded: a fold with index `i` uses model seed
//! `model.seed + i` and training seed `train.seed + i`, so folds give the same
//! result whether they run one after another or in parallel.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{write_atomic, WeightsFile, WindowedDataset};
use crate::metrics::{EvalReport, FoldMeta, PredictionRow, ReportMeta};
use crate::model::{Block, ModelConfig, PpgNet};
use crate::{Error, Result};

/// Blocks left trainable when fine-tuning a source-trained network.
pub const FINE_TUNED_BLOCKS: [Block; 2] = [Block::Lstm2, Block::Linear];
pub const DEFAULT_SPARSE_FRACTION: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Plain SGD step size. Zero is accepted and leaves the parameters
    /// untouched, which is useful as a control run.
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Reshuffle the window order every epoch.
    pub shuffle: bool,
    /// Blocks excluded from updates.
    pub freeze: BTreeSet<Block>,
    /// Fraction of each target subject used for sparse retraining.
    pub sparse_fraction: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            batch_size: 128,
            epochs: 750,
            seed: 0,
            shuffle: true,
            freeze: BTreeSet::new(),
            sparse_fraction: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidArgument("batch size and epochs must be at least 1".into()));
        }
        if let Some(f) = self.sparse_fraction {
            check_fraction(f)?;
        }
        Ok(())
    }

    fn trainable(&self) -> BTreeSet<Block> {
        Block::ALL.into_iter().filter(|b| !self.freeze.contains(b)).collect()
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("sparse fraction must lie in (0, 1), got {f}")))
    }
}

/// Trains `model` in place on `dataset` and returns the mean training loss of
/// every epoch. Each epoch takes `ceil(N / batch_size)` SGD steps on the mean
/// absolute error; the last batch may be short. Blocks in `config.freeze` are
/// left bit-unchanged.
pub fn train(model: &mut PpgNet, dataset: &WindowedDataset, config: &TrainConfig) -> Result<Vec<f64>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training set has no windows".into()));
    }
    model.freeze_except(&config.trainable());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let windows = dataset.windows();
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let samples: Vec<&[f64]> = batch.iter().map(|&i| windows[i].samples.as_slice()).collect();
            let labels: Vec<f64> = batch.iter().map(|&i| windows[i].label_bpm).collect();
            total += model.train_step(&samples, &labels, config.learning_rate, &mut rng)? * batch.len() as f64;
        }
        let mean = total / windows.len() as f64;
        info!("epoch {:>4}/{}: mean loss {mean:.4}", epoch + 1, config.epochs);
        history.push(mean);
    }
    Ok(history)
}

/// Writes `epoch,mean_loss` lines (epochs numbered from 1).
pub fn write_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Serde(e.to_string());
    w.write_record(["epoch", "mean_loss"]).map_err(err)?;
    for (i, loss) in history.iter().enumerate() {
        w.serialize((i + 1, loss)).map_err(err)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::Serde(e.to_string()))?)
}

/// How a dataset is split into folds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    /// One fold per subject.
    Loso,
    /// `k` subject-disjoint folds.
    KFold(usize),
    /// `k` folds over windows regardless of subject, for comparison only.
    KFoldWindows(usize),
    /// A single train/test split decided outside the fold planner.
    Holdout,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scheme::Loso => f.write_str("loso"),
            Scheme::KFold(k) => write!(f, "kfold:{k}"),
            Scheme::KFoldWindows(k) => write!(f, "kfold-windows:{k}"),
            Scheme::Holdout => f.write_str("holdout"),
        }
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown scheme {s:?} (expected loso, kfold:K or kfold-windows:K)"));
        let k = |v: &str| -> Result<usize> { v.parse().ok().filter(|k| *k >= 2).ok_or_else(bad) };
        match s.split_once(':') {
            None if s == "loso" => Ok(Scheme::Loso),
            None if s == "holdout" => Ok(Scheme::Holdout),
            Some(("kfold", v)) => Ok(Scheme::KFold(k(v)?)),
            Some(("kfold-windows", v)) => Ok(Scheme::KFoldWindows(k(v)?)),
            _ => Err(bad()),
        }
    }
}

/// One train/test split, as subject lists and as window indices into the
/// planned dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Fold {
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldPlan {
    pub scheme: Scheme,
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Builds the plan for `scheme`; `seed` only matters for k-fold schemes.
    pub fn new(dataset: &WindowedDataset, scheme: Scheme, seed: u64) -> Result<Self> {
        match scheme {
            Scheme::Loso => loso_folds(dataset),
            Scheme::KFold(k) => kfold_folds(dataset, k, seed),
            Scheme::KFoldWindows(k) => kfold_window_folds(dataset, k, seed),
            Scheme::Holdout => Err(Error::InvalidArgument("a holdout split is not planned from a scheme".into())),
        }
    }
}

fn subject_folds(dataset: &WindowedDataset, scheme: Scheme, groups: Vec<Vec<String>>) -> FoldPlan {
    let folds = groups
        .iter()
        .map(|test_subjects| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..dataset.len()).partition(|&i| test_subjects.contains(&dataset.windows()[i].subject_id));
            let train_subjects = groups
                .iter()
                .filter(|g| *g != test_subjects)
                .flatten()
                .cloned()
                .collect();
            Fold {
                train_subjects,
                test_subjects: test_subjects.clone(),
                train,
                test,
            }
        })
        .collect();
    FoldPlan { scheme, folds }
}

/// Leave-one-subject-out: each subject is once the whole test set.
pub fn loso_folds(dataset: &WindowedDataset) -> Result<FoldPlan> {
    let subjects = dataset.subjects();
    if subjects.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-subject-out needs at least 2 subjects, got {}",
            subjects.len()
        )));
    }
    let groups = subjects.into_iter().map(|s| vec![s]).collect();
    Ok(subject_folds(dataset, Scheme::Loso, groups))
}

/// Shuffles the subjects with `seed` and deals them into `k` groups whose
/// sizes differ by at most one; each group is once the test set.
pub fn kfold_folds(dataset: &WindowedDataset, k: usize, seed: u64) -> Result<FoldPlan> {
    let mut subjects = dataset.subjects();
    if k < 2 || subjects.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{k}-fold cross-validation needs k ≥ 2 and at least k subjects, got {}",
            subjects.len()
        )));
    }
    subjects.sort();
    subjects.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let groups = near_equal_groups(subjects, k);
    Ok(subject_folds(dataset, Scheme::KFold(k), groups))
}

/// Window-level k-fold: the same subject may appear on both sides.
pub fn kfold_window_folds(dataset: &WindowedDataset, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || dataset.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{k}-fold cross-validation needs k ≥ 2 and at least k windows, got {}",
            dataset.len()
        )));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let groups = near_equal_groups(order, k);
    let subjects_of = |idx: &[usize]| -> Vec<String> {
        let mut s: Vec<String> = idx.iter().map(|&i| dataset.windows()[i].subject_id.clone()).collect();
        s.sort();
        s.dedup();
        s
    };
    let folds = (0..k)
        .map(|f| {
            let mut test = groups[f].clone();
            test.sort_unstable();
            let mut train: Vec<usize> = groups.iter().enumerate().filter(|(g, _)| *g != f).flat_map(|(_, v)| v.clone()).collect();
            train.sort_unstable();
            Fold {
                train_subjects: subjects_of(&train),
                test_subjects: subjects_of(&test),
                train,
                test,
            }
        })
        .collect();
    Ok(FoldPlan {
        scheme: Scheme::KFoldWindows(k),
        folds,
    })
}

fn near_equal_groups<T>(items: Vec<T>, k: usize) -> Vec<Vec<T>> {
    let (base, extra) = (items.len() / k, items.len() % k);
    let mut it = items.into_iter();
    (0..k)
        .map(|g| it.by_ref().take(base + usize::from(g < extra)).collect())
        .collect()
}

/// Splits every subject's windows into `round(fraction × n)` randomly chosen
/// training windows and the rest. Both parts keep dataset order.
pub fn sparse_subset(dataset: &WindowedDataset, fraction: f64, seed: u64) -> Result<(WindowedDataset, WindowedDataset)> {
    check_fraction(fraction)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; dataset.len()];
    for subject in dataset.subjects() {
        let idx: Vec<usize> = (0..dataset.len())
            .filter(|&i| dataset.windows()[i].subject_id == subject)
            .collect();
        let take = (fraction * idx.len() as f64).round() as usize;
        if take == 0 {
            warn!("{subject}: {} windows give no training window at fraction {fraction}", idx.len());
        }
        for j in sample(&mut rng, idx.len(), take) {
            chosen[idx[j]] = true;
        }
    }
    let (train, rest): (Vec<usize>, Vec<usize>) = (0..dataset.len()).partition(|&i| chosen[i]);
    Ok((dataset.subset(&train)?, dataset.subset(&rest)?))
}

/// Starting point of every fold's network.
#[derive(Clone, Copy, Debug)]
pub enum Init<'a> {
    /// Fresh seeded weights.
    Random,
    /// Weights loaded from a file.
    Pretrained(&'a WeightsFile),
}

/// Per-fold results of a cross-validation run.
pub struct CvOutcome {
    pub report: EvalReport,
    /// The trained network of each fold.
    pub models: Vec<PpgNet>,
    pub histories: Vec<Vec<f64>>,
}

fn build_model(config: &ModelConfig, seed_offset: u64, init: Init<'_>) -> Result<PpgNet> {
    let mut model = PpgNet::build(ModelConfig {
        seed: config.seed.wrapping_add(seed_offset),
        ..config.clone()
    })?;
    if let Init::Pretrained(weights) = init {
        weights.apply_to(&mut model)?;
    }
    Ok(model)
}

fn score(model: &PpgNet, dataset: &WindowedDataset, fold: usize) -> Result<Vec<PredictionRow>> {
    let windows: Vec<&[f64]> = dataset.windows().iter().map(|w| w.samples.as_slice()).collect();
    let predicted = model.predict(&windows)?;
    Ok(dataset
        .windows()
        .iter()
        .zip(predicted)
        .map(|(w, p)| PredictionRow {
            fold,
            subject_id: w.subject_id.clone(),
            window_index: w.window_index,
            actual_bpm: w.label_bpm,
            predicted_bpm: p,
        })
        .collect())
}

/// Scores `model` on `dataset` as a single fold.
pub fn evaluate(model: &PpgNet, dataset: &WindowedDataset, meta: ReportMeta) -> Result<EvalReport> {
    EvalReport::new(meta, score(model, dataset, 0)?)
}

/// Trains and scores one network per fold. With `jobs > 1` folds run on a
/// thread pool of that size; results do not depend on `jobs`.
pub fn cross_validate(
    dataset: &WindowedDataset,
    plan: &FoldPlan,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    init: Init<'_>,
    jobs: usize,
) -> Result<CvOutcome> {
    train_config.validate()?;
    if plan.folds.is_empty() {
        return Err(Error::Empty("fold plan has no folds".into()));
    }
    let run_fold = |i: usize| -> Result<(PpgNet, Vec<f64>, Vec<PredictionRow>, FoldMeta)> {
        let fold = &plan.folds[i];
        let train_set = dataset.subset(&fold.train)?;
        let test_set = dataset.subset(&fold.test)?;
        info!(
            "fold {}/{}: {} training windows, {} test windows",
            i + 1,
            plan.folds.len(),
            train_set.len(),
            test_set.len()
        );
        let mut model = build_model(model_config, i as u64, init)?;
        let config = TrainConfig {
            seed: train_config.seed.wrapping_add(i as u64),
            ..train_config.clone()
        };
        let history = train(&mut model, &train_set, &config)?;
        let rows = score(&model, &test_set, i)?;
        let meta = FoldMeta {
            train_subjects: fold.train_subjects.clone(),
            test_subjects: fold.test_subjects.clone(),
            train_windows: train_set.len(),
            test_windows: test_set.len(),
        };
        Ok((model, history, rows, meta))
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start {jobs} workers: {e}")))?;
    let results: Vec<_> = pool.install(|| (0..plan.folds.len()).into_par_iter().map(run_fold).collect::<Result<_>>())?;

    let counts = results[0].0.count_parameters();
    let mut meta = ReportMeta {
        condition: None,
        scheme: plan.scheme.to_string(),
        epochs: Some(train_config.epochs),
        seed: train_config.seed,
        total_parameters: counts.total,
        trainable_parameters: counts.trainable,
        folds: Vec::with_capacity(results.len()),
    };
    let (mut models, mut histories, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for (model, history, fold_rows, fold_meta) in results {
        models.push(model);
        histories.push(history);
        rows.extend(fold_rows);
        meta.folds.push(fold_meta);
    }
    Ok(CvOutcome {
        report: EvalReport::new(meta, rows)?,
        models,
        histories,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    /// Random initialization, cross-validated on the target.
    Scratch,
    /// Source-trained network evaluated on the target as is.
    SourceOnly,
    /// Source-trained network, head fine-tuned per target fold.
    FineTune,
    /// Source-trained network, head fine-tuned on a sparse target sample.
    SparseRetrain,
}

impl Condition {
    pub fn number(self) -> u8 {
        match self {
            Condition::Scratch => 1,
            Condition::SourceOnly => 2,
            Condition::FineTune => 3,
            Condition::SparseRetrain => 4,
        }
    }

    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            1 => Ok(Condition::Scratch),
            2 => Ok(Condition::SourceOnly),
            3 => Ok(Condition::FineTune),
            4 => Ok(Condition::SparseRetrain),
            _ => Err(Error::InvalidArgument(format!("condition must be 1–4, got {n}"))),
        }
    }

    /// Training epochs on the target; `None` when the target is only evaluated.
    pub fn default_epochs(self) -> Option<usize> {
        match self {
            Condition::Scratch => Some(750),
            Condition::SourceOnly => None,
            Condition::FineTune => Some(65),
            Condition::SparseRetrain => Some(90),
        }
    }

    fn fine_tunes(self) -> bool {
        matches!(self, Condition::FineTune | Condition::SparseRetrain)
    }
}

/// Inputs of [`run_condition`] besides the data.
#[derive(Clone, Debug)]
pub struct ConditionSetup {
    pub model: ModelConfig,
    /// Training settings. `freeze` is overridden for conditions 3 and 4.
    pub train: TrainConfig,
    /// Fold scheme of conditions 1 and 3.
    pub scheme: Scheme,
    pub jobs: usize,
}

impl ConditionSetup {
    /// Defaults with the condition's epoch count and a 5-fold scheme.
    pub fn for_condition(condition: Condition) -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig {
                epochs: condition.default_epochs().unwrap_or(1),
                ..TrainConfig::default()
            },
            scheme: Scheme::KFold(5),
            jobs: 1,
        }
    }
}

/// Runs one transfer condition against `target`. Conditions 2–4 need the
/// source-trained weights.
pub fn run_condition(
    condition: Condition,
    target: &WindowedDataset,
    pretrained: Option<&WeightsFile>,
    setup: &ConditionSetup,
) -> Result<CvOutcome> {
    let init = match (condition, pretrained) {
        (Condition::Scratch, _) => Init::Random,
        (_, Some(w)) => Init::Pretrained(w),
        (_, None) => {
            return Err(Error::InvalidArgument(format!(
                "condition {} needs source-trained weights",
                condition.number()
            )))
        }
    };
    let mut train_config = setup.train.clone();
    if condition.fine_tunes() {
        train_config.freeze = Block::ALL
            .into_iter()
            .filter(|b| !FINE_TUNED_BLOCKS.contains(b))
            .collect();
    }

    let mut outcome = match condition {
        Condition::Scratch | Condition::FineTune => {
            let plan = FoldPlan::new(target, setup.scheme, train_config.seed)?;
            cross_validate(target, &plan, &setup.model, &train_config, init, setup.jobs)?
        }
        Condition::SourceOnly => {
            let model = build_model(&setup.model, 0, init)?;
            let counts = model.count_parameters();
            let meta = ReportMeta {
                condition: None,
                scheme: Scheme::Holdout.to_string(),
                epochs: None,
                seed: train_config.seed,
                total_parameters: counts.total,
                trainable_parameters: counts.trainable,
                folds: vec![FoldMeta {
                    train_subjects: Vec::new(),
                    test_subjects: target.subjects(),
                    train_windows: 0,
                    test_windows: target.len(),
                }],
            };
            CvOutcome {
                report: evaluate(&model, target, meta)?,
                models: vec![model],
                histories: vec![Vec::new()],
            }
        }
        Condition::SparseRetrain => {
            let fraction = train_config.sparse_fraction.unwrap_or(DEFAULT_SPARSE_FRACTION);
            let (subset, remainder) = sparse_subset(target, fraction, train_config.seed)?;
            let mut model = build_model(&setup.model, 0, init)?;
            // The remainder is only handed over after training has finished.
            let history = train(&mut model, &subset, &train_config)?;
            let counts = model.count_parameters();
            let meta = ReportMeta {
                condition: None,
                scheme: format!("sparse:{fraction}"),
                epochs: Some(train_config.epochs),
                seed: train_config.seed,
                total_parameters: counts.total,
                trainable_parameters: counts.trainable,
                folds: vec![FoldMeta {
                    train_subjects: subset.subjects(),
                    test_subjects: remainder.subjects(),
                    train_windows: subset.len(),
                    test_windows: remainder.len(),
                }],
            };
            CvOutcome {
                report: evaluate(&model, &remainder, meta)?,
                models: vec![model],
                histories: vec![history],
            }
        }
    };
    outcome.report.meta.condition = Some(condition.number());
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::Window;

    fn dataset(per_subject: &[usize]) -> WindowedDataset {
        let mut windows = Vec::new();
        for (s, &n) in per_subject.iter().enumerate() {
            for i in 0..n {
                windows.push(Window {
                    samples: vec![0.0; 1000],
                    label_bpm: 60.0 + (i % 100) as f64,
                    subject_id: format!("s{s:02}"),
                    window_index: i,
                });
            }
        }
        WindowedDataset::new(windows).unwrap()
    }

    #[test]
    fn scheme_round_trips_through_text() {
        for s in ["loso", "kfold:5", "kfold-windows:3", "holdout"] {
            assert_eq!(s.parse::<Scheme>().unwrap().to_string(), s);
        }
        for s in ["kfold", "kfold:1", "kfold:x", "LOSO", "fold:5"] {
            assert!(s.parse::<Scheme>().is_err(), "{s}");
        }
    }

    #[test]
    fn groups_differ_by_at_most_one() {
        let sizes: Vec<usize> = near_equal_groups((0..12).collect(), 5).iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![3, 3, 2, 2, 2]);
    }

    #[test]
    fn loso_needs_two_subjects() {
        assert!(loso_folds(&dataset(&[4])).is_err());
        let plan = loso_folds(&dataset(&[3, 2])).unwrap();
        assert_eq!(plan.folds.len(), 2);
        assert_eq!(plan.folds[0].train, vec![3, 4]);
        assert_eq!(plan.folds[1].train_subjects, vec!["s00".to_string()]);
    }

    #[test]
    fn sparse_subset_rounds_per_subject() {
        let (train, rest) = sparse_subset(&dataset(&[1000, 7, 3]), 0.15, 1).unwrap();
        let count = |d: &WindowedDataset, s: &str| d.windows().iter().filter(|w| w.subject_id == s).count();
        assert_eq!(count(&train, "s00"), 150);
        assert_eq!(count(&rest, "s00"), 850);
        assert_eq!(count(&train, "s01"), 1);
        assert_eq!(count(&train, "s02"), 0);
        assert!(sparse_subset(&dataset(&[10]), 1.0, 1).is_err());
    }

    #[test]
    fn invalid_training_settings_are_rejected() {
        let bad = [
            TrainConfig { learning_rate: -0.1, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { sparse_fraction: Some(0.0), ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err(), "{c:?}");
        }
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_ok());
    }
}
