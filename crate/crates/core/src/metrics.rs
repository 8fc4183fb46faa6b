//! Error statistics and evaluation reports.
//!
//! A report is three files in one directory:
//!
//! - `rows.csv`: `fold, subject_id, window_index, actual_bpm, predicted_bpm`
//! - `aggregates.csv`: `scope, fold, mae, sdae, pcc, n_windows`, where `scope`
//!   is `fold` (one line per fold), `pooled` (all rows together) or
//!   `fold_mean` (unweighted mean of the per-fold values)
//! - `report.json`: what produced the predictions
//!
//! Aggregates are always recomputed from the rows; [`EvalReport::load`]
//! rejects a directory whose aggregates disagree with its rows.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::write_atomic;
use crate::{Error, Result};

pub const ROWS_FILE: &str = "rows.csv";
pub const AGGREGATES_FILE: &str = "aggregates.csv";
pub const META_FILE: &str = "report.json";

/// Relative agreement required between stored and recomputed aggregates.
const CONSISTENCY_TOLERANCE: f64 = 1e-9;

fn check_pair(actual: &[f64], predicted: &[f64]) -> Result<()> {
    if actual.len() != predicted.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} actual values, {} predictions",
            actual.len(),
            predicted.len()
        )));
    }
    if actual.is_empty() {
        return Err(Error::Empty("no values to score".into()));
    }
    Ok(())
}

fn abs_errors<'a>(actual: &'a [f64], predicted: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    actual.iter().zip(predicted).map(|(a, p)| (a - p).abs())
}

/// Mean absolute error.
pub fn mae(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(actual, predicted)?;
    Ok(abs_errors(actual, predicted).sum::<f64>() / actual.len() as f64)
}

/// Population standard deviation of the absolute errors.
pub fn sdae(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    let mean = mae(actual, predicted)?;
    let var = abs_errors(actual, predicted).map(|e| (e - mean).powi(2)).sum::<f64>() / actual.len() as f64;
    Ok(var.sqrt())
}

/// Pearson correlation coefficient, clamped to `[-1, 1]` against rounding.
pub fn pcc(actual: &[f64], predicted: &[f64]) -> Result<f64> {
    check_pair(actual, predicted)?;
    if actual.len() < 2 {
        return Err(Error::InvalidArgument("correlation needs at least two values".into()));
    }
    let n = actual.len() as f64;
    let ma = actual.iter().sum::<f64>() / n;
    let mp = predicted.iter().sum::<f64>() / n;
    let (mut sap, mut saa, mut spp) = (0.0, 0.0, 0.0);
    for (a, p) in actual.iter().zip(predicted) {
        let (da, dp) = (a - ma, p - mp);
        sap += da * dp;
        saa += da * da;
        spp += dp * dp;
    }
    if saa == 0.0 || spp == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sap / (saa.sqrt() * spp.sqrt())).clamp(-1.0, 1.0))
}

/// One scored window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub fold: usize,
    pub subject_id: String,
    pub window_index: usize,
    pub actual_bpm: f64,
    pub predicted_bpm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Fold,
    Pooled,
    FoldMean,
}

/// Metrics over one scope. `pcc` is absent when it is undefined (fewer than
/// two windows or a constant series).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scope: Scope,
    pub fold: Option<usize>,
    pub mae: f64,
    pub sdae: f64,
    pub pcc: Option<f64>,
    pub n_windows: usize,
}

impl Aggregate {
    fn over(scope: Scope, fold: Option<usize>, rows: &[&PredictionRow]) -> Result<Self> {
        let actual: Vec<f64> = rows.iter().map(|r| r.actual_bpm).collect();
        let predicted: Vec<f64> = rows.iter().map(|r| r.predicted_bpm).collect();
        Ok(Self {
            scope,
            fold,
            mae: mae(&actual, &predicted)?,
            sdae: sdae(&actual, &predicted)?,
            pcc: pcc(&actual, &predicted).ok(),
            n_windows: rows.len(),
        })
    }
}

/// Provenance of a report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMeta {
    /// Transfer condition (1–4), if the report came from one.
    pub condition: Option<u8>,
    /// Fold scheme, e.g. `kfold:5`, `loso`, `holdout`.
    pub scheme: String,
    /// Training epochs per fold; absent when nothing was trained.
    pub epochs: Option<usize>,
    pub seed: u64,
    pub total_parameters: usize,
    pub trainable_parameters: usize,
    pub folds: Vec<FoldMeta>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldMeta {
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
    pub train_windows: usize,
    pub test_windows: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub meta: ReportMeta,
    rows: Vec<PredictionRow>,
    aggregates: Vec<Aggregate>,
}

impl EvalReport {
    /// Scores `rows`. Folds are numbered from zero and each must have rows.
    pub fn new(meta: ReportMeta, rows: Vec<PredictionRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("report has no rows".into()));
        }
        let n_folds = rows.iter().map(|r| r.fold).max().unwrap() + 1;
        let mut aggregates = Vec::with_capacity(n_folds + 2);
        for fold in 0..n_folds {
            let in_fold: Vec<&PredictionRow> = rows.iter().filter(|r| r.fold == fold).collect();
            if in_fold.is_empty() {
                return Err(Error::Report(format!("fold {fold} has no rows")));
            }
            aggregates.push(Aggregate::over(Scope::Fold, Some(fold), &in_fold)?);
        }
        let all: Vec<&PredictionRow> = rows.iter().collect();
        aggregates.push(Aggregate::over(Scope::Pooled, None, &all)?);

        let per_fold = &aggregates[..n_folds];
        let mean = |f: &dyn Fn(&Aggregate) -> f64| per_fold.iter().map(f).sum::<f64>() / n_folds as f64;
        let pccs: Option<Vec<f64>> = per_fold.iter().map(|a| a.pcc).collect();
        aggregates.push(Aggregate {
            scope: Scope::FoldMean,
            fold: None,
            mae: mean(&|a| a.mae),
            sdae: mean(&|a| a.sdae),
            pcc: pccs.map(|p| p.iter().sum::<f64>() / n_folds as f64),
            n_windows: rows.len(),
        });
        Ok(Self { meta, rows, aggregates })
    }

    pub fn rows(&self) -> &[PredictionRow] {
        &self.rows
    }

    pub fn aggregates(&self) -> &[Aggregate] {
        &self.aggregates
    }

    pub fn n_folds(&self) -> usize {
        self.aggregates.iter().filter(|a| a.scope == Scope::Fold).count()
    }

    pub fn fold(&self, fold: usize) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.scope == Scope::Fold && a.fold == Some(fold))
    }

    pub fn pooled(&self) -> &Aggregate {
        self.scope(Scope::Pooled)
    }

    pub fn fold_mean(&self) -> &Aggregate {
        self.scope(Scope::FoldMean)
    }

    fn scope(&self, scope: Scope) -> &Aggregate {
        self.aggregates
            .iter()
            .find(|a| a.scope == scope)
            .expect("constructed with every scope")
    }

    /// Writes the three report files into `dir`, creating it if needed.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(ROWS_FILE), &to_csv(&self.rows)?)?;
        write_atomic(&dir.join(AGGREGATES_FILE), &to_csv(&self.aggregates)?)?;
        let meta = serde_json::to_vec_pretty(&self.meta).map_err(|e| Error::Serde(e.to_string()))?;
        write_atomic(&dir.join(META_FILE), &meta)
    }

    /// Reads a report written by [`write`](Self::write) and checks that the
    /// stored aggregates match those recomputed from the rows.
    pub fn load(dir: &Path) -> Result<Self> {
        let rows: Vec<PredictionRow> = from_csv(&dir.join(ROWS_FILE))?;
        let stored: Vec<Aggregate> = from_csv(&dir.join(AGGREGATES_FILE))?;
        let meta_path = dir.join(META_FILE);
        let text = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: ReportMeta = serde_json::from_slice(&text).map_err(|e| Error::Serde(format!("{}: {e}", meta_path.display())))?;
        let report = Self::new(meta, rows)?;
        if stored.len() != report.aggregates.len() {
            return Err(Error::Report(format!(
                "{} aggregate lines, rows imply {}",
                stored.len(),
                report.aggregates.len()
            )));
        }
        for (s, r) in stored.iter().zip(&report.aggregates) {
            let close = |a: f64, b: f64| (a - b).abs() <= CONSISTENCY_TOLERANCE * a.abs().max(b.abs()).max(1.0);
            let pcc_ok = match (s.pcc, r.pcc) {
                (Some(a), Some(b)) => close(a, b),
                (None, None) => true,
                _ => false,
            };
            if s.scope != r.scope
                || s.fold != r.fold
                || s.n_windows != r.n_windows
                || !close(s.mae, r.mae)
                || !close(s.sdae, r.sdae)
                || !pcc_ok
            {
                return Err(Error::Report(format!("stored {s:?} but rows give {r:?}")));
            }
        }
        Ok(report)
    }
}

fn to_csv<T: Serialize>(records: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        w.serialize(r).map_err(|e| Error::Serde(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::Serde(e.to_string()))
}

fn from_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Serde(format!("{}: {other:?}", path.display())),
    })?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
}
