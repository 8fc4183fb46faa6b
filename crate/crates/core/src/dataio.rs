//! On-disk data model.
//!
//! Raw recordings are a TOML manifest plus one single-column CSV per signal:
//!
//! ```toml
//! subject_id = "S01"
//! ppg_rate_hz = 50.0
//! ecg_rate_hz = 400.0
//! ppg_file = "S01_ppg.csv"   # relative to the manifest's directory
//! ecg_file = "S01_ecg.csv"
//! ```
//!
//! Windowed datasets and network weights use small self-describing binary
//! containers: an 8-byte magic tag, the body length, the little-endian body,
//! and a SHA-256 digest of everything before it. Files are written to a
//! temporary sibling and renamed into place.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::{Block, PpgNet};
use crate::{Error, Result};

/// Sample rate of every prepared window.
pub const WINDOW_RATE_HZ: f64 = 125.0;
/// Samples per prepared window (8 s at 125 Hz).
pub const WINDOW_LEN: usize = 1000;
/// Accepted label band in BPM.
pub const LABEL_RANGE_BPM: (f64, f64) = (20.0, 250.0);
/// Name of the pseudo-block holding normalization running statistics.
pub const BATCH_NORM_STATS: &str = "BatchNormStats";

/// One subject's raw PPG and reference ECG.
#[derive(Clone, Debug, PartialEq)]
pub struct Recording {
    pub subject_id: String,
    pub ppg: Vec<f64>,
    pub ppg_rate_hz: f64,
    pub ecg: Vec<f64>,
    pub ecg_rate_hz: f64,
}

impl Recording {
    pub fn new(subject_id: impl Into<String>, ppg: Vec<f64>, ppg_rate_hz: f64, ecg: Vec<f64>, ecg_rate_hz: f64) -> Result<Self> {
        let rec = Self {
            subject_id: subject_id.into(),
            ppg,
            ppg_rate_hz,
            ecg,
            ecg_rate_hz,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Positive rates, non-empty signals, and both streams spanning the same
    /// time within one sample period of the slower stream.
    pub fn validate(&self) -> Result<()> {
        for rate in [self.ppg_rate_hz, self.ecg_rate_hz] {
            if !(rate > 0.0 && rate.is_finite()) {
                return Err(Error::InvalidRate(rate));
            }
        }
        if self.ppg.is_empty() || self.ecg.is_empty() {
            return Err(Error::Empty(format!("signal of subject {}", self.subject_id)));
        }
        let ppg_s = self.ppg.len() as f64 / self.ppg_rate_hz;
        let ecg_s = self.ecg.len() as f64 / self.ecg_rate_hz;
        let tolerance_s = 1.0 / self.ppg_rate_hz.min(self.ecg_rate_hz);
        if (ppg_s - ecg_s).abs() > tolerance_s {
            return Err(Error::DurationMismatch {
                ppg_s,
                ecg_s,
                tolerance_s,
            });
        }
        Ok(())
    }

    /// Duration of the PPG stream in seconds.
    pub fn duration_s(&self) -> f64 {
        self.ppg.len() as f64 / self.ppg_rate_hz
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    subject_id: String,
    ppg_rate_hz: f64,
    ecg_rate_hz: f64,
    ppg_file: PathBuf,
    ecg_file: PathBuf,
}

/// Reads a manifest and the two signal files it names.
pub fn load_recording(manifest_path: &Path) -> Result<Recording> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.to_path_buf(),
        reason: e.message().to_string(),
    })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let ppg = read_signal(&dir.join(&manifest.ppg_file))?;
    let ecg = read_signal(&dir.join(&manifest.ecg_file))?;
    Recording::new(manifest.subject_id, ppg, manifest.ppg_rate_hz, ecg, manifest.ecg_rate_hz)
}

/// Writes `<dir>/<subject>.toml` with `<subject>_ppg.csv` and `<subject>_ecg.csv`
/// beside it, returning the manifest path.
pub fn save_recording(rec: &Recording, dir: &Path) -> Result<PathBuf> {
    rec.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = &rec.subject_id;
    let manifest = Manifest {
        subject_id: rec.subject_id.clone(),
        ppg_rate_hz: rec.ppg_rate_hz,
        ecg_rate_hz: rec.ecg_rate_hz,
        ppg_file: format!("{stem}_ppg.csv").into(),
        ecg_file: format!("{stem}_ecg.csv").into(),
    };
    write_signal(&dir.join(&manifest.ppg_file), &rec.ppg)?;
    write_signal(&dir.join(&manifest.ecg_file), &rec.ecg)?;
    let path = dir.join(format!("{stem}.toml"));
    let text = toml::to_string(&manifest).map_err(|e| Error::Serde(e.to_string()))?;
    write_atomic(&path, text.as_bytes())?;
    Ok(path)
}

/// Reads one real per line. Blank lines are skipped.
pub fn read_signal(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let t = l.trim();
            match t.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::NonNumericSample {
                    path: path.to_path_buf(),
                    line: i + 1,
                    text: t.to_string(),
                }),
            }
        })
        .collect()
}

/// Writes one real per line using the shortest representation that parses
/// back to the same value.
pub fn write_signal(path: &Path, samples: &[f64]) -> Result<()> {
    let mut text = String::with_capacity(samples.len() * 20);
    for v in samples {
        text.push_str(&v.to_string());
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// One labelled 8 s PPG window.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub samples: Vec<f64>,
    pub label_bpm: f64,
    pub subject_id: String,
    pub window_index: usize,
}

/// Labelled windows at 125 Hz with unique `(subject_id, window_index)` keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WindowedDataset {
    windows: Vec<Window>,
}

impl WindowedDataset {
    /// Validates every window: 1000 samples, label inside the accepted band,
    /// unique key.
    pub fn new(windows: Vec<Window>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(windows.len());
        for w in &windows {
            if w.samples.len() != WINDOW_LEN {
                return Err(Error::ShapeMismatch(format!(
                    "window ({}, {}) has {} samples, expected {WINDOW_LEN}",
                    w.subject_id,
                    w.window_index,
                    w.samples.len()
                )));
            }
            if !label_in_band(w.label_bpm) {
                return Err(Error::LabelOutOfBand(w.label_bpm));
            }
            if !seen.insert((w.subject_id.as_str(), w.window_index)) {
                return Err(Error::DuplicateWindow {
                    subject_id: w.subject_id.clone(),
                    window_index: w.window_index,
                });
            }
        }
        Ok(Self { windows })
    }

    pub fn windows(&self) -> &[Window] {
        &self.windows
    }

    pub fn into_windows(self) -> Vec<Window> {
        self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        WINDOW_RATE_HZ
    }

    /// Distinct subject ids in order of first appearance.
    pub fn subjects(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.windows
            .iter()
            .filter(|w| seen.insert(w.subject_id.as_str()))
            .map(|w| w.subject_id.clone())
            .collect()
    }

    /// Windows of the given subjects, in dataset order.
    pub fn select_subjects<S: AsRef<str>>(&self, subjects: &[S]) -> WindowedDataset {
        let keep: HashSet<&str> = subjects.iter().map(|s| s.as_ref()).collect();
        WindowedDataset {
            windows: self
                .windows
                .iter()
                .filter(|w| keep.contains(w.subject_id.as_str()))
                .cloned()
                .collect(),
        }
    }

    /// Windows at `indices`, in the given order. Panics on an out-of-range index;
    /// repeated indices are rejected as duplicate keys.
    pub fn subset(&self, indices: &[usize]) -> Result<WindowedDataset> {
        WindowedDataset::new(indices.iter().map(|&i| self.windows[i].clone()).collect())
    }

    /// Joins datasets with disjoint keys.
    pub fn concat(parts: Vec<WindowedDataset>) -> Result<WindowedDataset> {
        WindowedDataset::new(parts.into_iter().flat_map(|d| d.windows).collect())
    }

    pub fn labels(&self) -> Vec<f64> {
        self.windows.iter().map(|w| w.label_bpm).collect()
    }
}

pub fn label_in_band(bpm: f64) -> bool {
    (LABEL_RANGE_BPM.0..=LABEL_RANGE_BPM.1).contains(&bpm)
}

const WINDOWS_MAGIC: &[u8; 8] = b"PPGWIN01";
const WEIGHTS_MAGIC: &[u8; 8] = b"PPGWTS01";
const DIGEST_LEN: usize = 32;
const HEADER_LEN: usize = 16;

fn seal(magic: &[u8; 8], body: Vec<u8>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + body.len() + DIGEST_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&(body.len() as u64).to_le_bytes());
    out.extend_from_slice(&body);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Checks magic, length and digest, returning the body.
fn unseal<'a>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<&'a [u8]> {
    if bytes.len() < HEADER_LEN {
        if !magic.starts_with(&bytes[..bytes.len().min(8)]) {
            return Err(Error::BadMagic("unexpected leading bytes".into()));
        }
        return Err(Error::Truncated(format!("{} byte header", bytes.len())));
    }
    if &bytes[..8] != magic {
        return Err(Error::BadMagic(format!(
            "expected {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let body_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let expected = (HEADER_LEN as u64).saturating_add(body_len).saturating_add(DIGEST_LEN as u64);
    if (bytes.len() as u64) < expected {
        return Err(Error::Truncated(format!("{} of {expected} bytes", bytes.len())));
    }
    if bytes.len() as u64 != expected {
        return Err(Error::Checksum);
    }
    let end = HEADER_LEN + body_len as usize;
    if Sha256::digest(&bytes[..end]).as_slice() != &bytes[end..] {
        return Err(Error::Checksum);
    }
    Ok(&bytes[HEADER_LEN..end])
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated("body ends inside a record".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Truncated("array length".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Serde(e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Serde(format!("{} unread bytes", self.bytes.len() - self.pos)))
        }
    }
}

fn put_string(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn encode_windowed(dataset: &WindowedDataset) -> Vec<u8> {
    let mut body = Vec::with_capacity(24 + dataset.len() * (WINDOW_LEN * 8 + 32));
    body.extend_from_slice(&WINDOW_RATE_HZ.to_le_bytes());
    body.extend_from_slice(&(WINDOW_LEN as u64).to_le_bytes());
    body.extend_from_slice(&(dataset.len() as u64).to_le_bytes());
    for w in dataset.windows() {
        put_string(&mut body, &w.subject_id);
        body.extend_from_slice(&(w.window_index as u64).to_le_bytes());
        body.extend_from_slice(&w.label_bpm.to_le_bytes());
        put_f64s(&mut body, &w.samples);
    }
    seal(WINDOWS_MAGIC, body)
}

pub fn decode_windowed(bytes: &[u8]) -> Result<WindowedDataset> {
    let mut r = Reader {
        bytes: unseal(WINDOWS_MAGIC, bytes)?,
        pos: 0,
    };
    let rate = r.f64()?;
    let len = r.u64()? as usize;
    if rate != WINDOW_RATE_HZ || len != WINDOW_LEN {
        return Err(Error::ShapeMismatch(format!(
            "container holds {len}-sample windows at {rate} Hz"
        )));
    }
    let count = r.u64()? as usize;
    let mut windows = Vec::with_capacity(count.min(bytes.len() / (WINDOW_LEN * 8)));
    for _ in 0..count {
        let subject_id = r.string()?;
        let window_index = r.u64()? as usize;
        let label_bpm = r.f64()?;
        let samples = r.f64s(len)?;
        windows.push(Window {
            samples,
            label_bpm,
            subject_id,
            window_index,
        });
    }
    r.finish()?;
    WindowedDataset::new(windows)
}

pub fn save_windowed(dataset: &WindowedDataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode_windowed(dataset))
}

pub fn load_windowed(path: &Path) -> Result<WindowedDataset> {
    decode_windowed(&read_file(path)?)
}

/// One named array of a weights file.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightEntry {
    pub block: String,
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered named arrays: every parameter of a model, then its running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightsFile {
    pub entries: Vec<WeightEntry>,
}

impl WeightsFile {
    pub fn from_model(model: &PpgNet) -> Self {
        let mut entries: Vec<WeightEntry> = model
            .parameters()
            .iter()
            .map(|p| WeightEntry {
                block: p.block.name().to_string(),
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                values: p.value.data().to_vec(),
            })
            .collect();
        for (i, stats) in model.running_stats().iter().enumerate() {
            for (kind, values) in [("running_mean", &stats.mean), ("running_var", &stats.var)] {
                entries.push(WeightEntry {
                    block: BATCH_NORM_STATS.to_string(),
                    name: format!("seq{}.{kind}", i + 1),
                    shape: vec![values.len()],
                    values: values.clone(),
                });
            }
        }
        Self { entries }
    }

    /// Copies every array into `model`, whose configuration must produce the
    /// same set of names and shapes.
    pub fn apply_to(&self, model: &mut PpgNet) -> Result<()> {
        let template = WeightsFile::from_model(model);
        for e in &self.entries {
            if e.block != BATCH_NORM_STATS {
                e.block.parse::<Block>()?;
            }
        }
        if self.entries.len() != template.entries.len() {
            return Err(Error::ShapeMismatch(format!(
                "weights hold {} arrays, the model has {}",
                self.entries.len(),
                template.entries.len()
            )));
        }
        for (e, t) in self.entries.iter().zip(&template.entries) {
            if (&e.block, &e.name) != (&t.block, &t.name) {
                return Err(Error::ShapeMismatch(format!(
                    "found {}/{} where the model expects {}/{}",
                    e.block, e.name, t.block, t.name
                )));
            }
            if e.shape != t.shape || e.values.len() != t.values.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{}/{} has shape {:?}, the model expects {:?}",
                    e.block, e.name, e.shape, t.shape
                )));
            }
        }
        let n_params = model.parameters().len();
        for ((_, _, dst), e) in model.parameter_values_mut().zip(&self.entries) {
            dst.copy_from_slice(&e.values);
        }
        let mut stats = self.entries[n_params..].iter();
        for running in model.running_stats_mut() {
            running.mean.copy_from_slice(&stats.next().expect("checked").values);
            running.var.copy_from_slice(&stats.next().expect("checked").values);
        }
        Ok(())
    }

    /// Element counts per block name, in file order.
    pub fn block_counts(&self) -> Vec<(String, usize)> {
        let mut out: Vec<(String, usize)> = Vec::new();
        for e in &self.entries {
            match out.iter_mut().find(|(b, _)| *b == e.block) {
                Some((_, n)) => *n += e.values.len(),
                None => out.push((e.block.clone(), e.values.len())),
            }
        }
        out
    }

    pub fn get(&self, block: &str, name: &str) -> Option<&WeightEntry> {
        self.entries.iter().find(|e| e.block == block && e.name == name)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        body.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            put_string(&mut body, &e.block);
            put_string(&mut body, &e.name);
            body.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
            for d in &e.shape {
                body.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            put_f64s(&mut body, &e.values);
        }
        seal(WEIGHTS_MAGIC, body)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader {
            bytes: unseal(WEIGHTS_MAGIC, bytes)?,
            pos: 0,
        };
        let n = r.u32()? as usize;
        let mut entries = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let block = r.string()?;
            if block != BATCH_NORM_STATS {
                block.parse::<Block>()?;
            }
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count = shape.iter().try_fold(1usize, |acc, d| acc.checked_mul(*d));
            let count = count.ok_or_else(|| Error::ShapeMismatch(format!("shape {shape:?}")))?;
            let values = r.f64s(count)?;
            entries.push(WeightEntry {
                block,
                name,
                shape,
                values,
            });
        }
        r.finish()?;
        Ok(Self { entries })
    }
}

pub fn save_weights(model: &PpgNet, path: &Path) -> Result<()> {
    write_atomic(path, &WeightsFile::from_model(model).encode())
}

pub fn read_weights(path: &Path) -> Result<WeightsFile> {
    WeightsFile::decode(&read_file(path)?)
}

/// Loads a weights file into `model`, checking names and shapes against it.
pub fn load_weights(model: &mut PpgNet, path: &Path) -> Result<()> {
    read_weights(path)?.apply_to(model)
}
