//! Recording → labelled, normalized 8 s windows.
//!
//! The PPG is linearly resampled to 125 Hz and cut into 8 s windows every 2 s.
//! Each window is bandpass filtered (0.5–5 Hz, zero phase), and all windows of
//! a subject are z-scored together. Labels are the mean ECG heart rate over
//! the same span. Windows without a label, or with one outside the accepted
//! band, are dropped and counted.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::dataio::{label_in_band, Recording, Window, WindowedDataset, WINDOW_LEN, WINDOW_RATE_HZ};
use crate::dsp::{design_bandpass, filter_zero_phase, normalize_per_subject, normalize_window, resample_linear, segment_windows, WindowSpec};
use crate::groundtruth::{detect_r_peaks, mean_hr_bpm, MIN_ECG_S};
use crate::{Error, Result};

/// Which statistics z-score a window.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationSource {
    /// Mean and standard deviation pooled over all of the subject's windows.
    #[default]
    SubjectPooled,
    /// Each window's own statistics (no information shared across windows).
    PerWindow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareOptions {
    pub low_hz: f64,
    pub high_hz: f64,
    pub filter_order: usize,
    pub window_s: f64,
    pub shift_s: f64,
    pub normalization: NormalizationSource,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            low_hz: 0.5,
            high_hz: 5.0,
            filter_order: 2,
            window_s: 8.0,
            shift_s: 2.0,
            normalization: NormalizationSource::SubjectPooled,
        }
    }
}

impl PrepareOptions {
    fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            rate_hz: WINDOW_RATE_HZ,
            window_s: self.window_s,
            shift_s: self.shift_s,
        }
    }
}

/// Window accounting of one or more prepared recordings.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PrepareCounts {
    pub segmented: usize,
    pub kept: usize,
    pub dropped_unlabelled: usize,
    pub dropped_out_of_band: usize,
}

impl PrepareCounts {
    pub fn dropped(&self) -> usize {
        self.dropped_unlabelled + self.dropped_out_of_band
    }

    fn add(&mut self, other: PrepareCounts) {
        self.segmented += other.segmented;
        self.kept += other.kept;
        self.dropped_unlabelled += other.dropped_unlabelled;
        self.dropped_out_of_band += other.dropped_out_of_band;
    }
}

/// Prepares one subject. Window indices count all segmented windows, so they
/// stay stable when some are dropped.
pub fn prepare_recording(rec: &Recording, opts: &PrepareOptions) -> Result<(WindowedDataset, PrepareCounts)> {
    rec.validate()?;
    let spec = opts.window_spec();
    if spec.window_len() != WINDOW_LEN {
        return Err(Error::InvalidArgument(format!(
            "windows of {} s give {} samples, expected {WINDOW_LEN}",
            opts.window_s,
            spec.window_len()
        )));
    }
    let ppg = resample_linear(&rec.ppg, rec.ppg_rate_hz, WINDOW_RATE_HZ)?;
    let segments = segment_windows(&ppg, &spec)?;
    let mut counts = PrepareCounts {
        segmented: segments.len(),
        ..Default::default()
    };
    if segments.is_empty() {
        warn!(
            "{}: {:.1} s recording is shorter than one {} s window",
            rec.subject_id,
            rec.duration_s(),
            opts.window_s
        );
        return Ok((WindowedDataset::default(), counts));
    }

    let peaks = if rec.ecg.len() as f64 >= MIN_ECG_S * rec.ecg_rate_hz {
        match detect_r_peaks(&rec.ecg, rec.ecg_rate_hz) {
            Ok(p) => Some(p),
            Err(Error::NoPeaks) => None,
            Err(e) => return Err(e),
        }
    } else {
        None
    };

    let band = design_bandpass(opts.low_hz, opts.high_hz, opts.filter_order, WINDOW_RATE_HZ)?;
    let mut kept = Vec::new();
    for (i, seg) in segments.iter().enumerate() {
        let label = peaks.as_ref().and_then(|p| mean_hr_bpm(p, spec.start_s(i), opts.window_s));
        match label {
            None => counts.dropped_unlabelled += 1,
            Some(bpm) if !label_in_band(bpm) => counts.dropped_out_of_band += 1,
            Some(bpm) => kept.push((i, bpm, filter_zero_phase(seg, &band)?)),
        }
    }
    counts.kept = kept.len();
    if counts.dropped() > 0 {
        warn!(
            "{}: dropped {} of {} windows ({} without a label, {} outside the label band)",
            rec.subject_id,
            counts.dropped(),
            counts.segmented,
            counts.dropped_unlabelled,
            counts.dropped_out_of_band
        );
    }
    if kept.is_empty() {
        return Ok((WindowedDataset::default(), counts));
    }

    let filtered: Vec<Vec<f64>> = kept.iter().map(|(_, _, w)| w.clone()).collect();
    let normalized = match opts.normalization {
        NormalizationSource::SubjectPooled => normalize_per_subject(&filtered)?,
        NormalizationSource::PerWindow => filtered.iter().map(|w| normalize_window(w)).collect::<Result<_>>()?,
    };
    let windows = kept
        .into_iter()
        .zip(normalized)
        .map(|((i, bpm, _), samples)| Window {
            samples,
            label_bpm: bpm,
            subject_id: rec.subject_id.clone(),
            window_index: i,
        })
        .collect();
    Ok((WindowedDataset::new(windows)?, counts))
}

/// Prepares several subjects into one dataset.
pub fn prepare_all(recs: &[Recording], opts: &PrepareOptions) -> Result<(WindowedDataset, PrepareCounts)> {
    let mut parts = Vec::with_capacity(recs.len());
    let mut total = PrepareCounts::default();
    for rec in recs {
        let (d, c) = prepare_recording(rec, opts)?;
        parts.push(d);
        total.add(c);
    }
    Ok((WindowedDataset::concat(parts)?, total))
}
