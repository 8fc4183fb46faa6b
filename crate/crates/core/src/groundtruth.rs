//! Reference heart rate from the ECG: R-peak detection and per-window mean rate.
//!
//! The detector is a simplified Pan-Tompkins chain: a 5–15 Hz zero-phase
//! bandpass, a centred derivative, squaring, a centred 150 ms moving-window
//! integral, and an adaptive signal/noise threshold with a 240 ms refractory
//! period. Each detection is then moved to the largest raw ECG sample within
//! ±75 ms. Every stage is homogeneous in the input amplitude, so detections
//! do not change when the ECG is scaled by a positive constant.

use crate::dsp::{design_bandpass, filter_zero_phase};
use crate::{Error, Result};

/// Shortest ECG accepted by [`detect_r_peaks`], in seconds.
pub const MIN_ECG_S: f64 = 3.0;
/// Minimum spacing of consecutive beats (250 BPM).
pub const REFRACTORY_S: f64 = 0.24;

const INTEGRATION_S: f64 = 0.150;
const REFINE_S: f64 = 0.075;
const LEARNING_S: f64 = 2.0;

/// Strictly increasing R-peak sample indices at least [`REFRACTORY_S`] apart.
#[derive(Clone, Debug, PartialEq)]
pub struct PeakTrain {
    indices: Vec<usize>,
    rate_hz: f64,
}

fn refractory_samples(rate_hz: f64) -> usize {
    (REFRACTORY_S * rate_hz - 1e-9).ceil() as usize
}

impl PeakTrain {
    pub fn new(indices: Vec<usize>, rate_hz: f64) -> Result<Self> {
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(Error::InvalidRate(rate_hz));
        }
        let gap = refractory_samples(rate_hz);
        if indices.windows(2).any(|p| p[1] < p[0] + gap) {
            return Err(Error::InvalidArgument(format!(
                "peaks must be increasing and at least {REFRACTORY_S} s apart"
            )));
        }
        Ok(Self { indices, rate_hz })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Peak instants in seconds.
    pub fn times_s(&self) -> impl Iterator<Item = f64> + '_ {
        self.indices.iter().map(move |&i| i as f64 / self.rate_hz)
    }
}

/// Locates R-peaks in `ecg` sampled at `rate_hz` (which must exceed 30 Hz so
/// the 15 Hz band edge lies below Nyquist).
pub fn detect_r_peaks(ecg: &[f64], rate_hz: f64) -> Result<PeakTrain> {
    if !(rate_hz > 0.0 && rate_hz.is_finite()) {
        return Err(Error::InvalidRate(rate_hz));
    }
    let needed = (MIN_ECG_S * rate_hz).ceil() as usize;
    if ecg.len() < needed {
        return Err(Error::SignalTooShort {
            needed,
            got: ecg.len(),
        });
    }
    let band = design_bandpass(5.0, 15.0, 2, rate_hz)?;
    let filtered = filter_zero_phase(ecg, &band)?;
    let n = filtered.len();

    let energy: Vec<f64> = (0..n)
        .map(|i| {
            let d = (filtered[(i + 1).min(n - 1)] - filtered[i.saturating_sub(1)]) * rate_hz / 2.0;
            d * d
        })
        .collect();
    let mwi = moving_average(&energy, ((INTEGRATION_S * rate_hz).round() as usize).max(1));

    let refractory = refractory_samples(rate_hz);
    let learn = ((LEARNING_S * rate_hz) as usize).min(n);
    let head = &mwi[..learn];
    let mut spki = head.iter().fold(0.0f64, |m, v| m.max(*v)) / 3.0;
    let mut npki = head.iter().sum::<f64>() / learn as f64 / 2.0;
    if !(spki > 0.0) {
        return Err(Error::NoPeaks);
    }

    let mut detected: Vec<usize> = Vec::new();
    for i in local_maxima(&mwi) {
        let v = mwi[i];
        let threshold = npki + 0.25 * (spki - npki);
        if v <= threshold {
            npki = 0.125 * v + 0.875 * npki;
            continue;
        }
        match detected.last_mut() {
            Some(last) if i < *last + refractory => {
                if v > mwi[*last] {
                    *last = i;
                }
            }
            _ => detected.push(i),
        }
        spki = 0.125 * v + 0.875 * spki;
    }

    let reach = (REFINE_S * rate_hz).round() as usize;
    let mut peaks: Vec<usize> = Vec::with_capacity(detected.len());
    for i in detected {
        let lo = i.saturating_sub(reach);
        let hi = (i + reach).min(ecg.len() - 1);
        let r = (lo..=hi).fold(lo, |best, j| if ecg[j] > ecg[best] { j } else { best });
        match peaks.last_mut() {
            Some(last) if r < *last + refractory => {
                if ecg[r] > ecg[*last] {
                    *last = r;
                }
            }
            _ => peaks.push(r),
        }
    }
    if peaks.is_empty() {
        return Err(Error::NoPeaks);
    }
    PeakTrain::new(peaks, rate_hz)
}

/// Centred moving average of odd-ised width `width`, shrinking at the edges.
fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut prefix = Vec::with_capacity(x.len() + 1);
    prefix.push(0.0);
    for v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..x.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(x.len());
            (prefix[hi] - prefix[lo]) / (hi - lo) as f64
        })
        .collect()
}

/// Indices of local maxima; a plateau contributes its first sample.
fn local_maxima(x: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < x.len() {
        if x[i] > x[i - 1] {
            let mut j = i;
            while j + 1 < x.len() && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < x.len() && x[j + 1] < x[i] {
                out.push(i);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// `60 / mean(RR)` over the RR intervals whose midpoint lies in
/// `[window_start_s, window_start_s + window_len_s)`. Absent when fewer than
/// two peaks fall inside the window.
pub fn mean_hr_bpm(peaks: &PeakTrain, window_start_s: f64, window_len_s: f64) -> Option<f64> {
    let end = window_start_s + window_len_s;
    let inside = |t: f64| t >= window_start_s && t < end;
    let times: Vec<f64> = peaks.times_s().collect();
    if times.iter().filter(|t| inside(**t)).count() < 2 {
        return None;
    }
    let rr: Vec<f64> = times
        .windows(2)
        .filter(|p| inside((p[0] + p[1]) / 2.0))
        .map(|p| p[1] - p[0])
        .collect();
    if rr.is_empty() {
        return None;
    }
    Some(60.0 * rr.len() as f64 / rr.iter().sum::<f64>())
}
