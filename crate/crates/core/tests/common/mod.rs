//! Fixtures shared by the integration tests.
#![allow(dead_code)]

use ppgnet::dataio::{Window, WindowedDataset, WINDOW_LEN};

/// `per_subject` windows for each of `subjects` subjects. Each window is a
/// sinusoid whose frequency tracks its label, so the data is learnable.
pub fn toy_dataset(subjects: usize, per_subject: usize) -> WindowedDataset {
    let windows = (0..subjects)
        .flat_map(|s| {
            (0..per_subject).map(move |w| {
                let bpm = 60.0 + ((s * 17 + w * 5) % 80) as f64;
                let hz = bpm / 60.0;
                Window {
                    samples: (0..WINDOW_LEN)
                        .map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / 125.0 + s as f64).sin())
                        .collect(),
                    label_bpm: bpm,
                    subject_id: format!("sub{s:02}"),
                    window_index: w,
                }
            })
        })
        .collect();
    WindowedDataset::new(windows).unwrap()
}

/// Closed-form magnitude of the analog Butterworth bandpass, evaluated at the
/// analog frequency the bilinear transform maps `f` to. Shares nothing with
/// the pole/zero construction in the library.
pub fn oracle_magnitude(f: f64, low: f64, high: f64, order: usize, fs: f64) -> f64 {
    let warp = |f: f64| 2.0 * fs * (std::f64::consts::PI * f / fs).tan();
    let (wl, wh, w) = (warp(low), warp(high), warp(f));
    if w == 0.0 {
        return 0.0;
    }
    let lowpass_freq = (w * w - wl * wh) / (w * (wh - wl));
    1.0 / (1.0 + lowpass_freq.powi(2 * order as i32)).sqrt()
}

/// Largest deviation between the designed and the oracle magnitude on a
/// 1024-point grid from DC to Nyquist.
pub fn max_filter_deviation(low: f64, high: f64, order: usize, fs: f64) -> f64 {
    let design = ppgnet::dsp::design_bandpass(low, high, order, fs).unwrap();
    (0..1024)
        .map(|i| i as f64 * (fs / 2.0) / 1024.0)
        .map(|f| (design.magnitude(f) - oracle_magnitude(f, low, high, order, fs)).abs())
        .fold(0.0, f64::max)
}

pub fn tone(freq: f64, fs: f64, n: usize, phase: f64) -> Vec<f64> {
    (0..n)
        .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs + phase).sin())
        .collect()
}

/// Peak amplitude away from the edges, where start-up transients live.
pub fn central_peak(x: &[f64]) -> f64 {
    let skip = x.len() / 10;
    x[skip..x.len() - skip].iter().fold(0.0f64, |m, v| m.max(v.abs()))
}
