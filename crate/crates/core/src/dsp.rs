//! Signal conditioning for wrist PPG: linear resampling, sliding windows,
//! zero-phase Butterworth bandpass filtering and per-subject z-scoring.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::{Error, Result};

/// One second-order section `(b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    pub fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + self.b[1] * z_inv + self.b[2] * z2) / (1.0 + self.a[0] * z_inv + self.a[1] * z2)
    }

    /// Roots of `z² + a1 z + a2`.
    pub fn poles(&self) -> [Complex64; 2] {
        let (a1, a2) = (self.a[0], self.a[1]);
        let disc = Complex64::new(a1 * a1 - 4.0 * a2, 0.0).sqrt();
        [(-a1 + disc) / 2.0, (-a1 - disc) / 2.0]
    }
}

/// A digital Butterworth bandpass as a cascade of second-order sections.
#[derive(Clone, Debug, PartialEq)]
pub struct FilterCoefficients {
    pub sections: Vec<Biquad>,
    pub low_hz: f64,
    pub high_hz: f64,
    /// Order of the lowpass prototype; the bandpass has twice as many poles.
    pub prototype_order: usize,
    pub sample_rate_hz: f64,
}

impl FilterCoefficients {
    /// Complex frequency response of the cascade at `freq_hz`.
    pub fn response(&self, freq_hz: f64) -> Complex64 {
        let w = 2.0 * PI * freq_hz / self.sample_rate_hz;
        let z_inv = Complex64::from_polar(1.0, -w);
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(z_inv))
    }

    pub fn magnitude(&self, freq_hz: f64) -> f64 {
        self.response(freq_hz).norm()
    }

    /// Shortest signal [`filter_zero_phase`] accepts: three times the filter order.
    pub fn min_len(&self) -> usize {
        3 * 2 * self.prototype_order
    }

    /// Samples until the slowest pole has decayed by twelve orders of magnitude.
    pub fn impulse_len(&self) -> usize {
        let radius = self
            .sections
            .iter()
            .flat_map(|s| s.poles())
            .fold(0.0f64, |r, p| r.max(p.norm()));
        if radius <= 0.0 {
            return 1;
        }
        ((1e-12f64.ln() / radius.ln()).ceil() as usize).max(1)
    }

    pub fn is_stable(&self) -> bool {
        self.sections
            .iter()
            .all(|s| s.poles().iter().all(|p| p.norm() < 1.0))
    }
}

/// Butterworth bandpass from an order-`prototype_order` analog lowpass, shifted
/// to the band and mapped to the z-plane by the bilinear transform with both
/// edges prewarped. Unity gain at the (warped) band centre.
pub fn design_bandpass(
    low_hz: f64,
    high_hz: f64,
    prototype_order: usize,
    sample_rate_hz: f64,
) -> Result<FilterCoefficients> {
    let valid = low_hz > 0.0 && low_hz < high_hz && high_hz < sample_rate_hz / 2.0;
    if !valid || !sample_rate_hz.is_finite() {
        return Err(Error::BandEdges {
            low_hz,
            high_hz,
            sample_rate_hz,
        });
    }
    if prototype_order < 1 {
        return Err(Error::InvalidArgument("filter order must be at least 1".into()));
    }
    let n = prototype_order;
    let fs2 = 2.0 * sample_rate_hz;
    let warp = |f: f64| fs2 * (PI * f / sample_rate_hz).tan();
    let (wl, wh) = (warp(low_hz), warp(high_hz));
    let (bw, w0) = (wh - wl, (wl * wh).sqrt());

    // Lowpass prototype poles on the unit circle, left half-plane.
    let prototype = (0..n).map(|k| {
        let theta = PI * (2 * k + n + 1) as f64 / (2 * n) as f64;
        Complex64::from_polar(1.0, theta)
    });
    // Each prototype pole p splits into the two roots of s² − p·bw·s + w0².
    let mut analog = Vec::with_capacity(2 * n);
    for p in prototype {
        let q = p * bw / 2.0;
        let d = (q * q - w0 * w0).sqrt();
        analog.push(q + d);
        analog.push(q - d);
    }
    let digital: Vec<Complex64> = analog.iter().map(|s| (fs2 + s) / (fs2 - s)).collect();
    // n zeros at s = 0 map to z = 1, n zeros at infinity map to z = −1.
    let gain = analog
        .iter()
        .fold(Complex64::new((bw * fs2).powi(n as i32), 0.0), |acc, s| acc / (fs2 - s))
        .re;

    let sections = pair_conjugates(&digital)
        .into_iter()
        .enumerate()
        .map(|(i, (p1, p2))| {
            let k = if i == 0 { gain } else { 1.0 };
            Biquad {
                b: [k, 0.0, -k],
                a: [-(p1 + p2).re, (p1 * p2).re],
            }
        })
        .collect();
    Ok(FilterCoefficients {
        sections,
        low_hz,
        high_hz,
        prototype_order,
        sample_rate_hz,
    })
}

/// Groups poles into conjugate pairs (or pairs of real poles).
fn pair_conjugates(poles: &[Complex64]) -> Vec<(Complex64, Complex64)> {
    const IMAG_EPS: f64 = 1e-12;
    let mut upper: Vec<Complex64> = poles.iter().copied().filter(|p| p.im > IMAG_EPS).collect();
    let mut real: Vec<Complex64> = poles
        .iter()
        .copied()
        .filter(|p| p.im.abs() <= IMAG_EPS)
        .map(|p| Complex64::new(p.re, 0.0))
        .collect();
    upper.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
    real.sort_by(|a, b| a.re.total_cmp(&b.re));
    let mut pairs: Vec<(Complex64, Complex64)> = upper.iter().map(|p| (*p, p.conj())).collect();
    pairs.extend(real.chunks(2).map(|c| (c[0], c[c.len() - 1])));
    pairs
}

/// Runs the cascade in place from transposed direct-form II state `state`
/// (two entries per section, in section order).
fn run_cascade(sections: &[Biquad], x: &mut [f64], state: &[f64]) {
    for (s, z) in sections.iter().zip(state.chunks_exact(2)) {
        let (mut z1, mut z2) = (z[0], z[1]);
        for v in x.iter_mut() {
            let input = *v;
            let y = s.b[0] * input + z1;
            z1 = s.b[1] * input - s.a[0] * y + z2;
            z2 = s.b[2] * input - s.a[1] * y;
            *v = y;
        }
    }
}

fn filtered(sections: &[Biquad], x: &[f64], state: &[f64]) -> Vec<f64> {
    let mut y = x.to_vec();
    run_cascade(sections, &mut y, state);
    y
}

fn reversed(x: &[f64]) -> Vec<f64> {
    x.iter().rev().copied().collect()
}

/// Forward-backward filtering, giving zero phase and the squared magnitude
/// response.
///
/// Edge transients are suppressed by choosing the initial states of both
/// passes so that forward-backward and backward-forward filtering agree in the
/// least-squares sense (Gustafsson's method). Unlike edge extension this
/// keeps the slow 0.5 Hz poles from ringing into the centre of short windows.
pub fn filter_zero_phase(signal: &[f64], coeffs: &FilterCoefficients) -> Result<Vec<f64>> {
    let n = signal.len();
    let needed = coeffs.min_len().max(2);
    if n < needed {
        return Err(Error::SignalTooShort { needed, got: n });
    }
    // Every section has a zero at z = 1, so a straight line is annihilated in
    // steady state; removing it first keeps offsets and drift out of the edges.
    let signal = &detrend_linear(signal);
    let sections = &coeffs.sections;
    let order = 2 * sections.len();
    let zero = vec![0.0; order];
    // Beyond the impulse-response length the edge states no longer interact.
    let m = match coeffs.impulse_len() {
        len if n > 2 * len => len,
        _ => n,
    };

    // Column k of `obs`: zero-input response to unit initial state k.
    // Column k of `s`: that response reversed and filtered from rest.
    let mut basis = zero.clone();
    let mut obs = Vec::with_capacity(order);
    let mut s = Vec::with_capacity(order);
    for k in 0..order {
        basis[k] = 1.0;
        let o = filtered(sections, &vec![0.0; m], &basis);
        basis[k] = 0.0;
        s.push(filtered(sections, &reversed(&o), &zero));
        obs.push(o);
    }

    let y_fb = reversed(&filtered(sections, &reversed(&filtered(sections, signal, &zero)), &zero));
    let y_bf = filtered(sections, &reversed(&filtered(sections, &reversed(signal), &zero)), &zero);
    let delta: Vec<f64> = y_bf.iter().zip(&y_fb).map(|(a, b)| a - b).collect();

    let rows = if m == n { n } else { 2 * m };
    let mut mat = DMatrix::<f64>::zeros(rows, 2 * order);
    for k in 0..order {
        for i in 0..m {
            // [S^R − O | O^R − S], split into head and tail blocks when truncated.
            let head = s[k][m - 1 - i] - obs[k][i];
            let tail = obs[k][m - 1 - i] - s[k][i];
            mat[(i, k)] = head;
            let r = if m == n { i } else { m + i };
            mat[(r, order + k)] = tail;
        }
    }
    let rhs = if m == n {
        DVector::from_column_slice(&delta)
    } else {
        DVector::from_iterator(2 * m, delta[..m].iter().chain(&delta[n - m..]).copied())
    };
    let ic = mat
        .svd(true, true)
        .solve(&rhs, 1e-14)
        .map_err(|e| Error::InvalidArgument(format!("edge conditions: {e}")))?;
    let (zi_f, zi_b) = ic.as_slice().split_at(order);

    let forward = filtered(sections, signal, zi_f);
    Ok(reversed(&filtered(sections, &reversed(&forward), zi_b)))
}

/// Residual of a least-squares straight-line fit.
fn detrend_linear(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let t_mean = (n - 1.0) / 2.0;
    let x_mean = x.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in x.iter().enumerate() {
        let dt = i as f64 - t_mean;
        sxy += dt * (v - x_mean);
        sxx += dt * dt;
    }
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    x.iter()
        .enumerate()
        .map(|(i, v)| v - x_mean - slope * (i as f64 - t_mean))
        .collect()
}

/// Linear interpolation onto a new uniform grid starting at the same instant.
/// Output sample `j` sits at `j / to_hz` seconds; instants past the last input
/// sample extend the final segment.
pub fn resample_linear(signal: &[f64], from_hz: f64, to_hz: f64) -> Result<Vec<f64>> {
    if signal.is_empty() {
        return Err(Error::Empty("signal to resample".into()));
    }
    for rate in [from_hz, to_hz] {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::InvalidRate(rate));
        }
    }
    if from_hz == to_hz {
        return Ok(signal.to_vec());
    }
    let n = signal.len();
    let m = (n as f64 * to_hz / from_hz).round() as usize;
    if n == 1 {
        return Ok(vec![signal[0]; m]);
    }
    Ok((0..m)
        .map(|j| {
            let pos = j as f64 * from_hz / to_hz;
            let i = (pos.floor() as usize).min(n - 2);
            let frac = pos - i as f64;
            signal[i] + (signal[i + 1] - signal[i]) * frac
        })
        .collect())
}

/// Sliding-window geometry.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    pub rate_hz: f64,
    pub window_s: f64,
    pub shift_s: f64,
}

impl Default for WindowSpec {
    fn default() -> Self {
        Self {
            rate_hz: 125.0,
            window_s: 8.0,
            shift_s: 2.0,
        }
    }
}

impl WindowSpec {
    pub fn window_len(&self) -> usize {
        (self.window_s * self.rate_hz).round() as usize
    }

    pub fn shift_len(&self) -> usize {
        (self.shift_s * self.rate_hz).round() as usize
    }

    /// `floor((len − window) / shift) + 1`, or 0 when the signal is shorter than a window.
    pub fn count(&self, len: usize) -> usize {
        let w = self.window_len();
        if len < w {
            0
        } else {
            (len - w) / self.shift_len() + 1
        }
    }

    /// Start time of window `i` in seconds.
    pub fn start_s(&self, i: usize) -> f64 {
        (i * self.shift_len()) as f64 / self.rate_hz
    }
}

/// Borrowed windows of `spec.window_len()` samples; window `i` starts at
/// sample `i · spec.shift_len()`.
pub fn segment_windows<'a>(signal: &'a [f64], spec: &WindowSpec) -> Result<Vec<&'a [f64]>> {
    let valid = [spec.rate_hz, spec.window_s, spec.shift_s]
        .iter()
        .all(|v| *v > 0.0 && v.is_finite());
    if !valid || spec.window_len() == 0 || spec.shift_len() == 0 {
        return Err(Error::InvalidArgument(format!("window geometry {spec:?}")));
    }
    let (w, s) = (spec.window_len(), spec.shift_len());
    Ok((0..spec.count(signal.len()))
        .map(|i| &signal[i * s..i * s + w])
        .collect())
}

/// Pooled mean and population standard deviation over all windows.
pub fn pooled_stats(windows: &[Vec<f64>]) -> Result<(f64, f64)> {
    let count: usize = windows.iter().map(Vec::len).sum();
    if count == 0 {
        return Err(Error::Empty("windows to normalize".into()));
    }
    let mean = windows.iter().flatten().sum::<f64>() / count as f64;
    let var = windows.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / count as f64;
    let std = var.sqrt();
    if !(std > f64::EPSILON * mean.abs().max(1.0)) {
        return Err(Error::ZeroVariance);
    }
    Ok((mean, std))
}

/// Z-scores all windows of one subject with the subject's pooled statistics.
pub fn normalize_per_subject(windows: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let (mean, std) = pooled_stats(windows)?;
    Ok(windows
        .iter()
        .map(|w| w.iter().map(|v| (v - mean) / std).collect())
        .collect())
}

/// Z-scores one window with its own statistics.
pub fn normalize_window(window: &[f64]) -> Result<Vec<f64>> {
    let mut out = normalize_per_subject(&[window.to_vec()])?;
    Ok(out.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * freq * i as f64 / rate).sin()).collect()
    }

    fn central_peak(x: &[f64]) -> f64 {
        let n = x.len();
        x[n / 10..n - n / 10].iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    fn db(x: f64) -> f64 {
        20.0 * x.log10()
    }

    #[test]
    fn default_design_is_stable_with_unit_centre_and_3db_edges() {
        let f = design_bandpass(0.5, 5.0, 2, 125.0).unwrap();
        assert_eq!(f.sections.len(), 2);
        assert!(f.is_stable());
        assert!(db(f.magnitude((0.5f64 * 5.0).sqrt())).abs() < 1.0);
        let edge = db(0.5f64.sqrt());
        assert!((db(f.magnitude(0.5)) - edge).abs() < 0.5);
        assert!((db(f.magnitude(5.0)) - edge).abs() < 0.5);
    }

    #[test]
    fn dc_is_blocked_exactly_and_nyquist_is_negligible() {
        for (lo, hi, order, fs) in [(0.5, 5.0, 2, 125.0), (5.0, 15.0, 1, 400.0), (1.0, 40.0, 3, 100.0)] {
            let f = design_bandpass(lo, hi, order, fs).unwrap();
            assert_eq!(f.magnitude(0.0), 0.0);
            assert!(f.magnitude(fs / 2.0) <= 1e-3);
            assert!(f.is_stable());
        }
    }

    #[test]
    fn band_edges_and_order_are_validated() {
        assert!(matches!(design_bandpass(5.0, 0.5, 2, 125.0), Err(Error::BandEdges { .. })));
        assert!(design_bandpass(0.0, 5.0, 2, 125.0).is_err());
        assert!(design_bandpass(0.5, 62.5, 2, 125.0).is_err());
        assert!(design_bandpass(0.5, 5.0, 0, 125.0).is_err());
    }

    #[test]
    fn constant_input_is_removed() {
        let f = design_bandpass(0.5, 5.0, 2, 125.0).unwrap();
        let y = filter_zero_phase(&[5.0; 1000], &f).unwrap();
        assert_eq!(y.len(), 1000);
        assert!(y.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn passband_tone_survives_and_stopband_tone_is_attenuated() {
        let f = design_bandpass(0.5, 5.0, 2, 125.0).unwrap();
        let pass = filter_zero_phase(&tone(2.0, 125.0, 1000), &f).unwrap();
        assert!((central_peak(&pass) - 1.0).abs() < 0.05);
        let stop = filter_zero_phase(&tone(20.0, 125.0, 1000), &f).unwrap();
        assert!(central_peak(&stop) <= 0.1);
        // The forward-backward pass applies |H|² exactly for a steady tone.
        let want = f.magnitude(20.0).powi(2);
        assert!((central_peak(&stop) - want).abs() < 0.02);
    }

    #[test]
    fn offset_and_drift_do_not_disturb_the_edges() {
        let f = design_bandpass(0.5, 5.0, 2, 125.0).unwrap();
        let clean = tone(2.0, 125.0, 1000);
        let x: Vec<f64> = clean.iter().enumerate().map(|(i, v)| v + 300.0 - 0.05 * i as f64).collect();
        let y = filter_zero_phase(&x, &f).unwrap();
        let want = filter_zero_phase(&clean, &f).unwrap();
        for (a, b) in y.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn tone_gain_does_not_depend_on_phase() {
        let f = design_bandpass(0.5, 5.0, 2, 125.0).unwrap();
        for k in 0..8 {
            let phase = k as f64 * PI / 4.0;
            let shifted = |freq: f64| -> Vec<f64> {
                (0..1000).map(|i| (2.0 * PI * freq * i as f64 / 125.0 + phase).sin()).collect()
            };
            let pass = central_peak(&filter_zero_phase(&shifted(2.0), &f).unwrap());
            assert!((pass - 1.0).abs() < 0.05, "phase {phase}: {pass}");
            let stop = central_peak(&filter_zero_phase(&shifted(20.0), &f).unwrap());
            assert!(stop <= 0.1, "phase {phase}: {stop}");
        }
    }

    #[test]
    fn zero_phase_keeps_peaks_in_place() {
        let f = design_bandpass(0.5, 5.0, 2, 125.0).unwrap();
        let x = tone(1.25, 125.0, 1000);
        let y = filter_zero_phase(&x, &f).unwrap();
        // Peaks of sin(2π·1.25·t) are every 100 samples starting at 25.
        for peak in (225..800).step_by(100) {
            let local = (peak - 5..=peak + 5).max_by(|a, b| y[*a].total_cmp(&y[*b])).unwrap();
            assert_eq!(local, peak);
        }
    }

    #[test]
    fn filtering_twice_squares_the_magnitude_again() {
        let f = design_bandpass(0.5, 5.0, 2, 125.0).unwrap();
        for freq in [1.0, 2.0, 4.0, 6.0, 8.0] {
            let x = tone(freq, 125.0, 2000);
            let once = filter_zero_phase(&x, &f).unwrap();
            let twice = filter_zero_phase(&once, &f).unwrap();
            let want = f.magnitude(freq).powi(4);
            let got = central_peak(&twice);
            assert!((got - want).abs() <= 0.1 * want, "{freq} Hz: {got} vs {want}");
        }
    }

    #[test]
    fn short_signal_is_rejected() {
        let f = design_bandpass(0.5, 5.0, 2, 125.0).unwrap();
        assert!(matches!(
            filter_zero_phase(&[1.0; 11], &f),
            Err(Error::SignalTooShort { needed: 12, got: 11 })
        ));
        assert!(filter_zero_phase(&[1.0; 12], &f).is_ok());
    }

    #[test]
    fn resampling_lengths_and_identities() {
        let x: Vec<f64> = (0..500).map(|i| (i as f64 * 0.1).sin()).collect();
        assert_eq!(resample_linear(&x, 50.0, 125.0).unwrap().len(), 1250);
        assert_eq!(resample_linear(&x, 125.0, 125.0).unwrap(), x);
        let c = resample_linear(&[3.5; 40], 50.0, 125.0).unwrap();
        assert!(c.iter().all(|v| *v == 3.5));
        assert!(resample_linear(&[], 50.0, 125.0).is_err());
        assert!(resample_linear(&[1.0], 0.0, 125.0).is_err());
    }

    #[test]
    fn resampled_ramp_stays_on_the_line() {
        let n = 101;
        let ramp: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
        let y = resample_linear(&ramp, 50.0, 125.0).unwrap();
        for (j, v) in y.iter().enumerate() {
            let t = j as f64 * 50.0 / 125.0;
            assert!((v - t / (n - 1) as f64).abs() < 1e-12);
        }
        assert!(y[0].abs() < 1e-12);
    }

    #[test]
    fn window_counts() {
        let spec = WindowSpec::default();
        assert_eq!(spec.window_len(), 1000);
        let x = vec![0.0; 300 * 125];
        let w = segment_windows(&x, &spec).unwrap();
        assert_eq!(w.len(), 147);
        assert!(w.iter().all(|w| w.len() == 1000));
        assert_eq!(segment_windows(&x[..1000], &spec).unwrap().len(), 1);
        assert_eq!(segment_windows(&x[..875], &spec).unwrap().len(), 0);
    }

    #[test]
    fn windows_are_exact_slices() {
        let x: Vec<f64> = (0..5000).map(|i| (i as f64).sqrt()).collect();
        let spec = WindowSpec::default();
        for (i, w) in segment_windows(&x, &spec).unwrap().iter().enumerate() {
            for (k, v) in w.iter().enumerate() {
                assert_eq!(v.to_bits(), x[i * 250 + k].to_bits());
            }
        }
    }

    #[test]
    fn subject_normalization() {
        // Pooled mean 5, population std 2.
        let w = vec![vec![3.0, 7.0], vec![3.0, 7.0, 5.0 + 2.0, 5.0 - 2.0]];
        let z = normalize_per_subject(&w).unwrap();
        let all: Vec<f64> = z.iter().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64;
        assert!(mean.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9);
        let again = normalize_per_subject(&z).unwrap();
        for (a, b) in again.iter().flatten().zip(z.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(matches!(normalize_per_subject(&[vec![2.0; 50]]), Err(Error::ZeroVariance)));
    }
}
