//! Paired synthetic PPG/ECG recordings with a planted heart-rate profile.
//!
//! The cardiac phase is `φ(t) = 2π∫₀ᵗ bpm(τ)/60 dτ`, integrated in closed form
//! over a piecewise-linear rate profile. The PPG (50 Hz) is a two-harmonic
//! pulse wave plus slow baseline wander, band-limited motion-artifact bursts
//! and white noise. The ECG (400 Hz) is a train of narrow Gaussian pulses
//! centred on each beat `φ = 2πk`. The constants are generator choices, not
//! physiology: they land inside the 0.5–5 Hz analysis band so that the
//! artifacts actually compete with the pulse.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::Recording;
use crate::{Error, Result};

pub const PPG_RATE_HZ: f64 = 50.0;
pub const ECG_RATE_HZ: f64 = 400.0;
pub const BPM_BOUNDS: (f64, f64) = (40.0, 180.0);

const SECOND_HARMONIC: f64 = 0.3;
const SECOND_HARMONIC_PHASE: f64 = 0.5;
const WANDER_AMPLITUDE: f64 = 0.2;
const WANDER_HZ: f64 = 0.1;
const ECG_PULSE_SIGMA_S: f64 = 0.010;
const ARTIFACT_BAND_HZ: (f64, f64) = (0.5, 3.0);
/// Mean spacing between artifact bursts.
const ARTIFACT_SPACING_S: f64 = 20.0;
const ARTIFACT_DURATION_S: (f64, f64) = (2.0, 6.0);
const ARTIFACT_TONES: usize = 3;

/// Piecewise-linear heart rate; constant before the first and after the last
/// breakpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct HrProfile {
    breakpoints: Vec<(f64, f64)>,
}

/// One linear piece `f(t) = f0 + slope·(t − t0)` in beats per second, with
/// `cycles0` beats completed at `t0`.
#[derive(Clone, Copy, Debug)]
struct Segment {
    t0: f64,
    f0: f64,
    slope: f64,
    cycles0: f64,
}

impl HrProfile {
    /// Breakpoints `(time_s, bpm)` with non-negative, strictly increasing
    /// times and rates inside [`BPM_BOUNDS`].
    pub fn new(breakpoints: Vec<(f64, f64)>) -> Result<Self> {
        if breakpoints.is_empty() {
            return Err(Error::InvalidArgument("heart-rate profile without breakpoints".into()));
        }
        for (i, &(t, bpm)) in breakpoints.iter().enumerate() {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::InvalidArgument(format!("breakpoint time {t}")));
            }
            if i > 0 && t <= breakpoints[i - 1].0 {
                return Err(Error::InvalidArgument("breakpoint times must increase".into()));
            }
            if !(BPM_BOUNDS.0..=BPM_BOUNDS.1).contains(&bpm) {
                return Err(Error::InvalidArgument(format!(
                    "rate {bpm} BPM outside [{}, {}]",
                    BPM_BOUNDS.0, BPM_BOUNDS.1
                )));
            }
        }
        Ok(Self { breakpoints })
    }

    pub fn constant(bpm: f64) -> Result<Self> {
        Self::new(vec![(0.0, bpm)])
    }

    pub fn breakpoints(&self) -> &[(f64, f64)] {
        &self.breakpoints
    }

    pub fn bpm_at(&self, t: f64) -> f64 {
        let seg = self.segment_at(&self.segments(), t);
        60.0 * (seg.f0 + seg.slope * (t - seg.t0))
    }

    /// Mean rate over `[start, end)`, i.e. planted beats divided by duration.
    pub fn mean_bpm(&self, start: f64, end: f64) -> f64 {
        let segs = self.segments();
        60.0 * (self.cycles_at(&segs, end) - self.cycles_at(&segs, start)) / (end - start)
    }

    fn segments(&self) -> Vec<Segment> {
        let mut pts = self.breakpoints.clone();
        if pts[0].0 > 0.0 {
            pts.insert(0, (0.0, pts[0].1));
        }
        let mut segs = Vec::with_capacity(pts.len());
        let mut cycles = 0.0;
        for (i, &(t0, bpm)) in pts.iter().enumerate() {
            let f0 = bpm / 60.0;
            let slope = match pts.get(i + 1) {
                Some(&(t1, bpm1)) => (bpm1 / 60.0 - f0) / (t1 - t0),
                None => 0.0,
            };
            segs.push(Segment {
                t0,
                f0,
                slope,
                cycles0: cycles,
            });
            if let Some(&(t1, _)) = pts.get(i + 1) {
                let dt = t1 - t0;
                cycles += f0 * dt + 0.5 * slope * dt * dt;
            }
        }
        segs
    }

    fn segment_at(&self, segs: &[Segment], t: f64) -> Segment {
        let i = segs.partition_point(|s| s.t0 <= t).max(1) - 1;
        segs[i]
    }

    fn cycles_at(&self, segs: &[Segment], t: f64) -> f64 {
        let s = self.segment_at(segs, t);
        let dt = t - s.t0;
        s.cycles0 + s.f0 * dt + 0.5 * s.slope * dt * dt
    }

    /// Instant of beat `k` (phase `2πk`), solved exactly on its segment.
    fn beat_time(&self, segs: &[Segment], k: f64) -> f64 {
        let i = segs.partition_point(|s| s.cycles0 <= k).max(1) - 1;
        let s = segs[i];
        let c = k - s.cycles0;
        // f0·dt + slope·dt²/2 = c, in the cancellation-free form.
        let disc = (s.f0 * s.f0 + 2.0 * s.slope * c).max(0.0);
        s.t0 + 2.0 * c / (s.f0 + disc.sqrt())
    }

    /// Planted beat instants in `(0, duration_s)`.
    pub fn beat_times(&self, duration_s: f64) -> Vec<f64> {
        let segs = self.segments();
        let total = self.cycles_at(&segs, duration_s);
        (1..)
            .map(|k| k as f64)
            .take_while(|k| *k < total)
            .map(|k| self.beat_time(&segs, k))
            .collect()
    }

    /// Cardiac phase `φ(t)` in radians.
    pub fn phase(&self, t: f64) -> f64 {
        2.0 * PI * self.cycles_at(&self.segments(), t)
    }

    fn phases(&self, rate_hz: f64, n: usize) -> Vec<f64> {
        let segs = self.segments();
        (0..n)
            .map(|i| 2.0 * PI * self.cycles_at(&segs, i as f64 / rate_hz))
            .collect()
    }
}

/// Band-limited motion artifact: Hann-windowed bursts of a few random tones in
/// [`ARTIFACT_BAND_HZ`], unit peak amplitude per burst.
fn artifact(rng: &mut ChaCha8Rng, duration_s: f64, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    let bursts = (duration_s / ARTIFACT_SPACING_S).ceil() as usize;
    for _ in 0..bursts {
        let len_s = rng.gen_range(ARTIFACT_DURATION_S.0..ARTIFACT_DURATION_S.1);
        let start_s = rng.gen_range(0.0..duration_s.max(f64::MIN_POSITIVE));
        let tones: Vec<(f64, f64)> = (0..ARTIFACT_TONES)
            .map(|_| {
                (
                    rng.gen_range(ARTIFACT_BAND_HZ.0..ARTIFACT_BAND_HZ.1),
                    rng.gen_range(0.0..2.0 * PI),
                )
            })
            .collect();
        let first = (start_s * PPG_RATE_HZ).ceil() as usize;
        let last = (((start_s + len_s) * PPG_RATE_HZ) as usize).min(n);
        for (i, v) in out.iter_mut().enumerate().take(last).skip(first) {
            let t = i as f64 / PPG_RATE_HZ;
            let envelope = (PI * (t - start_s) / len_s).sin().powi(2);
            let wave: f64 = tones.iter().map(|(f, p)| (2.0 * PI * f * t + p).sin()).sum();
            *v += envelope * wave / ARTIFACT_TONES as f64;
        }
    }
    out
}

/// One synthetic subject. PPG at 50 Hz, ECG at 400 Hz, both `duration_s` long.
pub fn synth_recording(
    subject_id: &str,
    duration_s: f64,
    profile: &HrProfile,
    noise_sigma: f64,
    artifact_level: f64,
    seed: u64,
) -> Result<Recording> {
    if !(duration_s > 8.0 && duration_s.is_finite()) {
        return Err(Error::InvalidArgument(format!("duration {duration_s} s must exceed 8 s")));
    }
    if !(noise_sigma >= 0.0 && artifact_level >= 0.0) {
        return Err(Error::InvalidArgument("noise and artifact levels must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_ppg = (duration_s * PPG_RATE_HZ).round() as usize;
    let n_ecg = (duration_s * ECG_RATE_HZ).round() as usize;

    let motion = artifact(&mut rng, duration_s, n_ppg);
    let noise = Normal::new(0.0, noise_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let ppg: Vec<f64> = profile
        .phases(PPG_RATE_HZ, n_ppg)
        .into_iter()
        .zip(motion)
        .enumerate()
        .map(|(i, (phi, m))| {
            let t = i as f64 / PPG_RATE_HZ;
            phi.sin()
                + SECOND_HARMONIC * (2.0 * phi + SECOND_HARMONIC_PHASE).sin()
                + WANDER_AMPLITUDE * (2.0 * PI * WANDER_HZ * t).sin()
                + artifact_level * m
                + noise.sample(&mut rng)
        })
        .collect();

    let mut ecg = vec![0.0; n_ecg];
    let reach = (5.0 * ECG_PULSE_SIGMA_S * ECG_RATE_HZ).ceil() as i64;
    for beat in profile.beat_times(duration_s + 5.0 * ECG_PULSE_SIGMA_S) {
        let centre = (beat * ECG_RATE_HZ).round() as i64;
        for j in (centre - reach).max(0)..(centre + reach + 1).min(n_ecg as i64) {
            let dt = j as f64 / ECG_RATE_HZ - beat;
            ecg[j as usize] += (-0.5 * (dt / ECG_PULSE_SIGMA_S).powi(2)).exp();
        }
    }
    Recording::new(subject_id, ppg, PPG_RATE_HZ, ecg, ECG_RATE_HZ)
}

/// Generator settings for [`synth_cohort_with`].
#[derive(Clone, Debug, PartialEq)]
pub struct CohortStyle {
    pub noise_sigma: f64,
    pub artifact_level: f64,
    /// Spacing of the random-walk breakpoints.
    pub step_s: f64,
    /// Standard deviation of the rate change between breakpoints.
    pub step_bpm: f64,
    /// Range of the starting rate.
    pub start_bpm: (f64, f64),
}

impl Default for CohortStyle {
    fn default() -> Self {
        Self {
            noise_sigma: 0.1,
            artifact_level: 0.3,
            step_s: 30.0,
            step_bpm: 10.0,
            start_bpm: (55.0, 120.0),
        }
    }
}

/// A seeded random-walk profile reflected into [`BPM_BOUNDS`].
pub fn random_profile(rng: &mut impl Rng, duration_s: f64, style: &CohortStyle) -> Result<HrProfile> {
    let step = Normal::new(0.0, style.step_bpm).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let (lo, hi) = BPM_BOUNDS;
    let mut bpm: f64 = rng.gen_range(style.start_bpm.0..=style.start_bpm.1);
    let mut points = vec![(0.0, bpm)];
    let mut t = 0.0;
    while t < duration_s {
        t += style.step_s;
        bpm += step.sample(rng);
        if bpm < lo {
            bpm = 2.0 * lo - bpm;
        }
        if bpm > hi {
            bpm = 2.0 * hi - bpm;
        }
        bpm = bpm.clamp(lo, hi);
        points.push((t, bpm));
    }
    HrProfile::new(points)
}

/// Subject ids used by the cohort generator.
pub fn subject_id(index: usize) -> String {
    format!("syn{:03}", index + 1)
}

/// `n` subjects with random profiles and the default [`CohortStyle`].
pub fn synth_cohort(n_subjects: usize, duration_s: f64, seed: u64) -> Result<Vec<Recording>> {
    synth_cohort_with(n_subjects, duration_s, seed, &CohortStyle::default())
}

/// `n` subjects, each with its own profile and generator seed drawn from `seed`.
pub fn synth_cohort_with(n_subjects: usize, duration_s: f64, seed: u64, style: &CohortStyle) -> Result<Vec<Recording>> {
    if n_subjects == 0 {
        return Err(Error::InvalidArgument("cohort of zero subjects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_subjects)
        .map(|i| {
            let profile = random_profile(&mut rng, duration_s, style)?;
            let subject_seed = rng.gen();
            synth_recording(
                &subject_id(i),
                duration_s,
                &profile,
                style.noise_sigma,
                style.artifact_level,
                subject_seed,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_profile_beats_are_evenly_spaced() {
        let p = HrProfile::constant(72.0).unwrap();
        let beats = p.beat_times(10.0);
        assert_eq!(beats.len(), 11);
        for (k, t) in beats.iter().enumerate() {
            assert!((t - (k + 1) as f64 * 60.0 / 72.0).abs() < 1e-12);
        }
    }

    #[test]
    fn ramp_phase_matches_the_closed_form_integral() {
        // f(t) = 1 + t/300 beats/s  ⇒  cycles(t) = t + t²/600.
        let p = HrProfile::new(vec![(0.0, 60.0), (300.0, 120.0)]).unwrap();
        for t in [0.0, 1.0, 17.5, 150.0, 299.0] {
            assert!((p.phase(t) / (2.0 * PI) - (t + t * t / 600.0)).abs() < 1e-9);
        }
        for (k, t) in p.beat_times(300.0).iter().enumerate() {
            assert!((t + t * t / 600.0 - (k + 1) as f64).abs() < 1e-9);
        }
        assert!((p.bpm_at(150.0) - 90.0).abs() < 1e-12);
        assert!((p.bpm_at(400.0) - 120.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_profiles_are_rejected() {
        assert!(HrProfile::new(vec![]).is_err());
        assert!(HrProfile::new(vec![(0.0, 39.0)]).is_err());
        assert!(HrProfile::new(vec![(0.0, 60.0), (0.0, 70.0)]).is_err());
        assert!(synth_recording("x", 8.0, &HrProfile::constant(60.0).unwrap(), 0.0, 0.0, 0).is_err());
    }

    #[test]
    fn cohort_is_deterministic_and_distinct() {
        let a = synth_cohort(3, 20.0, 5).unwrap();
        let b = synth_cohort(3, 20.0, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].ppg, a[1].ppg);
        assert_eq!(a[2].subject_id, "syn003");
        assert_eq!(a[0].ppg.len(), 1000);
        assert_eq!(a[0].ecg.len(), 8000);
    }
}
