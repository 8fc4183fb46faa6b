use std::f64::consts::PI;

use ppgnet::groundtruth::{detect_r_peaks, mean_hr_bpm};
use ppgnet::synth::{synth_cohort, synth_recording, HrProfile, ECG_RATE_HZ, PPG_RATE_HZ};

/// Frequency of the largest DFT magnitude in `band`, by direct summation on a
/// 0.005 Hz grid.
fn spectral_peak(x: &[f64], rate: f64, band: (f64, f64)) -> f64 {
    let mut best = (0.0, band.0);
    let mut f = band.0;
    while f <= band.1 {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in x.iter().enumerate() {
            let a = 2.0 * PI * f * i as f64 / rate;
            re += v * a.cos();
            im -= v * a.sin();
        }
        let m = re.hypot(im);
        if m > best.0 {
            best = (m, f);
        }
        f += 0.005;
    }
    best.1
}

#[test]
fn constant_rate_ppg_peaks_at_the_heart_rate() {
    for bpm in [48.0, 75.0, 130.0] {
        let rec = synth_recording("s", 60.0, &HrProfile::constant(bpm).unwrap(), 0.1, 0.0, 3).unwrap();
        let peak = spectral_peak(&rec.ppg, PPG_RATE_HZ, (0.5, 5.0));
        assert!((peak - bpm / 60.0).abs() <= 0.05, "{bpm} BPM: peak at {peak} Hz");
    }
}

#[test]
fn ramp_labels_rise_with_the_planted_rate() {
    let profile = HrProfile::new(vec![(0.0, 60.0), (120.0, 120.0)]).unwrap();
    let rec = synth_recording("s", 120.0, &profile, 0.0, 0.0, 3).unwrap();
    let peaks = detect_r_peaks(&rec.ecg, ECG_RATE_HZ).unwrap();
    let mut previous = 0.0;
    for k in 0..57 {
        let start = 2.0 * k as f64;
        let label = mean_hr_bpm(&peaks, start, 8.0).unwrap();
        let planted = profile.mean_bpm(start, start + 8.0);
        assert!((label - planted).abs() <= 1.0, "window {k}: {label} vs {planted}");
        assert!(label >= previous - 1e-9, "labels must not fall on a rising ramp");
        previous = label;
    }
}

#[test]
fn cohorts_are_reproducible_and_seed_dependent() {
    let a = synth_cohort(3, 30.0, 11).unwrap();
    assert_eq!(a, synth_cohort(3, 30.0, 11).unwrap());
    assert_ne!(a, synth_cohort(3, 30.0, 12).unwrap());
    let ids: Vec<&str> = a.iter().map(|r| r.subject_id.as_str()).collect();
    assert_eq!(ids, ["syn001", "syn002", "syn003"]);
    for r in &a {
        assert_eq!(r.ppg.len(), 1500);
        assert_eq!(r.ecg.len(), 12000);
    }
}

#[test]
fn invalid_generator_settings_are_rejected() {
    let p = HrProfile::constant(70.0).unwrap();
    assert!(synth_recording("s", 5.0, &p, 0.1, 0.0, 0).is_err());
    assert!(synth_recording("s", 30.0, &p, -1.0, 0.0, 0).is_err());
    assert!(HrProfile::constant(300.0).is_err());
    assert!(HrProfile::new(vec![(5.0, 60.0), (5.0, 70.0)]).is_err());
    assert!(synth_cohort(0, 30.0, 0).is_err());
}
