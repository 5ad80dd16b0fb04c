use super::*;
use crate::decoder::intervals_from_labels;
use crate::signal::{bandpass_zero_phase, PreprocessConfig};

#[test]
fn config_defaults_are_pinned() {
    let cfg = SynthConfig::default();
    assert_eq!(cfg.heart_rate, 75.0);
    assert_eq!(cfg.s1_dur, 100.0);
    assert_eq!(cfg.s2_dur, 90.0);
    assert_eq!(cfg.s1_freq, 60.0);
    assert_eq!(cfg.s2_freq, 85.0);
    assert_eq!(cfg.noise_snr, 20.0);
    assert_eq!(cfg.hr_jitter, 0.05);
    assert_eq!(cfg.duration, 10.0);
    assert_eq!(cfg.seed, 0);
    assert_eq!(cfg.sample_rate, 2000.0);
    cfg.validate().unwrap();
}

#[test]
fn validation_rejects_infeasible_configs() {
    let mut cfg = SynthConfig {
        s1_dur: 500.0,
        heart_rate: 120.0,
        ..SynthConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));

    cfg = SynthConfig {
        heart_rate: 40.0,
        ..SynthConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));

    cfg = SynthConfig {
        sample_rate: 150.0,
        ..SynthConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));

    cfg = SynthConfig {
        hr_jitter: 0.9,
        ..SynthConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn ten_seconds_at_75_bpm_has_twelve_or_thirteen_cycles() {
    for seed in 0..5 {
        let cfg = SynthConfig {
            seed,
            ..SynthConfig::default()
        };
        let (rec, labels) = generate(&cfg).unwrap();
        assert_eq!(labels.states.len(), 600);
        assert_eq!(rec.samples.len(), 20_000);
        let s1_onsets = intervals_from_labels(&labels)
            .iter()
            .filter(|iv| iv.state == HeartState::S1)
            .count();
        assert!(
            (12..=13).contains(&s1_onsets),
            "seed {seed}: {s1_onsets} S1 onsets"
        );
    }
}

#[test]
fn clean_signal_support_matches_s1_s2_labels_exactly() {
    let cfg = SynthConfig {
        noise_snr: f64::INFINITY,
        seed: 3,
        ..SynthConfig::default()
    };
    let (rec, labels) = generate(&cfg).unwrap();

    // Every nonzero sample falls in a frame labeled S1 or S2.
    let mut support_frames = vec![false; labels.states.len()];
    for (i, &s) in rec.samples.iter().enumerate() {
        if s != 0.0 {
            let frame = (i as f64 / rec.sample_rate * FRAME_RATE).floor() as usize;
            let state = labels.states[frame];
            assert!(
                state == HeartState::S1 || state == HeartState::S2,
                "nonzero sample {i} in {state} frame {frame}"
            );
            support_frames[frame] = true;
        }
    }
    // Every S1/S2-labeled frame contains at least one nonzero sample.
    for (frame, &state) in labels.states.iter().enumerate() {
        if state == HeartState::S1 || state == HeartState::S2 {
            assert!(support_frames[frame], "silent {state} frame {frame}");
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let cfg = SynthConfig {
        seed: 41,
        ..SynthConfig::default()
    };
    let (rec_a, lab_a) = generate(&cfg).unwrap();
    let (rec_b, lab_b) = generate(&cfg).unwrap();
    assert_eq!(rec_a.id, "synth00041");
    assert_eq!(rec_a.id, rec_b.id);
    assert_eq!(lab_a.states, lab_b.states);
    let bits = |r: &Recording| r.samples.iter().map(|s| s.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&rec_a), bits(&rec_b));

    let (rec_c, _) = generate(&SynthConfig {
        seed: 42,
        ..cfg
    })
    .unwrap();
    assert_ne!(bits(&rec_a), bits(&rec_c));
}

#[test]
fn label_order_is_strictly_cyclic() {
    for seed in [0, 9, 77] {
        let cfg = SynthConfig {
            seed,
            heart_rate: 60.0 + (seed % 3) as f64 * 30.0,
            ..SynthConfig::default()
        };
        let (_, labels) = generate(&cfg).unwrap();
        let runs = intervals_from_labels(&labels);
        assert_eq!(runs[0].state, HeartState::S1);
        for pair in runs.windows(2) {
            let expect = (pair[0].state.index() + 1) % 4;
            assert_eq!(pair[1].state.index(), expect, "seed {seed}");
        }
    }
}

#[test]
fn bandpass_preserves_burst_amplitude() {
    let cfg = SynthConfig {
        noise_snr: f64::INFINITY,
        duration: 6.0,
        seed: 5,
        ..SynthConfig::default()
    };
    let (rec, labels) = generate(&cfg).unwrap();
    let filtered = bandpass_zero_phase(&rec, &PreprocessConfig::default()).unwrap();

    let rms = |r: &Recording, a: usize, b: usize| {
        let sum: f64 = r.samples[a..b].iter().map(|s| s * s).sum();
        (sum / (b - a) as f64).sqrt()
    };
    // Check an interior burst of each kind, away from filter warm-up.
    for kind in [HeartState::S1, HeartState::S2] {
        let iv = intervals_from_labels(&labels)
            .into_iter()
            .filter(|iv| iv.state == kind)
            .nth(2)
            .unwrap();
        let a = (iv.start * rec.sample_rate) as usize;
        let b = (iv.end * rec.sample_rate) as usize;
        let before = rms(&rec, a, b);
        let after = rms(&filtered, a, b);
        assert!(
            after > 0.95 * before && after < 1.05 * before,
            "{kind}: rms {before:.4} -> {after:.4}"
        );
    }
}
