//! Synthetic phonocardiogram generator with exact ground-truth labels.
//!
//! Each cardiac cycle is laid out as S1 → systole → S2 → diastole with a
//! per-cycle period jitter. S1 and S2 are Gaussian-windowed tone bursts
//! whose interval edges are snapped to the 60 Hz frame grid, so the label
//! sequence is exact by construction: with no noise, the signal support
//! coincides with the S1/S2 label intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{labels_from_intervals, HeartState, Interval, LabelSequence};
use crate::error::{Error, Result};
use crate::signal::Recording;

/// Frame rate of the generated label grid, in Hz.
pub const FRAME_RATE: f64 = 60.0;

/// Fraction of the cycle period spent in systole (S1 onset to S2 onset).
const SYSTOLE_FRACTION: f64 = 0.3;

/// Peak amplitudes of the S1 and S2 bursts. Kept below 1 so the clean
/// waveform survives 16-bit WAV quantization without clipping.
const S1_AMP: f64 = 0.5;
const S2_AMP: f64 = 0.4;

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Mean heart rate in beats per minute; supported range 60–120.
    pub heart_rate: f64,
    /// S1 burst duration in milliseconds.
    pub s1_dur: f64,
    /// S2 burst duration in milliseconds.
    pub s2_dur: f64,
    /// S1 tone frequency in Hz.
    pub s1_freq: f64,
    /// S2 tone frequency in Hz.
    pub s2_freq: f64,
    /// Signal-to-noise ratio of the additive white noise in dB;
    /// `f64::INFINITY` disables noise.
    pub noise_snr: f64,
    /// Per-cycle period jitter as a fraction of the mean period.
    pub hr_jitter: f64,
    /// Recording length in seconds (rounded to the frame grid).
    pub duration: f64,
    /// RNG seed; fixes both jitter and noise.
    pub seed: u64,
    /// Output sample rate in Hz.
    pub sample_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            heart_rate: 75.0,
            s1_dur: 100.0,
            s2_dur: 90.0,
            s1_freq: 60.0,
            s2_freq: 85.0,
            noise_snr: 20.0,
            hr_jitter: 0.05,
            duration: 10.0,
            seed: 0,
            sample_rate: 2000.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(60.0..=120.0).contains(&self.heart_rate) {
            return Err(Error::Config(format!(
                "heart_rate must be in 60–120 bpm, got {}",
                self.heart_rate
            )));
        }
        if !(0.0..0.5).contains(&self.hr_jitter) {
            return Err(Error::Config(format!(
                "hr_jitter must be in [0, 0.5), got {}",
                self.hr_jitter
            )));
        }
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(Error::Config(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        if !(self.sample_rate > 0.0) || self.sample_rate.fract() != 0.0 {
            return Err(Error::Config(format!(
                "sample_rate must be a positive integer number of Hz, got {}",
                self.sample_rate
            )));
        }
        for (name, f) in [("s1_freq", self.s1_freq), ("s2_freq", self.s2_freq)] {
            if !(f > 0.0) || f >= self.sample_rate / 2.0 {
                return Err(Error::Config(format!(
                    "{name} must be in (0, sample_rate/2), got {f}"
                )));
            }
        }
        // Every state must span at least two label frames even for the
        // shortest jittered cycle, or edge snapping could collapse it.
        let min_span = 2.0 / FRAME_RATE;
        let d1 = self.s1_dur / 1000.0;
        let d2 = self.s2_dur / 1000.0;
        let min_period = 60.0 / self.heart_rate * (1.0 - self.hr_jitter);
        let systole = SYSTOLE_FRACTION * min_period - d1;
        let diastole = (1.0 - SYSTOLE_FRACTION) * min_period - d2;
        if d1 < min_span || d2 < min_span || systole < min_span || diastole < min_span {
            return Err(Error::Config(format!(
                "infeasible durations: s1 {:.0} ms + s2 {:.0} ms do not fit a \
                 {:.0} ms cycle at {} bpm with jitter {}",
                self.s1_dur,
                self.s2_dur,
                1000.0 * min_period,
                self.heart_rate,
                self.hr_jitter
            )));
        }
        Ok(())
    }

    /// Number of label frames for the configured duration.
    pub fn frames(&self) -> usize {
        (self.duration * FRAME_RATE).round().max(1.0) as usize
    }
}

fn snap(x: f64) -> f64 {
    (x * FRAME_RATE).round() / FRAME_RATE
}

/// Cycle layout as half-open intervals snapped to the frame grid,
/// truncated at `end`.
fn build_intervals(cfg: &SynthConfig, rng: &mut ChaCha8Rng, end: f64) -> Vec<Interval> {
    let base = 60.0 / cfg.heart_rate;
    let d1 = cfg.s1_dur / 1000.0;
    let d2 = cfg.s2_dur / 1000.0;
    let mut intervals = Vec::new();
    let mut cursor = 0.0;
    while snap(cursor) < end - 1e-9 {
        let u: f64 = rng.gen();
        let period = base * (1.0 + cfg.hr_jitter * (2.0 * u - 1.0));
        let s2_on = cursor + SYSTOLE_FRACTION * period;
        let edges = [
            snap(cursor),
            snap(cursor + d1),
            snap(s2_on),
            snap(s2_on + d2),
            snap(cursor + period),
        ];
        let states = [
            HeartState::S1,
            HeartState::Systole,
            HeartState::S2,
            HeartState::Diastole,
        ];
        for (i, &state) in states.iter().enumerate() {
            let start = edges[i];
            let stop = edges[i + 1].min(end);
            if stop > start + 1e-9 {
                intervals.push(Interval { start, end: stop, state });
            }
            if stop >= end {
                break;
            }
        }
        cursor += period;
    }
    intervals
}

/// Add a Gaussian-windowed tone burst over `[start, end)` in place.
fn add_burst(samples: &mut [f64], rate: f64, start: f64, end: f64, freq: f64, amp: f64) {
    let mu = 0.5 * (start + end);
    let sigma = (end - start) / 6.0;
    let i0 = (start * rate).ceil() as usize;
    let i1 = ((end * rate).ceil() as usize).min(samples.len());
    for i in i0..i1 {
        let t = i as f64 / rate;
        let z = (t - mu) / sigma;
        let w = (-0.5 * z * z).exp();
        samples[i] += amp * w * (std::f64::consts::TAU * freq * (t - start)).sin();
    }
}

/// Generate one synthetic recording and its exact label sequence.
pub fn generate(cfg: &SynthConfig) -> Result<(Recording, LabelSequence)> {
    cfg.validate()?;
    let frames = cfg.frames();
    let end = frames as f64 / FRAME_RATE;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let intervals = build_intervals(cfg, &mut rng, end);

    let n = (end * cfg.sample_rate).round() as usize;
    let mut samples = vec![0.0; n];
    for iv in &intervals {
        match iv.state {
            HeartState::S1 => {
                add_burst(&mut samples, cfg.sample_rate, iv.start, iv.end, cfg.s1_freq, S1_AMP)
            }
            HeartState::S2 => {
                add_burst(&mut samples, cfg.sample_rate, iv.start, iv.end, cfg.s2_freq, S2_AMP)
            }
            _ => {}
        }
    }

    if cfg.noise_snr.is_finite() {
        let power: f64 = samples.iter().map(|s| s * s).sum::<f64>() / n.max(1) as f64;
        let sigma = (power * 10f64.powf(-cfg.noise_snr / 10.0)).sqrt();
        if sigma > 0.0 {
            let mut i = 0;
            while i < n {
                // Box–Muller transform; one uniform pair yields two normals.
                let u1: f64 = 1.0 - rng.gen::<f64>();
                let u2: f64 = rng.gen();
                let r = (-2.0 * u1.ln()).sqrt();
                let phi = std::f64::consts::TAU * u2;
                samples[i] += sigma * r * phi.cos();
                if i + 1 < n {
                    samples[i + 1] += sigma * r * phi.sin();
                }
                i += 2;
            }
        }
    }

    let labels = labels_from_intervals(&intervals, FRAME_RATE, frames)?;
    let rec = Recording {
        id: format!("synth{:05}", cfg.seed),
        samples,
        sample_rate: cfg.sample_rate,
        label_path: None,
    };
    Ok((rec, labels))
}

#[cfg(test)]
mod tests;
