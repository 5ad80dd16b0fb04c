//! Delay-coordinate embedding of preprocessed waveforms.
//!
//! Each temporal scale turns the scalar stream s into a trajectory of
//! d-dimensional points Φ(t) = (s(t), s(t+τ), ..., s(t+(d−1)τ)) covering an
//! effective window W = (d−1)τ. The five default scales form two branches:
//! three global configurations at 60 Hz (later averaged into one stream) and
//! the meso/fine configurations at 600 Hz.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Recording;

/// Identifier of one embedding scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleName {
    Global2,
    Global4,
    Global8,
    Meso,
    Fine,
}

impl ScaleName {
    pub const ALL: [ScaleName; 5] = [
        ScaleName::Global2,
        ScaleName::Global4,
        ScaleName::Global8,
        ScaleName::Meso,
        ScaleName::Fine,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScaleName::Global2 => "global2",
            ScaleName::Global4 => "global4",
            ScaleName::Global8 => "global8",
            ScaleName::Meso => "meso",
            ScaleName::Fine => "fine",
        }
    }

    /// Whether this scale belongs to the averaged 60 Hz global branch.
    pub fn is_global(&self) -> bool {
        matches!(
            self,
            ScaleName::Global2 | ScaleName::Global4 | ScaleName::Global8
        )
    }
}

impl fmt::Display for ScaleName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScaleName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "global2" => Ok(ScaleName::Global2),
            "global4" => Ok(ScaleName::Global4),
            "global8" => Ok(ScaleName::Global8),
            "meso" => Ok(ScaleName::Meso),
            "fine" => Ok(ScaleName::Fine),
            other => Err(Error::Config(format!("unknown scale name {other:?}"))),
        }
    }
}

/// Embedding parameters of one scale (config file section
/// `[scales.<name>]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleConfig {
    pub name: ScaleName,
    /// Sampling rate of the stream this scale embeds, in Hz.
    pub stream_rate: f64,
    /// Delay τ in seconds; must be an integer number of stream samples.
    pub tau: f64,
    /// Embedding dimension d.
    pub dim: usize,
    /// Window multiplier m: a sweep window spans m·W seconds of signal.
    pub window_multiplier: f64,
}

impl ScaleConfig {
    /// Effective embedding window W = (d − 1)·τ in seconds.
    pub fn window_seconds(&self) -> f64 {
        (self.dim - 1) as f64 * self.tau
    }

    /// Delay expressed in stream samples.
    pub fn lag_samples(&self) -> Result<usize> {
        let lag = self.tau * self.stream_rate;
        if lag < 1.0 - 1e-9 || (lag - lag.round()).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "scale {}: tau {} s is not a whole number of samples at {} Hz",
                self.name, self.tau, self.stream_rate
            )));
        }
        Ok(lag.round() as usize)
    }

    /// Embedding span in stream samples: (d − 1)·lag.
    pub fn window_samples(&self) -> Result<usize> {
        Ok((self.dim - 1) * self.lag_samples()?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::Config(format!(
                "scale {}: embedding dimension must be positive",
                self.name
            )));
        }
        if self.stream_rate <= 0.0 || self.tau <= 0.0 {
            return Err(Error::Config(format!(
                "scale {}: rate and tau must be positive",
                self.name
            )));
        }
        if self.window_multiplier <= 0.0 {
            return Err(Error::Config(format!(
                "scale {}: window multiplier must be positive",
                self.name
            )));
        }
        self.lag_samples()?;
        Ok(())
    }
}

/// The five default scales (τ, d, W, stream rate):
/// global 2 s / 4 s / 8 s at 60 Hz and meso / fine at 600 Hz.
pub fn default_scales() -> Vec<ScaleConfig> {
    let mk = |name, stream_rate, tau, dim| ScaleConfig {
        name,
        stream_rate,
        tau,
        dim,
        window_multiplier: 2.0,
    };
    vec![
        mk(ScaleName::Global2, 60.0, 0.100, 21),
        mk(ScaleName::Global4, 60.0, 0.200, 21),
        mk(ScaleName::Global8, 60.0, 0.200, 41),
        mk(ScaleName::Meso, 600.0, 0.025, 21),
        mk(ScaleName::Fine, 600.0, 0.010, 11),
    ]
}

/// A delay-embedded trajectory: `len` points of `dim` coordinates.
#[derive(Debug, Clone)]
pub struct EmbeddedTrajectory {
    /// Row-major `len × dim` coordinates.
    pub points: Vec<f64>,
    pub len: usize,
    pub dim: usize,
    pub stream_rate: f64,
    /// Time (seconds) of the first coordinate of the first point.
    pub origin_time: f64,
}

impl EmbeddedTrajectory {
    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }
}

/// Embed a stream at one scale. Point i collects the samples
/// `s[i], s[i+L], ..., s[i+(d−1)L]` with L the delay in samples.
pub fn delay_embed(rec: &Recording, cfg: &ScaleConfig) -> Result<EmbeddedTrajectory> {
    cfg.validate()?;
    if (rec.sample_rate - cfg.stream_rate).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "scale {} expects a {} Hz stream, got {} Hz",
            cfg.name, cfg.stream_rate, rec.sample_rate
        )));
    }
    let lag = cfg.lag_samples()?;
    let span = (cfg.dim - 1) * lag;
    let n = rec.samples.len();
    if n <= span {
        return Err(Error::SignalTooShort {
            scale: cfg.name.to_string(),
            needed: span + 1,
            got: n,
        });
    }
    let len = n - span;
    let mut points = Vec::with_capacity(len * cfg.dim);
    for i in 0..len {
        for c in 0..cfg.dim {
            points.push(rec.samples[i + c * lag]);
        }
    }
    Ok(EmbeddedTrajectory {
        points,
        len,
        dim: cfg.dim,
        stream_rate: cfg.stream_rate,
        origin_time: 0.0,
    })
}

/// Average mutual information (nats) of the signal against its lagged copy,
/// for lags `1..=max_lag`, using 16-bin equal-width histograms. Diagnostic
/// only; the defaults in [`default_scales`] stay fixed.
pub fn average_mutual_information(rec: &Recording, max_lag: usize) -> Vec<f64> {
    const BINS: usize = 16;
    let x = &rec.samples;
    let n = x.len();
    let (min, max) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = max - min;
    let bin_of = |v: f64| -> usize {
        if range <= 0.0 {
            return 0;
        }
        (((v - min) / range * BINS as f64) as usize).min(BINS - 1)
    };

    let mut out = Vec::with_capacity(max_lag);
    for lag in 1..=max_lag {
        if n < lag + 2 {
            out.push(0.0);
            continue;
        }
        let pairs = n - lag;
        let mut joint = [[0u32; BINS]; BINS];
        let mut px = [0u32; BINS];
        let mut py = [0u32; BINS];
        for i in 0..pairs {
            let a = bin_of(x[i]);
            let b = bin_of(x[i + lag]);
            joint[a][b] += 1;
            px[a] += 1;
            py[b] += 1;
        }
        let total = pairs as f64;
        let mut ami = 0.0;
        for a in 0..BINS {
            for b in 0..BINS {
                let c = joint[a][b];
                if c == 0 {
                    continue;
                }
                let pab = c as f64 / total;
                let pa = px[a] as f64 / total;
                let pb = py[b] as f64 / total;
                ami += pab * (pab / (pa * pb)).ln();
            }
        }
        out.push(ami);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(samples: Vec<f64>, rate: f64) -> Recording {
        Recording {
            id: "t".into(),
            samples,
            sample_rate: rate,
            label_path: None,
        }
    }

    #[test]
    fn default_scales_match_table() {
        let scales = default_scales();
        let rows: Vec<(ScaleName, f64, f64, usize, f64)> = scales
            .iter()
            .map(|s| (s.name, s.stream_rate, s.tau, s.dim, s.window_seconds()))
            .collect();
        assert_eq!(
            rows,
            vec![
                (ScaleName::Global2, 60.0, 0.100, 21, 2.0),
                (ScaleName::Global4, 60.0, 0.200, 21, 4.0),
                (ScaleName::Global8, 60.0, 0.200, 41, 8.0),
                (ScaleName::Meso, 600.0, 0.025, 21, 0.5),
                (ScaleName::Fine, 600.0, 0.010, 11, 0.1),
            ]
        );
        // Delays are whole samples: 6, 12, 12, 15, 6.
        let lags: Vec<usize> = scales.iter().map(|s| s.lag_samples().unwrap()).collect();
        assert_eq!(lags, vec![6, 12, 12, 15, 6]);
        for s in &scales {
            assert!((s.window_seconds() - (s.dim - 1) as f64 * s.tau).abs() < 1e-12);
            s.validate().unwrap();
        }
    }

    #[test]
    fn embed_small_example() {
        let cfg = ScaleConfig {
            name: ScaleName::Fine,
            stream_rate: 1.0,
            tau: 1.0,
            dim: 3,
            window_multiplier: 2.0,
        };
        let traj = delay_embed(&rec(vec![0.0, 1.0, 2.0, 3.0, 4.0], 1.0), &cfg).unwrap();
        assert_eq!(traj.len, 3);
        assert_eq!(traj.point(0), &[0.0, 1.0, 2.0]);
        assert_eq!(traj.point(1), &[1.0, 2.0, 3.0]);
        assert_eq!(traj.point(2), &[2.0, 3.0, 4.0]);
    }

    #[test]
    fn embed_dim_one_is_identity() {
        let cfg = ScaleConfig {
            name: ScaleName::Fine,
            stream_rate: 1.0,
            tau: 1.0,
            dim: 1,
            window_multiplier: 2.0,
        };
        let x = vec![5.0, -1.0, 2.5];
        let traj = delay_embed(&rec(x.clone(), 1.0), &cfg).unwrap();
        assert_eq!(traj.len, 3);
        assert_eq!(traj.points, x);
    }

    #[test]
    fn fine_scale_point_count_on_10s() {
        // 6000 samples, span (11−1)·6 = 60 samples → 5940 points.
        let fine = default_scales().into_iter().find(|s| s.name == ScaleName::Fine).unwrap();
        let traj = delay_embed(&rec(vec![0.0; 6000], 600.0), &fine).unwrap();
        assert_eq!(traj.len, 5940);
        assert_eq!(traj.dim, 11);
    }

    #[test]
    fn too_short_error_names_scale() {
        let meso = default_scales().into_iter().find(|s| s.name == ScaleName::Meso).unwrap();
        match delay_embed(&rec(vec![0.0; 300], 600.0), &meso) {
            Err(Error::SignalTooShort { scale, needed, got }) => {
                assert_eq!(scale, "meso");
                assert_eq!(needed, 301);
                assert_eq!(got, 300);
            }
            other => panic!("expected SignalTooShort, got {other:?}"),
        }
    }

    #[test]
    fn shift_equivariance_exact() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let x: Vec<f64> = (0..500).map(|_| rng.gen::<f64>()).collect();
        let cfg = ScaleConfig {
            name: ScaleName::Meso,
            stream_rate: 600.0,
            tau: 0.025,
            dim: 5,
            window_multiplier: 2.0,
        };
        let full = delay_embed(&rec(x.clone(), 600.0), &cfg).unwrap();
        let shift = 7;
        let shifted = delay_embed(&rec(x[shift..].to_vec(), 600.0), &cfg).unwrap();
        assert_eq!(shifted.len, full.len - shift);
        for i in 0..shifted.len {
            assert_eq!(shifted.point(i), full.point(i + shift));
        }
    }

    #[test]
    fn ami_white_noise_near_zero() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..10000).map(|_| rng.gen::<f64>()).collect();
        let ami = average_mutual_information(&rec(x, 600.0), 20);
        assert_eq!(ami.len(), 20);
        for (lag0, v) in ami.iter().enumerate() {
            assert!(*v < 0.05, "AMI at lag {} is {v}", lag0 + 1);
        }
    }

    #[test]
    fn ami_periodic_peak_at_period() {
        // Pure sine with period 50 samples: at lag = P the lagged copy is
        // identical, so AMI peaks there (within ±2 samples).
        let p = 50.0;
        let x: Vec<f64> = (0..10000)
            .map(|i| (2.0 * std::f64::consts::PI * i as f64 / p).sin())
            .collect();
        let ami = average_mutual_information(&rec(x, 600.0), 70);
        // Search away from the half-period ridge at lag 25.
        let (argmax, _) = ami
            .iter()
            .enumerate()
            .skip(35)
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let lag = argmax + 1;
        assert!(
            (lag as f64 - p).abs() <= 2.0,
            "AMI argmax at lag {lag}, expected ≈ {p}"
        );
    }

    #[test]
    fn ami_constant_signal_is_zero() {
        let ami = average_mutual_information(&rec(vec![1.0; 1000], 600.0), 5);
        assert!(ami.iter().all(|&v| v == 0.0));
    }
}
