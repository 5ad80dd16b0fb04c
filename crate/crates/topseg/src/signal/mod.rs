//! Recording ingestion and preprocessing: WAV loading, zero-phase band-pass
//! filtering, polyphase decimation, per-recording z-scoring, and fixed-length
//! chunking.

pub mod butter;
pub mod resample;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use butter::{butter_bandpass, sosfiltfilt, SosCascade};
pub use resample::resample_rational;

/// A single-channel recording with its sampling rate.
#[derive(Debug, Clone)]
pub struct Recording {
    pub id: String,
    pub samples: Vec<f64>,
    pub sample_rate: f64,
    /// Optional side-car label file discovered next to the audio.
    pub label_path: Option<PathBuf>,
}

impl Recording {
    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    fn with_samples(&self, samples: Vec<f64>, sample_rate: f64) -> Recording {
        Recording {
            id: self.id.clone(),
            samples,
            sample_rate,
            label_path: self.label_path.clone(),
        }
    }
}

/// Preprocessing parameters (config file section `[preprocess]`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessConfig {
    /// Band-pass lower edge in Hz.
    pub band_low: f64,
    /// Band-pass upper edge in Hz.
    pub band_high: f64,
    /// Butterworth order of the band-pass prototype.
    pub filter_order: usize,
    /// Rate of the fine/meso analysis stream in Hz.
    pub target_rate_fine: f64,
    /// Rate of the global analysis stream in Hz.
    pub target_rate_global: f64,
    /// Fixed chunk length in seconds.
    pub chunk_seconds: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            band_low: 20.0,
            band_high: 200.0,
            filter_order: 4,
            target_rate_fine: 600.0,
            target_rate_global: 60.0,
            chunk_seconds: 10.0,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.band_low
            && self.band_low < self.band_high
            && self.band_high < self.target_rate_fine / 2.0)
        {
            return Err(Error::Config(format!(
                "band edges must satisfy 0 < {} < {} < fine rate / 2 = {}",
                self.band_low,
                self.band_high,
                self.target_rate_fine / 2.0
            )));
        }
        if self.filter_order == 0 {
            return Err(Error::Config("filter_order must be at least 1".into()));
        }
        if !(self.target_rate_global > 0.0 && self.target_rate_global < self.target_rate_fine) {
            return Err(Error::Config(format!(
                "global rate {} must lie in (0, fine rate {})",
                self.target_rate_global, self.target_rate_fine
            )));
        }
        if self.chunk_seconds <= 0.0 {
            return Err(Error::Config("chunk_seconds must be positive".into()));
        }
        integer_rate(self.target_rate_fine)?;
        integer_rate(self.target_rate_global)?;
        Ok(())
    }
}

/// Sample rates must be whole Hz for exact rational resampling ratios.
fn integer_rate(rate: f64) -> Result<u64> {
    if rate <= 0.0 || (rate - rate.round()).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "sample rate {rate} is not a positive integer Hz value"
        )));
    }
    Ok(rate.round() as u64)
}

/// Load the first channel of a PCM WAV file as real values in `[-1, 1]`.
pub fn load_wav(path: &Path) -> Result<Recording> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.to_string_lossy().into_owned());
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::Unsupported => Error::WavUnsupported {
            path: path.into(),
            detail: "unsupported encoding".into(),
        },
        other => Error::WavFormat {
            path: path.into(),
            detail: other.to_string(),
        },
    })?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::WavFormat {
            path: path.into(),
            detail: "zero channels".into(),
        });
    }

    let map_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::WavFormat {
            path: path.into(),
            detail: other.to_string(),
        },
    };
    let samples: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => {
            if spec.bits_per_sample != 32 {
                return Err(Error::WavUnsupported {
                    path: path.into(),
                    detail: format!("{}-bit float", spec.bits_per_sample),
                });
            }
            let mut reader = reader;
            let raw: std::result::Result<Vec<f32>, _> = reader.samples::<f32>().collect();
            raw.map_err(map_err)?.iter().map(|&v| v as f64).collect()
        }
        hound::SampleFormat::Int => {
            if !matches!(spec.bits_per_sample, 8 | 16 | 24 | 32) {
                return Err(Error::WavUnsupported {
                    path: path.into(),
                    detail: format!("{}-bit int", spec.bits_per_sample),
                });
            }
            let scale = 1.0 / f64::from(1u32 << (spec.bits_per_sample - 1));
            let mut reader = reader;
            let raw: std::result::Result<Vec<i32>, _> = reader.samples::<i32>().collect();
            raw.map_err(map_err)?
                .iter()
                .map(|&v| f64::from(v) * scale)
                .collect()
        }
    };
    // Keep channel 0 of interleaved frames.
    let samples: Vec<f64> = samples.into_iter().step_by(channels).collect();
    if samples.is_empty() {
        return Err(Error::EmptyRecording { id });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::WavFormat {
            path: path.into(),
            detail: "non-finite sample values".into(),
        });
    }
    Ok(Recording {
        id,
        samples,
        sample_rate: f64::from(spec.sample_rate),
        label_path: None,
    })
}

/// Write a recording as a 16-bit PCM mono WAV file.
///
/// Samples are clamped to `[-1, 1]` before quantization.
pub fn write_wav(path: &Path, rec: &Recording) -> Result<()> {
    let rate = integer_rate(rec.sample_rate)?;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: rate as u32,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let map_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::WavFormat {
            path: path.into(),
            detail: other.to_string(),
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(map_err)?;
    for &v in &rec.samples {
        let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(q).map_err(map_err)?;
    }
    writer.finalize().map_err(map_err)
}

/// Forward–backward Butterworth band-pass; output length equals input
/// length and group delay is zero.
pub fn bandpass_zero_phase(rec: &Recording, cfg: &PreprocessConfig) -> Result<Recording> {
    if rec.sample_rate <= 2.0 * cfg.band_high {
        return Err(Error::Config(format!(
            "sample rate {} too low for band-pass up to {} Hz",
            rec.sample_rate, cfg.band_high
        )));
    }
    let cascade = butter_bandpass(cfg.filter_order, cfg.band_low, cfg.band_high, rec.sample_rate)?;
    let filtered = sosfiltfilt(&cascade, &rec.samples)?;
    Ok(rec.with_samples(filtered, rec.sample_rate))
}

/// Anti-aliased decimation to `target_rate` via the reduced rational ratio.
pub fn decimate_polyphase(rec: &Recording, target_rate: f64) -> Result<Recording> {
    let rate_in = integer_rate(rec.sample_rate)?;
    let rate_out = integer_rate(target_rate)?;
    if rate_out >= rate_in {
        return Err(Error::Config(format!(
            "decimation target {target_rate} must be below the input rate {}",
            rec.sample_rate
        )));
    }
    let y = resample_rational(&rec.samples, rate_in, rate_out)?;
    Ok(rec.with_samples(y, target_rate))
}

/// Z-score with the population standard deviation.
pub fn zscore(rec: &Recording) -> Result<Recording> {
    let n = rec.samples.len();
    if n == 0 {
        return Err(Error::EmptyRecording { id: rec.id.clone() });
    }
    let mean = rec.samples.iter().sum::<f64>() / n as f64;
    let var = rec
        .samples
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<f64>()
        / n as f64;
    if var <= 0.0 {
        return Err(Error::ConstantSignal);
    }
    let inv_std = 1.0 / var.sqrt();
    let out = rec.samples.iter().map(|&v| (v - mean) * inv_std).collect();
    Ok(rec.with_samples(out, rec.sample_rate))
}

/// Whether a chunk boundary drops or loop-pads the trailing remainder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChunkMode {
    /// Drop trailing remainders shorter than a chunk.
    Train,
    /// Keep trailing remainders, loop-padded to a full chunk.
    Inference,
}

/// One fixed-length chunk plus how many of its samples are real signal
/// (the rest is circular loop padding).
#[derive(Debug, Clone)]
pub struct Chunk {
    pub recording: Recording,
    pub valid_samples: usize,
}

/// Cut a recording into fixed-length chunks; recordings (or trailing
/// remainders in inference mode) shorter than a chunk are repeated
/// circularly to exactly the chunk length.
pub fn chunk_or_loop(rec: &Recording, chunk_seconds: f64, mode: ChunkMode) -> Result<Vec<Chunk>> {
    if rec.samples.is_empty() {
        return Err(Error::EmptyRecording { id: rec.id.clone() });
    }
    if chunk_seconds <= 0.0 {
        return Err(Error::Config("chunk_seconds must be positive".into()));
    }
    let chunk_len = (chunk_seconds * rec.sample_rate).round() as usize;
    if chunk_len == 0 {
        return Err(Error::Config("chunk shorter than one sample".into()));
    }
    let n = rec.samples.len();
    let mut chunks = Vec::new();
    let make_chunk = |segment: &[f64], index: usize| {
        let mut samples = Vec::with_capacity(chunk_len);
        for i in 0..chunk_len {
            samples.push(segment[i % segment.len()]);
        }
        Chunk {
            recording: Recording {
                id: format!("{}#{index}", rec.id),
                samples,
                sample_rate: rec.sample_rate,
                label_path: rec.label_path.clone(),
            },
            valid_samples: segment.len().min(chunk_len),
        }
    };
    let full = n / chunk_len;
    for c in 0..full {
        chunks.push(make_chunk(&rec.samples[c * chunk_len..(c + 1) * chunk_len], c));
    }
    let rem = n % chunk_len;
    if rem > 0 && (full == 0 || mode == ChunkMode::Inference) {
        chunks.push(make_chunk(&rec.samples[full * chunk_len..], full));
    }
    Ok(chunks)
}

/// Full preprocessing chain at recording granularity: band-pass at the
/// native rate, decimate to the fine analysis rate, z-score. Chunking is a
/// separate step so callers can choose the mode.
pub fn preprocess(rec: &Recording, cfg: &PreprocessConfig) -> Result<Recording> {
    cfg.validate()?;
    let filtered = bandpass_zero_phase(rec, cfg)?;
    let fine = decimate_polyphase(&filtered, cfg.target_rate_fine)?;
    zscore(&fine)
}
