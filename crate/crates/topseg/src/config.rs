//! Merged run configuration: one TOML file with a section per pipeline
//! stage, every field defaulted so an empty file (or none at all) is a
//! complete, runnable configuration.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::decoder::DecoderConfig;
use crate::embed::{default_scales, ScaleConfig};
use crate::error::{Error, Result};
use crate::features::FeatureParams;
use crate::refine::RefineConfig;
use crate::signal::PreprocessConfig;
use crate::synth::SynthConfig;

/// Input/output locations (config file section `[paths]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory of input WAV recordings and their label/manifest files.
    pub data_dir: PathBuf,
    /// Feature cache directory; when unset, the `TOPSEG_CACHE_DIR`
    /// environment variable is consulted before the built-in default.
    pub cache_dir: Option<PathBuf>,
    /// Decoder model file.
    pub model_path: PathBuf,
    /// Directory for predictions, posteriors, metrics and logs.
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            data_dir: PathBuf::from("data"),
            cache_dir: None,
            model_path: PathBuf::from("topseg-model.bin"),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl PathsConfig {
    /// Cache directory after applying the environment fallback.
    pub fn resolved_cache_dir(&self) -> PathBuf {
        if let Some(dir) = &self.cache_dir {
            return dir.clone();
        }
        if let Some(env) = std::env::var_os("TOPSEG_CACHE_DIR") {
            if !env.is_empty() {
                return PathBuf::from(env);
            }
        }
        PathBuf::from("cache")
    }
}

/// Partial override of one embedding scale (config file section
/// `[scales.<name>]`); unset fields keep their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScaleTweak {
    pub stream_rate: Option<f64>,
    pub tau: Option<f64>,
    pub dim: Option<usize>,
    pub window_multiplier: Option<f64>,
}

/// Scoring settings (config file section `[eval]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Boundary tolerance in seconds.
    pub tolerance: f64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            tolerance: crate::eval::DEFAULT_TOLERANCE,
        }
    }
}

/// The merged view of all stage configurations plus paths and experiment
/// settings. Field and section names match the TOML file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master RNG seed for training, subsampling and synthesis.
    pub seed: u64,
    /// Subject budget as a percentage in (0, 100].
    pub budget: f64,
    /// Worker thread bound; 0 means all available cores.
    pub jobs: usize,
    pub paths: PathsConfig,
    pub preprocess: PreprocessConfig,
    pub scales: BTreeMap<String, ScaleTweak>,
    pub features: FeatureParams,
    pub decoder: DecoderConfig,
    pub refine: RefineConfig,
    pub eval: EvalSettings,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            budget: 100.0,
            jobs: 0,
            paths: PathsConfig::default(),
            preprocess: PreprocessConfig::default(),
            scales: BTreeMap::new(),
            features: FeatureParams::default(),
            decoder: DecoderConfig::default(),
            refine: RefineConfig::default(),
            eval: EvalSettings::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parse a TOML configuration; missing fields take their defaults.
    pub fn from_toml_str(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config file: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from a file, or return the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Self::from_toml_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// The five embedding scales with any `[scales.<name>]` tweaks applied.
    pub fn resolved_scales(&self) -> Result<Vec<ScaleConfig>> {
        let mut scales = default_scales();
        for (name, tweak) in &self.scales {
            let scale = scales
                .iter_mut()
                .find(|s| s.name.as_str() == name.to_ascii_lowercase())
                .ok_or_else(|| Error::Config(format!("unknown scale section {name:?}")))?;
            if let Some(v) = tweak.stream_rate {
                scale.stream_rate = v;
            }
            if let Some(v) = tweak.tau {
                scale.tau = v;
            }
            if let Some(v) = tweak.dim {
                scale.dim = v;
            }
            if let Some(v) = tweak.window_multiplier {
                scale.window_multiplier = v;
            }
        }
        for s in &scales {
            s.validate()?;
        }
        Ok(scales)
    }

    /// Budget as a fraction in (0, 1].
    pub fn budget_fraction(&self) -> f64 {
        self.budget / 100.0
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.budget > 0.0 && self.budget <= 100.0) {
            return Err(Error::Config(format!(
                "budget must be a percentage in (0, 100], got {}",
                self.budget
            )));
        }
        self.preprocess.validate()?;
        self.features.validate()?;
        self.decoder.validate()?;
        self.refine.validate()?;
        self.synth.validate()?;
        if !(self.eval.tolerance >= 0.0) {
            return Err(Error::Config(format!(
                "eval tolerance must be >= 0, got {}",
                self.eval.tolerance
            )));
        }
        self.resolved_scales()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests;
