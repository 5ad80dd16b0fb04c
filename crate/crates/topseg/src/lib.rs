//! Heart-sound segmentation with multi-scale topological features.
//!
//! The pipeline turns a raw phonocardiogram (PCG) recording into a framewise
//! sequence of the four cardiac states (S1, systole, S2, diastole):
//!
//! 1. [`signal`] — WAV loading, zero-phase band-pass filtering, rational-rate
//!    decimation, z-scoring and fixed-length chunking.
//! 2. [`embed`] — time-delay embedding of the preprocessed signal at five
//!    temporal scales.
//! 3. [`homology`] — sparsified Vietoris–Rips persistent homology (H0/H1) of
//!    sliding point-cloud windows over each embedded trajectory.
//! 4. [`landscape`] — persistence landscapes that turn diagrams into fixed-size
//!    vectors.
//! 5. [`features`] — per-scale window sweeps, aggregation of the global scales,
//!    resampling onto a common frame grid, and the on-disk feature cache.
//! 6. [`decoder`] — a small framewise neural decoder (TCN or MLP) trained with
//!    plain SGD, plus label handling and gradient checking.
//! 7. [`refine`] — topology-guided convex refinement of decoder posteriors and
//!    duration-constrained Viterbi decoding of the cyclic state order.
//! 8. [`eval`] — tolerant framewise scoring, aggregation and subject
//!    subsampling.
//! 9. [`synth`] — a synthetic PCG generator used for tests and smoke runs.
//! 10. [`config`] — run configuration with TOML loading and defaults.

pub mod config;
pub mod decoder;
pub mod embed;
pub mod error;
pub mod eval;
pub mod features;
pub mod homology;
pub mod landscape;
pub mod refine;
pub mod signal;
pub mod synth;

pub use error::{Error, Result};
