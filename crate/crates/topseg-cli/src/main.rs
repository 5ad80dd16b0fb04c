//! `topseg` — heart-sound segmentation pipeline driver.
//!
//! Subcommands mirror the pipeline stages: `synth` (make a synthetic
//! corpus), `extract` (features into the cache), `train` (decoder with
//! early stopping), `segment` (posteriors → refinement → decoding) and
//! `eval` (tolerant scoring). Every subcommand honors `--config <file>`;
//! command-line flags override file values, which override defaults.
//!
//! Exit codes: 0 success, 1 partial failure (some recordings skipped),
//! 2 configuration or data error.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use topseg::config::RunConfig;
use topseg::decoder::{
    intervals_from_labels, labels_from_intervals, read_label_file, write_label_file,
    LabelSequence, Model, PosteriorSequence,
};
use topseg::embed::ScaleConfig;
use topseg::eval::{
    aggregate, render_report, report_key_values, score, score_event_onsets, split_subjects,
    subsample_subjects, ClassCounts, EventCounts, Manifest, ManifestEntry,
};
use topseg::features::{
    cache_read, cache_write, calibrate_grids, extract_features, CacheHeader, FrameFeatureMatrix,
    GridCalibration,
};
use topseg::refine::{constrained_decode, refine_pgd, TopologyTarget};
use topseg::signal::{chunk_or_loop, load_wav, preprocess, write_wav, ChunkMode, Recording};
use topseg::synth::generate;

#[derive(Parser)]
#[command(name = "topseg", version, about = "Heart-sound segmentation pipeline")]
struct Cli {
    /// TOML configuration file; flags override file values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker thread bound (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// Master seed for synthesis, subsampling and training.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic recordings with ground-truth labels.
    Synth(SynthArgs),
    /// Preprocess recordings and fill the feature cache.
    Extract(ExtractArgs),
    /// Train the framewise decoder with early stopping.
    Train(TrainArgs),
    /// Segment recordings: posteriors, refinement, constrained decoding.
    Segment(SegmentArgs),
    /// Score predictions against reference labels.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory (default: configured data dir).
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Number of recordings to generate.
    #[arg(long, default_value_t = 50)]
    n: usize,

    /// Noise SNR in dB ("inf" for clean signals).
    #[arg(long)]
    snr: Option<f64>,

    /// Recording length in seconds.
    #[arg(long)]
    duration: Option<f64>,
}

#[derive(Args)]
struct ExtractArgs {
    /// Input directory of WAV recordings.
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,

    /// Feature cache directory.
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Input directory of WAVs, labels and the subject manifest.
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,

    /// Feature cache directory.
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,

    /// Where to write the trained model.
    #[arg(long, value_name = "FILE")]
    model_out: Option<PathBuf>,

    /// Subject budget as a percentage in (0, 100].
    #[arg(long)]
    budget: Option<f64>,

    /// Decoder architecture: tcn or mlp.
    #[arg(long)]
    arch: Option<String>,

    /// Maximum training epochs.
    #[arg(long)]
    epochs: Option<usize>,
}

#[derive(Args)]
struct SegmentArgs {
    /// Trained model file (default: configured model path).
    #[arg(long, value_name = "FILE")]
    model: Option<PathBuf>,

    /// Input directory of WAV recordings.
    #[arg(long, value_name = "DIR")]
    data_dir: Option<PathBuf>,

    /// Feature cache directory.
    #[arg(long, value_name = "DIR")]
    cache_dir: Option<PathBuf>,

    /// Output directory for label files and posterior dumps.
    #[arg(long, value_name = "DIR")]
    out_dir: Option<PathBuf>,

    /// Skip the topology-guided refinement and decode raw posteriors.
    #[arg(long)]
    no_refine: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted label files.
    #[arg(long, value_name = "DIR")]
    pred_dir: Option<PathBuf>,

    /// Directory of reference label files.
    #[arg(long, value_name = "DIR")]
    truth_dir: Option<PathBuf>,

    /// Boundary tolerance in seconds.
    #[arg(long)]
    tol: Option<f64>,

    /// Metrics file to write (default: <output_dir>/metrics.txt).
    #[arg(long, value_name = "FILE")]
    metrics_out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run() {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<u8> {
    let cli = Cli::parse();
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    cfg.validate()?;
    if cfg.jobs > 0 {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build_global();
    }
    match &cli.cmd {
        Cmd::Synth(args) => cmd_synth(cfg, args),
        Cmd::Extract(args) => cmd_extract(cfg, args),
        Cmd::Train(args) => cmd_train(cfg, args),
        Cmd::Segment(args) => cmd_segment(cfg, args),
        Cmd::Eval(args) => cmd_eval(cfg, args),
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

fn cmd_synth(mut cfg: RunConfig, args: &SynthArgs) -> Result<u8> {
    if let Some(snr) = args.snr {
        cfg.synth.noise_snr = snr;
    }
    if let Some(duration) = args.duration {
        cfg.synth.duration = duration;
    }
    let out_dir = args.out_dir.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let mut manifest = Manifest::default();
    for k in 0..args.n {
        let mut synth_cfg = cfg.synth.clone();
        synth_cfg.seed = cfg.seed + k as u64;
        let (rec, labels) = generate(&synth_cfg)?;
        write_wav(&out_dir.join(format!("{}.wav", rec.id)), &rec)?;
        write_label_file(
            &out_dir.join(format!("{}.labels", rec.id)),
            &intervals_from_labels(&labels),
        )?;
        // One subject per recording: subject-level operations then act at
        // recording granularity on synthetic corpora.
        manifest.entries.push(ManifestEntry {
            recording: rec.id.clone(),
            subject: rec.id,
        });
    }
    manifest.write(&out_dir.join("manifest.tsv"))?;
    println!(
        "synth: wrote {} recording{} to {}",
        args.n,
        if args.n == 1 { "" } else { "s" },
        out_dir.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// Shared pipeline plumbing.
// ---------------------------------------------------------------------------

/// WAV files in `dir` as sorted `(stem, path)` pairs.
fn list_wavs(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading input directory {}", dir.display()))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Label files in `dir` as sorted `(stem, path)` pairs.
fn list_labels(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading label directory {}", dir.display()))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "labels") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}

fn cache_path(cache_dir: &Path, id: &str) -> PathBuf {
    cache_dir.join(format!("{id}.feat"))
}

/// Stored grid calibration together with the configuration that made it.
#[derive(serde::Serialize, serde::Deserialize)]
struct CalibrationFile {
    params: topseg::features::FeatureParams,
    scales: Vec<ScaleConfig>,
    calibration: GridCalibration,
}

/// Load a matching stored calibration or compute one from the first few
/// preprocessed recordings and store it.
fn load_or_calibrate(
    cfg: &RunConfig,
    scales: &[ScaleConfig],
    cache_dir: &Path,
    recordings: &mut dyn FnMut() -> Result<Vec<Recording>>,
) -> Result<GridCalibration> {
    let path = cache_dir.join("calibration.json");
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(stored) = serde_json::from_str::<CalibrationFile>(&text) {
            let same_params = serde_json::to_string(&stored.params).unwrap()
                == serde_json::to_string(&cfg.features).unwrap();
            if same_params && stored.scales == scales {
                log::info!("calibration: reusing {}", path.display());
                return Ok(stored.calibration);
            }
            log::info!("calibration: {} is stale, recomputing", path.display());
        }
    }
    let recs = recordings()?;
    let t0 = Instant::now();
    let calibration = calibrate_grids(&recs, scales, &cfg.features)?;
    println!(
        "calibration: {} recording{} in {:.2} s",
        recs.len(),
        if recs.len() == 1 { "" } else { "s" },
        t0.elapsed().as_secs_f64()
    );
    let file = CalibrationFile {
        params: cfg.features.clone(),
        scales: scales.to_vec(),
        calibration: calibration.clone(),
    };
    std::fs::write(&path, serde_json::to_string_pretty(&file).unwrap())
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(calibration)
}

/// First fixed-length chunk of a preprocessed recording; calibration runs
/// on the same loop-padded chunks that extraction sees, so every scale has
/// its full window span available.
fn calibration_chunk(rec: &Recording, cfg: &RunConfig) -> Result<Recording> {
    let pre = preprocess(rec, &cfg.preprocess)?;
    let mut chunks = chunk_or_loop(&pre, cfg.preprocess.chunk_seconds, ChunkMode::Inference)?;
    Ok(chunks.remove(0).recording)
}

/// Preprocess and featurize one recording: 10 s chunks (loop-padded at the
/// tail), per-chunk extraction, rows concatenated and trimmed to the true
/// recording length.
fn features_for(
    rec: &Recording,
    cfg: &RunConfig,
    scales: &[ScaleConfig],
    calibration: &GridCalibration,
) -> Result<FrameFeatureMatrix> {
    let pre = preprocess(rec, &cfg.preprocess)?;
    let chunks = chunk_or_loop(&pre, cfg.preprocess.chunk_seconds, ChunkMode::Inference)?;
    let mut rows: Vec<f32> = Vec::new();
    let mut frames = 0usize;
    let mut width = 0usize;
    for chunk in &chunks {
        let fm = extract_features(&chunk.recording, scales, &cfg.features, calibration)?;
        width = fm.width;
        frames += fm.frames;
        rows.extend_from_slice(&fm.features);
    }
    let true_frames = (pre.duration_seconds() * cfg.features.frame_rate).ceil() as usize;
    let keep = true_frames.min(frames);
    rows.truncate(keep * width);
    Ok(FrameFeatureMatrix {
        features: rows,
        frames: keep,
        width,
        frame_rate: cfg.features.frame_rate,
        recording_id: rec.id.clone(),
    })
}

/// Read a cached matrix if it matches the current configuration.
fn cached_features(
    path: &Path,
    id: &str,
    cfg: &RunConfig,
    scales: &[ScaleConfig],
    calibration: &GridCalibration,
) -> Option<FrameFeatureMatrix> {
    let (fm, header) = cache_read(path).ok()?;
    (header.matches(&cfg.features, calibration, scales) && header.recording_id == id)
        .then_some(fm)
}

/// Per-recording outcome bookkeeping shared by the batch subcommands.
struct Tally {
    failures: Vec<String>,
}

impl Tally {
    fn new() -> Tally {
        Tally { failures: Vec::new() }
    }

    fn fail(&mut self, id: &str, err: &dyn std::fmt::Display) {
        log::error!("{id}: {err}");
        self.failures.push(id.to_string());
    }

    /// Exit code: 0 when clean, 1 when some recordings failed.
    fn code(&self, label: &str) -> u8 {
        if self.failures.is_empty() {
            0
        } else {
            eprintln!("{label}: {} failed: {}", self.failures.len(), self.failures.join(", "));
            1
        }
    }
}

// ---------------------------------------------------------------------------
// extract
// ---------------------------------------------------------------------------

fn cmd_extract(mut cfg: RunConfig, args: &ExtractArgs) -> Result<u8> {
    if let Some(dir) = &args.data_dir {
        cfg.paths.data_dir = dir.clone();
    }
    if let Some(dir) = &args.cache_dir {
        cfg.paths.cache_dir = Some(dir.clone());
    }
    let data_dir = cfg.paths.data_dir.clone();
    let cache_dir = cfg.paths.resolved_cache_dir();
    std::fs::create_dir_all(&cache_dir)
        .with_context(|| format!("creating {}", cache_dir.display()))?;
    let scales = cfg.resolved_scales()?;

    let wavs = list_wavs(&data_dir)?;
    if wavs.is_empty() {
        println!("extract: 0 recordings in {}", data_dir.display());
        return Ok(0);
    }

    let mut tally = Tally::new();
    // Preprocess up front (needed for calibration), skipping bad inputs.
    let mut loaded: Vec<(String, Recording)> = Vec::new();
    for (id, path) in &wavs {
        match load_wav(path) {
            Ok(rec) => loaded.push((id.clone(), rec)),
            Err(err) => tally.fail(id, &err),
        }
    }

    let calibration = {
        let max = cfg.features.calibration_max_recordings.max(1);
        let cfg_ref = &cfg;
        let loaded_ref = &loaded;
        let mut make = move || -> Result<Vec<Recording>> {
            let mut recs = Vec::new();
            for (_, rec) in loaded_ref.iter().take(max) {
                recs.push(calibration_chunk(rec, cfg_ref)?);
            }
            if recs.is_empty() {
                bail!("no readable recordings to calibrate on");
            }
            Ok(recs)
        };
        load_or_calibrate(&cfg, &scales, &cache_dir, &mut make)?
    };

    let mut fresh = 0usize;
    let mut warm = 0usize;
    for (id, rec) in &loaded {
        let path = cache_path(&cache_dir, id);
        if cached_features(&path, id, &cfg, &scales, &calibration).is_some() {
            println!("extract: {id} cached, skipping");
            warm += 1;
            continue;
        }
        let t0 = Instant::now();
        match features_for(rec, &cfg, &scales, &calibration) {
            Ok(fm) => {
                let header = CacheHeader::new(&fm, &cfg.features, &calibration, &scales);
                cache_write(&fm, &header, &path)?;
                fresh += 1;
                println!(
                    "extract: {id} {} frames x {} in {:.2} s",
                    fm.frames,
                    fm.width,
                    t0.elapsed().as_secs_f64()
                );
            }
            Err(err) => tally.fail(id, &err),
        }
    }
    println!(
        "extract: {fresh} extracted, {warm} cached, {} failed",
        tally.failures.len()
    );
    Ok(tally.code("extract"))
}

/// Features for a set of recordings, via the cache when possible.
fn gather_features(
    ids: &[String],
    cfg: &RunConfig,
    data_dir: &Path,
    cache_dir: &Path,
) -> Result<BTreeMap<String, FrameFeatureMatrix>> {
    let scales = cfg.resolved_scales()?;
    std::fs::create_dir_all(cache_dir)
        .with_context(|| format!("creating {}", cache_dir.display()))?;
    let wavs: BTreeMap<String, PathBuf> = list_wavs(data_dir)?.into_iter().collect();

    let calibration = {
        let max = cfg.features.calibration_max_recordings.max(1);
        let mut make = || -> Result<Vec<Recording>> {
            let mut recs = Vec::new();
            for id in ids.iter().take(max) {
                let path = wavs
                    .get(id)
                    .ok_or_else(|| anyhow!("{id}: no WAV in {}", data_dir.display()))?;
                recs.push(calibration_chunk(&load_wav(path)?, cfg)?);
            }
            if recs.is_empty() {
                bail!("no recordings to calibrate on");
            }
            Ok(recs)
        };
        load_or_calibrate(cfg, &scales, cache_dir, &mut make)?
    };

    let mut out = BTreeMap::new();
    for id in ids {
        let path = cache_path(cache_dir, id);
        if let Some(fm) = cached_features(&path, id, cfg, &scales, &calibration) {
            out.insert(id.clone(), fm);
            continue;
        }
        let wav = wavs
            .get(id)
            .ok_or_else(|| anyhow!("{id}: no cached features and no WAV in {}", data_dir.display()))?;
        let t0 = Instant::now();
        let rec = load_wav(wav)?;
        let fm = features_for(&rec, cfg, &scales, &calibration)?;
        let header = CacheHeader::new(&fm, &cfg.features, &calibration, &scales);
        cache_write(&fm, &header, &path)?;
        println!(
            "features: {id} {} frames x {} in {:.2} s",
            fm.frames,
            fm.width,
            t0.elapsed().as_secs_f64()
        );
        out.insert(id.clone(), fm);
    }
    Ok(out)
}

/// Reference labels for one recording, resampled onto the feature grid.
fn truth_labels(data_dir: &Path, id: &str, frame_rate: f64, frames: usize) -> Result<LabelSequence> {
    let path = data_dir.join(format!("{id}.labels"));
    let intervals = read_label_file(&path)
        .with_context(|| format!("{id}: missing or unreadable labels"))?;
    Ok(labels_from_intervals(&intervals, frame_rate, frames)?)
}

/// Subject manifest, or an identity manifest (subject = recording) when
/// the data directory has none.
fn load_manifest(data_dir: &Path, ids: &[String]) -> Result<Manifest> {
    let path = data_dir.join("manifest.tsv");
    if path.exists() {
        let manifest = Manifest::read(&path)?;
        let known: std::collections::HashSet<&str> =
            ids.iter().map(|s| s.as_str()).collect();
        let entries: Vec<ManifestEntry> = manifest
            .entries
            .into_iter()
            .filter(|e| known.contains(e.recording.as_str()))
            .collect();
        if entries.is_empty() {
            bail!("manifest {} has no entry for any input recording", path.display());
        }
        return Ok(Manifest { entries });
    }
    log::warn!("no manifest.tsv in {}; treating each recording as its own subject", data_dir.display());
    Ok(Manifest {
        entries: ids
            .iter()
            .map(|id| ManifestEntry {
                recording: id.clone(),
                subject: id.clone(),
            })
            .collect(),
    })
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

/// Decorrelates the validation-split shuffle from the training seed.
const VAL_SPLIT_SALT: u64 = 0x53504c49;

fn cmd_train(mut cfg: RunConfig, args: &TrainArgs) -> Result<u8> {
    if let Some(dir) = &args.data_dir {
        cfg.paths.data_dir = dir.clone();
    }
    if let Some(dir) = &args.cache_dir {
        cfg.paths.cache_dir = Some(dir.clone());
    }
    if let Some(path) = &args.model_out {
        cfg.paths.model_path = path.clone();
    }
    if let Some(budget) = args.budget {
        cfg.budget = budget;
    }
    if let Some(arch) = &args.arch {
        cfg.decoder.arch = match arch.to_ascii_lowercase().as_str() {
            "tcn" => topseg::decoder::Arch::Tcn,
            "mlp" => topseg::decoder::Arch::Mlp,
            other => bail!("unknown architecture {other:?} (expected tcn or mlp)"),
        };
    }
    if let Some(epochs) = args.epochs {
        cfg.decoder.epochs = epochs;
    }
    cfg.validate()?;
    cfg.decoder.seed = cfg.seed;

    let data_dir = cfg.paths.data_dir.clone();
    let cache_dir = cfg.paths.resolved_cache_dir();
    let ids: Vec<String> = list_wavs(&data_dir)?.into_iter().map(|(id, _)| id).collect();
    if ids.is_empty() {
        bail!("no recordings in {}", data_dir.display());
    }

    let manifest = load_manifest(&data_dir, &ids)?;
    let budgeted = subsample_subjects(&manifest, cfg.budget_fraction(), cfg.seed)?;
    println!(
        "train: budget {:.0}% keeps {} of {} subjects ({} recordings)",
        cfg.budget,
        budgeted.subjects().len(),
        manifest.subjects().len(),
        budgeted.entries.len()
    );
    let (train_m, val_m) = split_subjects(&budgeted, 0.2, cfg.seed ^ VAL_SPLIT_SALT)?;

    let keep: Vec<String> = budgeted.entries.iter().map(|e| e.recording.clone()).collect();
    let features = gather_features(&keep, &cfg, &data_dir, &cache_dir)?;
    let mut labels: BTreeMap<String, LabelSequence> = BTreeMap::new();
    for (id, fm) in &features {
        labels.insert(
            id.clone(),
            truth_labels(&data_dir, id, fm.frame_rate, fm.frames)?,
        );
    }
    let items_of = |m: &Manifest| -> Vec<(&FrameFeatureMatrix, &LabelSequence)> {
        m.entries
            .iter()
            .map(|e| (&features[&e.recording], &labels[&e.recording]))
            .collect()
    };
    let train_items = items_of(&train_m);
    let val_items = items_of(&val_m);
    println!(
        "train: {} training / {} validation recordings, arch {:?}",
        train_items.len(),
        val_items.len(),
        cfg.decoder.arch
    );

    let t0 = Instant::now();
    let outcome = topseg::decoder::train_early_stopping(&train_items, &val_items, 10, &cfg.decoder)?;
    let elapsed = t0.elapsed().as_secs_f64();
    topseg::decoder::save_model(&outcome.model, &cfg.paths.model_path)?;

    let out_dir = cfg.paths.output_dir.clone();
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let mut log_text = String::new();
    use std::fmt::Write as _;
    let _ = writeln!(log_text, "seed={}", cfg.seed);
    let _ = writeln!(log_text, "budget={:.2}", cfg.budget);
    let _ = writeln!(log_text, "train_recordings={}", train_items.len());
    let _ = writeln!(log_text, "val_recordings={}", val_items.len());
    for (epoch, loss) in outcome.loss_trace.iter().enumerate() {
        let val = outcome
            .val_trace
            .get(epoch)
            .map(|v| format!(" val_loss={v:.6}"))
            .unwrap_or_default();
        let _ = writeln!(log_text, "epoch={} train_loss={loss:.6}{val}", epoch + 1);
    }
    let _ = writeln!(log_text, "best_epoch={}", outcome.best_epoch + 1);
    let _ = writeln!(log_text, "stopped_early={}", outcome.stopped_early);
    let log_path = out_dir.join("train.log");
    std::fs::write(&log_path, log_text)
        .with_context(|| format!("writing {}", log_path.display()))?;

    println!(
        "train: best epoch {} of {} in {:.1} s -> {}",
        outcome.best_epoch + 1,
        outcome.loss_trace.len(),
        elapsed,
        cfg.paths.model_path.display()
    );
    Ok(0)
}

// ---------------------------------------------------------------------------
// segment
// ---------------------------------------------------------------------------

fn cmd_segment(mut cfg: RunConfig, args: &SegmentArgs) -> Result<u8> {
    if let Some(path) = &args.model {
        cfg.paths.model_path = path.clone();
    }
    if let Some(dir) = &args.data_dir {
        cfg.paths.data_dir = dir.clone();
    }
    if let Some(dir) = &args.cache_dir {
        cfg.paths.cache_dir = Some(dir.clone());
    }
    if let Some(dir) = &args.out_dir {
        cfg.paths.output_dir = dir.clone();
    }
    let data_dir = cfg.paths.data_dir.clone();
    let cache_dir = cfg.paths.resolved_cache_dir();
    let out_dir = cfg.paths.output_dir.clone();
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;

    let model = topseg::decoder::load_model(&cfg.paths.model_path)
        .with_context(|| format!("loading model {}", cfg.paths.model_path.display()))?;

    let ids: Vec<String> = list_wavs(&data_dir)?.into_iter().map(|(id, _)| id).collect();
    if ids.is_empty() {
        println!("segment: 0 recordings in {}", data_dir.display());
        return Ok(0);
    }
    let features = gather_features(&ids, &cfg, &data_dir, &cache_dir)?;

    let mut tally = Tally::new();
    for (id, fm) in &features {
        let t0 = Instant::now();
        match segment_one(&model, fm, &cfg, args.no_refine) {
            Ok((labels, posterior)) => {
                write_label_file(
                    &out_dir.join(format!("{id}.labels")),
                    &intervals_from_labels(&labels),
                )?;
                let dump_path = out_dir.join(format!("{id}.posteriors.tsv"));
                std::fs::write(&dump_path, posterior_dump(&posterior))
                    .with_context(|| format!("writing {}", dump_path.display()))?;
                println!("segment: {id} in {:.2} s", t0.elapsed().as_secs_f64());
            }
            Err(err) => tally.fail(id, &err),
        }
    }
    Ok(tally.code("segment"))
}

fn segment_one(
    model: &Model,
    fm: &FrameFeatureMatrix,
    cfg: &RunConfig,
    no_refine: bool,
) -> Result<(LabelSequence, PosteriorSequence)> {
    let raw = model.forward(fm)?;
    let posterior = if no_refine {
        raw
    } else {
        let target =
            TopologyTarget::from_features(fm, cfg.features.layers, cfg.features.grid_len, &cfg.refine)?;
        refine_pgd(&raw, &target, &cfg.refine)?.posterior
    };
    let labels = constrained_decode(&posterior, &cfg.refine.min_durations);
    Ok((labels, posterior))
}

/// Tab-separated posterior rows, one frame per line.
fn posterior_dump(p: &PosteriorSequence) -> String {
    let mut s = String::with_capacity(p.frames * 48);
    s.push_str("# s1\tsystole\ts2\tdiastole\n");
    for t in 0..p.frames {
        let row = p.row(t);
        use std::fmt::Write as _;
        let _ = writeln!(s, "{:.9}\t{:.9}\t{:.9}\t{:.9}", row[0], row[1], row[2], row[3]);
    }
    s
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn cmd_eval(mut cfg: RunConfig, args: &EvalArgs) -> Result<u8> {
    if let Some(tol) = args.tol {
        cfg.eval.tolerance = tol;
    }
    let pred_dir = args.pred_dir.clone().unwrap_or_else(|| cfg.paths.output_dir.clone());
    let truth_dir = args.truth_dir.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    let tol = cfg.eval.tolerance;
    if tol < 0.0 {
        bail!("tolerance must be >= 0, got {tol}");
    }
    let frame_rate = cfg.features.frame_rate;

    let preds: BTreeMap<String, PathBuf> = list_labels(&pred_dir)?.into_iter().collect();
    let truths: BTreeMap<String, PathBuf> = list_labels(&truth_dir)?.into_iter().collect();
    let shared: Vec<&String> = preds.keys().filter(|id| truths.contains_key(*id)).collect();
    if shared.is_empty() {
        bail!(
            "no recording ids shared between {} and {}",
            pred_dir.display(),
            truth_dir.display()
        );
    }
    let mut unmatched: Vec<&String> = preds
        .keys()
        .filter(|id| !truths.contains_key(*id))
        .chain(truths.keys().filter(|id| !preds.contains_key(*id)))
        .collect();
    unmatched.sort();
    for id in &unmatched {
        log::warn!("{id}: present on only one side, excluded");
    }

    let mut tally = Tally::new();
    let mut frame_counts: Vec<[ClassCounts; 4]> = Vec::new();
    let mut event_totals = [EventCounts::default(); 4];
    for id in &shared {
        let result = (|| -> Result<()> {
            let truth_iv = read_label_file(&truths[*id])?;
            let pred_iv = read_label_file(&preds[*id])?;
            let end = truth_iv.iter().map(|iv| iv.end).fold(0.0, f64::max);
            let frames = (end * frame_rate).round().max(1.0) as usize;
            let truth = labels_from_intervals(&truth_iv, frame_rate, frames)?;
            let pred = labels_from_intervals(&pred_iv, frame_rate, frames)?;
            let counts = score(&pred, &truth, tol)?;
            let report = aggregate(&[counts], tol)?;
            println!("eval: {id} macro_f1={:.4}", report.macro_f1);
            frame_counts.push(counts);
            for (total, ev) in event_totals
                .iter_mut()
                .zip(score_event_onsets(&pred, &truth, tol)?)
            {
                total.tp += ev.tp;
                total.fp += ev.fp;
                total.missed += ev.missed;
            }
            Ok(())
        })();
        if let Err(err) = result {
            tally.fail(id, &err);
        }
    }
    if frame_counts.is_empty() {
        bail!("no recordings could be scored");
    }

    let report = aggregate(&frame_counts, tol)?;
    print!("{}", render_report(&report));
    println!("  onset diagnostics (one-to-one within tolerance):");
    for (c, state) in topseg::decoder::HeartState::ALL.iter().enumerate() {
        println!(
            "  {:<9}  F1 {:.4}  (tp {}, fp {}, missed {})",
            state.as_str(),
            event_totals[c].f1(),
            event_totals[c].tp,
            event_totals[c].fp,
            event_totals[c].missed
        );
    }

    let metrics_path = args
        .metrics_out
        .clone()
        .unwrap_or_else(|| cfg.paths.output_dir.join("metrics.txt"));
    if let Some(parent) = metrics_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .with_context(|| format!("creating {}", parent.display()))?;
        }
    }
    std::fs::write(&metrics_path, report_key_values(&report))
        .with_context(|| format!("writing {}", metrics_path.display()))?;
    println!("eval: metrics -> {}", metrics_path.display());

    let partial = !unmatched.is_empty() || !tally.failures.is_empty();
    let _ = tally.code("eval");
    Ok(if partial { 1 } else { 0 })
}
