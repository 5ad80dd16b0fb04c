//! Multi-scale topological feature extraction and the on-disk feature cache.
//!
//! For each recording chunk, every scale's embedded trajectory is swept with
//! windows of length `m·W` (hop = one stream sample). Each window yields a
//! persistence diagram and a flattened `2KG` landscape vector attached to the
//! center of the window's signal footprint. The three global streams are
//! averaged per frame with a nearest-available fallback at the edges;
//! meso/fine streams are linearly interpolated onto the common 60 Hz frame
//! grid. The concatenation [global | meso | fine] gives the `T × 3·2KG`
//! frame feature matrix, cached as a versioned little-endian binary file.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::{delay_embed, EmbeddedTrajectory, ScaleConfig, ScaleName};
use crate::error::{Error, Result};
use crate::homology::{DiagramEngine, SweepKnn, TrajectoryDistances};
use crate::landscape::{diagram_to_landscape, flatten};
use crate::signal::{decimate_polyphase, Recording};

/// Window positions handled per parallel work item; each chunk amortizes one
/// full k-NN initialization over incremental single-sample advances.
const SWEEP_CHUNK: usize = 256;

/// Landscape/grid/frame parameters (config file section `[features]`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureParams {
    /// Landscape layers K.
    pub layers: usize,
    /// Landscape grid points G.
    pub grid_len: usize,
    /// Clip-radius quantile q of the k-NN edge lengths.
    pub quantile: f64,
    /// Common decoder frame rate in Hz.
    pub frame_rate: f64,
    /// Upper bound on recordings used by the grid calibration pass.
    pub calibration_max_recordings: usize,
}

impl Default for FeatureParams {
    fn default() -> Self {
        FeatureParams {
            layers: 5,
            grid_len: 128,
            quantile: 0.95,
            frame_rate: 60.0,
            calibration_max_recordings: 8,
        }
    }
}

impl FeatureParams {
    /// Width of one scale block: 2KG (H0 and H1 landscapes).
    pub fn block_width(&self) -> usize {
        2 * self.layers * self.grid_len
    }

    /// Total feature width D_topo = 3·2KG ([global | meso | fine]).
    pub fn total_width(&self) -> usize {
        3 * self.block_width()
    }

    /// Column offset of the fine-scale block.
    pub fn fine_block_offset(&self) -> usize {
        2 * self.block_width()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 || self.grid_len < 2 {
            return Err(Error::Config(format!(
                "landscape shape K={} G={} is degenerate",
                self.layers, self.grid_len
            )));
        }
        if !(0.90..=0.99).contains(&self.quantile) {
            return Err(Error::Config(format!(
                "quantile {} outside the supported range [0.90, 0.99]",
                self.quantile
            )));
        }
        if self.frame_rate <= 0.0 {
            return Err(Error::Config("frame_rate must be positive".into()));
        }
        if self.calibration_max_recordings == 0 {
            return Err(Error::Config(
                "calibration needs at least one recording".into(),
            ));
        }
        Ok(())
    }
}

/// Sweep geometry of one scale over one stream.
#[derive(Debug, Clone)]
pub struct WindowSweepConfig {
    pub scale: ScaleConfig,
    /// Signal footprint length of one window, in seconds (L = m·W, capped
    /// at the available stream duration).
    pub window_len: f64,
    /// Hop in seconds: one stream sample.
    pub hop: f64,
}

impl WindowSweepConfig {
    /// Sweep geometry for a scale over `available_seconds` of stream.
    pub fn for_scale(scale: &ScaleConfig, available_seconds: f64) -> Result<Self> {
        scale.validate()?;
        let nominal = scale.window_multiplier * scale.window_seconds();
        Ok(WindowSweepConfig {
            scale: scale.clone(),
            window_len: nominal.min(available_seconds),
            hop: 1.0 / scale.stream_rate,
        })
    }

    /// Number of trajectory points inside one window, clamped to the
    /// trajectory length; 0 when the trajectory cannot host a window.
    fn points_per_window(&self, traj_len: usize) -> Result<usize> {
        let rate = self.scale.stream_rate;
        let footprint = (self.window_len * rate).round() as usize;
        let span = self.scale.window_samples()?;
        if footprint <= span {
            return Ok(0);
        }
        Ok((footprint - span + 1).min(traj_len))
    }
}

/// One swept window: flattened `2KG` landscape vector at its footprint
/// center time.
#[derive(Debug, Clone)]
pub struct WindowDescriptor {
    pub center_time: f64,
    pub vector: Vec<f64>,
}

fn window_center(traj: &EmbeddedTrajectory, scale: &ScaleConfig, start: usize, n_win: usize) -> f64 {
    let span = (scale.dim - 1) as f64 * (scale.tau * scale.stream_rate).round();
    traj.origin_time + (start as f64 + ((n_win - 1) as f64 + span) / 2.0) / scale.stream_rate
}

/// Sweep one embedded trajectory: persistence → landscapes → flattened
/// vector per window position. Returns an empty list (with a warning) when
/// the trajectory is shorter than one window.
pub fn sweep_scale(
    traj: &EmbeddedTrajectory,
    cfg: &WindowSweepConfig,
    params: &FeatureParams,
    grid_max: f64,
) -> Result<Vec<WindowDescriptor>> {
    params.validate()?;
    let n_win = cfg.points_per_window(traj.len)?;
    if n_win < 2 || traj.len < n_win {
        log::warn!(
            "scale {}: trajectory of {} points cannot host a window of {} points",
            cfg.scale.name,
            traj.len,
            n_win.max(2)
        );
        return Ok(Vec::new());
    }
    let count = traj.len - n_win + 1;
    let (k, g) = (params.layers, params.grid_len);
    let dists = TrajectoryDistances::build(&traj.points, traj.dim, n_win - 1)?;
    let chunks: Result<Vec<Vec<WindowDescriptor>>> = (0..count.div_ceil(SWEEP_CHUNK))
        .into_par_iter()
        .map_init(DiagramEngine::new, |engine, ci| {
            let lo = ci * SWEEP_CHUNK;
            let hi = (lo + SWEEP_CHUNK).min(count);
            let mut knn = SweepKnn::new(&dists, lo, n_win)?;
            let mut out = Vec::with_capacity(hi - lo);
            for start in lo..hi {
                if start > lo {
                    knn.advance();
                }
                let edges = knn.edges(params.quantile)?;
                let diagram = engine.diagram(&edges);
                let h0 = diagram_to_landscape(&diagram, 0, k, g, 0.0, grid_max)?;
                let h1 = diagram_to_landscape(&diagram, 1, k, g, 0.0, grid_max)?;
                out.push(WindowDescriptor {
                    center_time: window_center(traj, &cfg.scale, start, n_win),
                    vector: flatten(&h0, &h1)?,
                });
            }
            Ok(out)
        })
        .collect();
    Ok(chunks?.into_iter().flatten().collect())
}

/// Clip radii of every window position of one trajectory (calibration pass;
/// skips landscape computation).
fn sweep_clip_radii(
    traj: &EmbeddedTrajectory,
    cfg: &WindowSweepConfig,
    params: &FeatureParams,
) -> Result<Vec<f64>> {
    let n_win = cfg.points_per_window(traj.len)?;
    if n_win < 2 || traj.len < n_win {
        return Ok(Vec::new());
    }
    let count = traj.len - n_win + 1;
    let dists = TrajectoryDistances::build(&traj.points, traj.dim, n_win - 1)?;
    let chunks: Result<Vec<Vec<f64>>> = (0..count.div_ceil(SWEEP_CHUNK))
        .into_par_iter()
        .map(|ci| {
            let lo = ci * SWEEP_CHUNK;
            let hi = (lo + SWEEP_CHUNK).min(count);
            let mut knn = SweepKnn::new(&dists, lo, n_win)?;
            let mut out = Vec::with_capacity(hi - lo);
            for start in lo..hi {
                if start > lo {
                    knn.advance();
                }
                out.push(knn.edges(params.quantile)?.clip_radius);
            }
            Ok(out)
        })
        .collect();
    Ok(chunks?.into_iter().flatten().collect())
}

/// Per-scale landscape grid ranges R (upper grid bound; lower bound is 0),
/// calibrated once and persisted with every cache file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCalibration {
    /// Scale name → grid upper bound R.
    pub ranges: BTreeMap<ScaleName, f64>,
}

impl GridCalibration {
    pub fn range_for(&self, name: ScaleName) -> Result<f64> {
        self.ranges
            .get(&name)
            .copied()
            .ok_or_else(|| Error::Config(format!("no calibrated grid range for scale {name}")))
    }
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Calibrate per-scale grid ranges as the median window clip radius over the
/// given preprocessed 600 Hz recordings.
pub fn calibrate_grids(
    recordings: &[Recording],
    scales: &[ScaleConfig],
    params: &FeatureParams,
) -> Result<GridCalibration> {
    params.validate()?;
    if recordings.is_empty() {
        return Err(Error::Config("calibration needs at least one recording".into()));
    }
    let mut per_scale: BTreeMap<ScaleName, Vec<f64>> = BTreeMap::new();
    for rec in recordings {
        let streams = ScaleStreams::prepare(rec, params)?;
        for scale in scales {
            let stream = streams.for_scale(scale)?;
            let traj = delay_embed(stream, scale)?;
            let cfg = WindowSweepConfig::for_scale(scale, stream.duration_seconds())?;
            let clips = sweep_clip_radii(&traj, &cfg, params)?;
            per_scale.entry(scale.name).or_default().extend(clips);
        }
    }
    let mut ranges = BTreeMap::new();
    for scale in scales {
        let mut clips = per_scale.remove(&scale.name).unwrap_or_default();
        if clips.is_empty() {
            return Err(Error::RecordingTooShort {
                id: "<calibration set>".into(),
                detail: format!("no complete window at scale {}", scale.name),
            });
        }
        let r = median(&mut clips);
        if r <= 0.0 {
            return Err(Error::Config(format!(
                "degenerate calibration range {r} at scale {} (constant signals?)",
                scale.name
            )));
        }
        ranges.insert(scale.name, r);
    }
    Ok(GridCalibration { ranges })
}

/// The two stream rates a recording is analyzed at: the native fine stream
/// and its decimation for the global branch.
struct ScaleStreams {
    fine: Recording,
    global: Recording,
}

impl ScaleStreams {
    fn prepare(rec600: &Recording, params: &FeatureParams) -> Result<Self> {
        let global = decimate_polyphase(rec600, params.frame_rate)?;
        Ok(ScaleStreams {
            fine: rec600.clone(),
            global,
        })
    }

    fn for_scale(&self, scale: &ScaleConfig) -> Result<&Recording> {
        let stream = if scale.name.is_global() {
            &self.global
        } else {
            &self.fine
        };
        if (stream.sample_rate - scale.stream_rate).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "scale {} wants a {} Hz stream; pipeline provides {} Hz",
                scale.name, scale.stream_rate, stream.sample_rate
            )));
        }
        Ok(stream)
    }
}

/// Framewise topological features of one recording chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameFeatureMatrix {
    /// Row-major `frames × width` matrix.
    pub features: Vec<f32>,
    pub frames: usize,
    pub width: usize,
    pub frame_rate: f64,
    pub recording_id: String,
}

impl FrameFeatureMatrix {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.features[t * self.width..(t + 1) * self.width]
    }
}

/// Linear interpolation of a descriptor stream onto explicit frame times,
/// with constant extrapolation beyond the first/last center.
pub fn resample_to_frames(
    stream: &[WindowDescriptor],
    frame_times: &[f64],
    width: usize,
) -> Result<Vec<f64>> {
    if stream.is_empty() {
        return Err(Error::Config("cannot resample an empty stream".into()));
    }
    for w in stream {
        if w.vector.len() != width {
            return Err(Error::Config(format!(
                "descriptor width {} does not match expected {width}",
                w.vector.len()
            )));
        }
    }
    let mut out = vec![0.0f64; frame_times.len() * width];
    for (f, &t) in frame_times.iter().enumerate() {
        let row = &mut out[f * width..(f + 1) * width];
        interpolate_into(stream, t, row);
    }
    Ok(out)
}

/// Write the linear interpolation of `stream` at time `t` into `row`.
fn interpolate_into(stream: &[WindowDescriptor], t: f64, row: &mut [f64]) {
    let first = &stream[0];
    let last = &stream[stream.len() - 1];
    if t <= first.center_time {
        row.copy_from_slice(&first.vector);
        return;
    }
    if t >= last.center_time {
        row.copy_from_slice(&last.vector);
        return;
    }
    // Index of the first center strictly greater than t.
    let hi = stream.partition_point(|w| w.center_time <= t);
    let (a, b) = (&stream[hi - 1], &stream[hi]);
    let span = b.center_time - a.center_time;
    let alpha = if span > 0.0 { (t - a.center_time) / span } else { 0.0 };
    for (o, (va, vb)) in row.iter_mut().zip(a.vector.iter().zip(&b.vector)) {
        *o = va + alpha * (vb - va);
    }
}

/// Merge the three global streams into one per-frame stream: element-wise
/// mean of every stream that covers the frame time; frames covered by none
/// are filled from the nearest covered frame.
pub fn assemble_global(
    streams: &[Vec<WindowDescriptor>],
    frame_times: &[f64],
    width: usize,
) -> Result<Vec<f64>> {
    if streams.is_empty() || streams.iter().any(|s| s.is_empty()) {
        return Err(Error::Config("global assembly needs nonempty streams".into()));
    }
    let eps = 1e-9;
    let t_count = frame_times.len();
    let mut out = vec![0.0f64; t_count * width];
    let mut covered = vec![false; t_count];
    let mut scratch = vec![0.0f64; width];
    for (f, &t) in frame_times.iter().enumerate() {
        let row = &mut out[f * width..(f + 1) * width];
        let mut contributors = 0usize;
        for stream in streams {
            let lo = stream[0].center_time;
            let hi = stream[stream.len() - 1].center_time;
            if t < lo - eps || t > hi + eps {
                continue;
            }
            interpolate_into(stream, t, &mut scratch);
            for (o, v) in row.iter_mut().zip(&scratch) {
                *o += v;
            }
            contributors += 1;
        }
        if contributors > 0 {
            let inv = 1.0 / contributors as f64;
            for o in row.iter_mut() {
                *o *= inv;
            }
            covered[f] = true;
        }
    }
    // Edge replication for uncovered frames.
    if !covered.iter().any(|&c| c) {
        return Err(Error::Config("no frame is covered by any global stream".into()));
    }
    let nearest_covered: Vec<usize> = {
        let mut nearest = vec![usize::MAX; t_count];
        let mut last = None;
        for f in 0..t_count {
            if covered[f] {
                last = Some(f);
            }
            if let Some(l) = last {
                nearest[f] = l;
            }
        }
        let mut next = None;
        for f in (0..t_count).rev() {
            if covered[f] {
                next = Some(f);
            }
            if let Some(nx) = next {
                if nearest[f] == usize::MAX || nx - f < f - nearest[f] {
                    nearest[f] = nx;
                }
            }
        }
        nearest
    };
    for f in 0..t_count {
        let src = nearest_covered[f];
        if src != f && !covered[f] {
            let (dst_row, src_row) = if src > f {
                let (a, b) = out.split_at_mut(src * width);
                (&mut a[f * width..(f + 1) * width], &b[..width])
            } else {
                let (a, b) = out.split_at_mut(f * width);
                (&mut b[..width], &a[src * width..(src + 1) * width])
            };
            dst_row.copy_from_slice(src_row);
        }
    }
    Ok(out)
}

fn require_scale<'a>(scales: &'a [ScaleConfig], name: ScaleName) -> Result<&'a ScaleConfig> {
    scales
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::Config(format!("missing configuration for scale {name}")))
}

/// Extract the full frame feature matrix of one preprocessed 600 Hz
/// recording chunk: T × 3·2KG, column blocks [global | meso | fine], each
/// block [H0 | H1].
pub fn extract_features(
    rec600: &Recording,
    scales: &[ScaleConfig],
    params: &FeatureParams,
    calibration: &GridCalibration,
) -> Result<FrameFeatureMatrix> {
    params.validate()?;
    let streams = ScaleStreams::prepare(rec600, params)?;
    let frames = (rec600.duration_seconds() * params.frame_rate).ceil() as usize;
    if frames == 0 {
        return Err(Error::EmptyRecording {
            id: rec600.id.clone(),
        });
    }
    let frame_times: Vec<f64> = (0..frames)
        .map(|f| (f as f64 + 0.5) / params.frame_rate)
        .collect();
    let width = params.block_width();

    let sweep_one = |name: ScaleName| -> Result<Vec<WindowDescriptor>> {
        let scale = require_scale(scales, name)?;
        let stream = streams.for_scale(scale)?;
        let traj = delay_embed(stream, scale).map_err(|e| match e {
            Error::SignalTooShort { scale, needed, got } => Error::RecordingTooShort {
                id: rec600.id.clone(),
                detail: format!("scale {scale} needs {needed} stream samples, got {got}"),
            },
            other => other,
        })?;
        let cfg = WindowSweepConfig::for_scale(scale, stream.duration_seconds())?;
        let descriptors = sweep_scale(&traj, &cfg, params, calibration.range_for(name)?)?;
        if descriptors.is_empty() {
            return Err(Error::RecordingTooShort {
                id: rec600.id.clone(),
                detail: format!("no complete window at scale {name}"),
            });
        }
        Ok(descriptors)
    };

    let global_streams = vec![
        sweep_one(ScaleName::Global2)?,
        sweep_one(ScaleName::Global4)?,
        sweep_one(ScaleName::Global8)?,
    ];
    let global = assemble_global(&global_streams, &frame_times, width)?;
    drop(global_streams);
    let meso = resample_to_frames(&sweep_one(ScaleName::Meso)?, &frame_times, width)?;
    let fine = resample_to_frames(&sweep_one(ScaleName::Fine)?, &frame_times, width)?;

    let total = params.total_width();
    let mut features = vec![0.0f32; frames * total];
    for f in 0..frames {
        let row = &mut features[f * total..(f + 1) * total];
        for (dst, src) in row[..width].iter_mut().zip(&global[f * width..]) {
            *dst = *src as f32;
        }
        for (dst, src) in row[width..2 * width].iter_mut().zip(&meso[f * width..]) {
            *dst = *src as f32;
        }
        for (dst, src) in row[2 * width..].iter_mut().zip(&fine[f * width..]) {
            *dst = *src as f32;
        }
    }
    Ok(FrameFeatureMatrix {
        features,
        frames,
        width: total,
        frame_rate: params.frame_rate,
        recording_id: rec600.id.clone(),
    })
}

/// Cache container magic and version.
const CACHE_MAGIC: &[u8; 4] = b"TSEG";
const CACHE_VERSION: u32 = 1;

/// Everything needed to decide whether a cache file matches the current
/// configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheHeader {
    pub recording_id: String,
    pub frames: usize,
    pub width: usize,
    pub frame_rate: f64,
    pub layers: usize,
    pub grid_len: usize,
    pub quantile: f64,
    pub calibration: GridCalibration,
    pub scales: Vec<ScaleConfig>,
}

impl CacheHeader {
    pub fn new(
        fm: &FrameFeatureMatrix,
        params: &FeatureParams,
        calibration: &GridCalibration,
        scales: &[ScaleConfig],
    ) -> CacheHeader {
        CacheHeader {
            recording_id: fm.recording_id.clone(),
            frames: fm.frames,
            width: fm.width,
            frame_rate: fm.frame_rate,
            layers: params.layers,
            grid_len: params.grid_len,
            quantile: params.quantile,
            calibration: calibration.clone(),
            scales: scales.to_vec(),
        }
    }

    /// Check compatibility against the current run configuration.
    pub fn matches(
        &self,
        params: &FeatureParams,
        calibration: &GridCalibration,
        scales: &[ScaleConfig],
    ) -> bool {
        self.layers == params.layers
            && self.grid_len == params.grid_len
            && self.quantile == params.quantile
            && self.frame_rate == params.frame_rate
            && self.calibration == *calibration
            && self.scales.len() == scales.len()
            && self.scales.iter().zip(scales).all(|(a, b)| {
                a.name == b.name
                    && a.stream_rate == b.stream_rate
                    && a.tau == b.tau
                    && a.dim == b.dim
                    && a.window_multiplier == b.window_multiplier
            })
    }
}

/// Atomically write a feature matrix and its header to `path`.
pub fn cache_write(fm: &FrameFeatureMatrix, header: &CacheHeader, path: &Path) -> Result<()> {
    if fm.features.len() != fm.frames * fm.width {
        return Err(Error::Config(format!(
            "matrix buffer {} does not match {}x{}",
            fm.features.len(),
            fm.frames,
            fm.width
        )));
    }
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    let meta = serde_json::to_vec(header)
        .map_err(|e| Error::Config(format!("cache header serialization failed: {e}")))?;
    let write = |w: &mut dyn Write| -> std::io::Result<()> {
        w.write_all(CACHE_MAGIC)?;
        w.write_all(&CACHE_VERSION.to_le_bytes())?;
        w.write_all(&(meta.len() as u32).to_le_bytes())?;
        w.write_all(&meta)?;
        let mut buf = Vec::with_capacity(fm.features.len() * 4);
        for v in &fm.features {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        w.flush()
    };
    write(tmp.as_file_mut()).map_err(|e| Error::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Read a cache file back; any structural problem reports cache-invalid so
/// callers can fall back to recomputation.
pub fn cache_read(path: &Path) -> Result<(FrameFeatureMatrix, CacheHeader)> {
    let invalid = |detail: &str| Error::CacheInvalid {
        path: path.into(),
        detail: detail.into(),
    };
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[0..4] != CACHE_MAGIC {
        return Err(invalid("missing TSEG magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(invalid(&format!("unsupported version {version}")));
    }
    let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + meta_len {
        return Err(invalid("truncated header"));
    }
    let header: CacheHeader = serde_json::from_slice(&bytes[12..12 + meta_len])
        .map_err(|e| invalid(&format!("bad header: {e}")))?;
    let data = &bytes[12 + meta_len..];
    let expected = header.frames * header.width * 4;
    if data.len() != expected {
        return Err(invalid(&format!(
            "matrix payload {} bytes, expected {expected}",
            data.len()
        )));
    }
    let features: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if features.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite feature values"));
    }
    Ok((
        FrameFeatureMatrix {
            features,
            frames: header.frames,
            width: header.width,
            frame_rate: header.frame_rate,
            recording_id: header.recording_id.clone(),
        },
        header,
    ))
}
