//! Framewise neural decoder.
//!
//! Maps a [`FrameFeatureMatrix`] to four-class posteriors (S1, systole, S2,
//! diastole) with either a per-frame MLP or a small non-causal temporal
//! convolutional network (TCN).  Training is plain mini-batch gradient descent
//! with momentum on framewise cross-entropy; gradients are hand-written and
//! verified against central finite differences by [`grad_check`].  The module
//! also owns the label-side types: interval label files, frame-aligned
//! [`LabelSequence`]s and the conversions between them.

use std::fmt;
use std::io::{Read, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FrameFeatureMatrix;

/// The four cardiac states, in the fixed class order used everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum HeartState {
    S1,
    Systole,
    S2,
    Diastole,
}

impl HeartState {
    /// All states in class order (S1, systole, S2, diastole).
    pub const ALL: [HeartState; 4] = [
        HeartState::S1,
        HeartState::Systole,
        HeartState::S2,
        HeartState::Diastole,
    ];

    /// Class index in the fixed order.
    pub fn index(self) -> usize {
        match self {
            HeartState::S1 => 0,
            HeartState::Systole => 1,
            HeartState::S2 => 2,
            HeartState::Diastole => 3,
        }
    }

    /// Inverse of [`HeartState::index`].
    pub fn from_index(i: usize) -> Option<HeartState> {
        HeartState::ALL.get(i).copied()
    }

    /// Canonical text form used in label files.
    pub fn as_str(self) -> &'static str {
        match self {
            HeartState::S1 => "S1",
            HeartState::Systole => "systole",
            HeartState::S2 => "S2",
            HeartState::Diastole => "diastole",
        }
    }

    /// Parse a state name (case-insensitive) or an integer code 1–4.
    pub fn parse(s: &str) -> Option<HeartState> {
        match s.to_ascii_lowercase().as_str() {
            "s1" | "1" => Some(HeartState::S1),
            "systole" | "sys" | "2" => Some(HeartState::Systole),
            "s2" | "3" => Some(HeartState::S2),
            "diastole" | "dia" | "4" => Some(HeartState::Diastole),
            _ => None,
        }
    }
}

impl fmt::Display for HeartState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One annotated time interval `[start, end)` in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub start: f64,
    pub end: f64,
    pub state: HeartState,
}

/// Read a label file: one `start_seconds end_seconds state` line per interval.
///
/// Blank lines and `#` comments are ignored; states may be names or integer
/// codes 1–4.
pub fn read_label_file(path: &Path) -> Result<Vec<Interval>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split_whitespace();
        let bad = |what: &str| {
            Error::Label(format!(
                "{}:{}: {what} in {line:?}",
                path.display(),
                lineno + 1
            ))
        };
        let start: f64 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad("bad start time"))?;
        let end: f64 = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| bad("bad end time"))?;
        let state = fields
            .next()
            .and_then(HeartState::parse)
            .ok_or_else(|| bad("bad state"))?;
        if fields.next().is_some() {
            return Err(bad("trailing fields"));
        }
        if !start.is_finite() || !end.is_finite() || end <= start {
            return Err(bad("empty or inverted interval"));
        }
        out.push(Interval { start, end, state });
    }
    Ok(out)
}

/// Write intervals in the format accepted by [`read_label_file`].
pub fn write_label_file(path: &Path, intervals: &[Interval]) -> Result<()> {
    let mut text = String::new();
    for iv in intervals {
        text.push_str(&format!("{:.6} {:.6} {}\n", iv.start, iv.end, iv.state));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Frame-aligned state sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelSequence {
    pub states: Vec<HeartState>,
    pub frame_rate: f64,
}

/// Rasterize intervals onto `frames` frames at `frame_rate`.
///
/// Frame `t` takes the state of the interval containing its center time
/// `(t + 0.5) / frame_rate`.  Frames in gaps inherit the most recent state;
/// frames before the first interval are diastole.  Overlapping intervals are
/// rejected.
pub fn labels_from_intervals(
    intervals: &[Interval],
    frame_rate: f64,
    frames: usize,
) -> Result<LabelSequence> {
    if frame_rate <= 0.0 {
        return Err(Error::Label(format!("frame rate {frame_rate} must be positive")));
    }
    let mut sorted: Vec<Interval> = intervals.to_vec();
    sorted.sort_by(|a, b| a.start.total_cmp(&b.start));
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end - 1e-9 {
            return Err(Error::Label(format!(
                "overlapping intervals: [{}, {}) and [{}, {})",
                pair[0].start, pair[0].end, pair[1].start, pair[1].end
            )));
        }
    }
    let mut states = Vec::with_capacity(frames);
    let mut last_state = HeartState::Diastole;
    let mut p = 0usize;
    for t in 0..frames {
        let center = (t as f64 + 0.5) / frame_rate;
        while p < sorted.len() && sorted[p].end <= center {
            last_state = sorted[p].state;
            p += 1;
        }
        let state = if p < sorted.len() && sorted[p].start <= center {
            sorted[p].state
        } else {
            last_state
        };
        states.push(state);
    }
    Ok(LabelSequence { states, frame_rate })
}

/// Merge consecutive equal states back into intervals.
///
/// Frame `t` is taken to span `[t, t+1) / frame_rate`, so the result
/// round-trips through [`labels_from_intervals`] exactly.
pub fn intervals_from_labels(seq: &LabelSequence) -> Vec<Interval> {
    let mut out = Vec::new();
    let mut run_start = 0usize;
    for t in 1..=seq.states.len() {
        if t == seq.states.len() || seq.states[t] != seq.states[run_start] {
            out.push(Interval {
                start: run_start as f64 / seq.frame_rate,
                end: t as f64 / seq.frame_rate,
                state: seq.states[run_start],
            });
            run_start = t;
        }
    }
    out
}

/// T×4 row-stochastic class posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorSequence {
    /// Row-major `frames × 4` matrix in class order.
    pub p: Vec<f64>,
    pub frames: usize,
    pub frame_rate: f64,
}

impl PosteriorSequence {
    pub fn row(&self, t: usize) -> &[f64] {
        &self.p[t * 4..(t + 1) * 4]
    }

    /// Check every row is on the simplex within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        if self.p.len() != self.frames * 4 {
            return Err(Error::Model(format!(
                "posterior buffer {} does not match {} frames",
                self.p.len(),
                self.frames
            )));
        }
        for t in 0..self.frames {
            let row = self.row(t);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| !v.is_finite() || v < -tol) || (sum - 1.0).abs() > tol {
                return Err(Error::Model(format!(
                    "posterior row {t} off the simplex: {row:?}"
                )));
            }
        }
        Ok(())
    }

    /// Framewise argmax decoding (first maximum wins ties).
    pub fn argmax_labels(&self) -> LabelSequence {
        let states = (0..self.frames)
            .map(|t| {
                let row = self.row(t);
                let mut best = 0usize;
                for j in 1..4 {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                HeartState::from_index(best).unwrap()
            })
            .collect();
        LabelSequence {
            states,
            frame_rate: self.frame_rate,
        }
    }
}

/// Decoder architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Mlp,
    Tcn,
}

/// Architecture and training hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    pub arch: Arch,
    pub channels: usize,
    pub blocks: usize,
    pub kernel: usize,
    pub dilations: Vec<usize>,
    pub mlp_hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    /// Global gradient-norm clip applied per batch; non-positive disables.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            arch: Arch::Tcn,
            channels: 64,
            blocks: 4,
            kernel: 3,
            dilations: vec![1, 2, 4, 8],
            mlp_hidden: 128,
            lr: 0.05,
            epochs: 40,
            batch: 4,
            clip_norm: 5.0,
            seed: 7,
        }
    }
}

impl DecoderConfig {
    /// TCN receptive field in frames: `1 + (kernel-1)·Σ dilations`.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel - 1) * self.dilations.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.mlp_hidden == 0 {
            return bad("decoder layer widths must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!(
                "kernel {} must be odd for centered convolutions",
                self.kernel
            ));
        }
        if self.blocks != self.dilations.len() {
            return bad(format!(
                "blocks {} does not match {} dilations",
                self.blocks,
                self.dilations.len()
            ));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return bad("dilations must be positive".into());
        }
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch == 0 {
            return bad("lr, epochs and batch must be positive".into());
        }
        Ok(())
    }
}

const CLASSES: usize = 4;
const MOMENTUM: f64 = 0.9;

// ---------------------------------------------------------------------------
// Dense kernels.  Both loops keep the innermost dimension contiguous so the
// compiler can vectorize the accumulation.
// ---------------------------------------------------------------------------

/// `c (m×n) += a (m×k) · b (k×n)`, all row-major.
fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (l, &av) in arow.iter().enumerate() {
            let brow = &b[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c (k×n) += aᵀ · b` with `a (m×k)` and `b (m×n)`, all row-major.
fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            let crow = &mut c[l * n..(l + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Models.
// ---------------------------------------------------------------------------

/// Per-frame MLP: input → hidden (ReLU) → 4 logits.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub input: usize,
    pub hidden: usize,
    /// `input × hidden`.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `hidden × 4`.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// One residual TCN block: centered dilated conv → ReLU → add input.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnBlock {
    /// `kernel` taps, each a `channels × channels` matrix (input-major).
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub dilation: usize,
}

/// Non-causal TCN: 1×1 input conv, residual dilated blocks, linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct TcnModel {
    pub input: usize,
    pub channels: usize,
    pub kernel: usize,
    /// `input × channels`.
    pub w_in: Vec<f64>,
    pub b_in: Vec<f64>,
    pub blocks: Vec<TcnBlock>,
    /// `channels × 4`.
    pub w_head: Vec<f64>,
    pub b_head: Vec<f64>,
}

/// A trained (or initialized) decoder.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Mlp(MlpModel),
    Tcn(TcnModel),
}

/// He-style uniform initialization in `±sqrt(6 / fan_in)`.
fn init_weights(rng: &mut ChaCha8Rng, len: usize, fan_in: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..len).map(|_| (2.0 * rng.gen::<f64>() - 1.0) * limit).collect()
}

impl Model {
    /// Fresh model with seeded initialization.
    pub fn new(cfg: &DecoderConfig, input_width: usize) -> Result<Model> {
        cfg.validate()?;
        if input_width == 0 {
            return Err(Error::Config("decoder input width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        match cfg.arch {
            Arch::Mlp => {
                let (d, h) = (input_width, cfg.mlp_hidden);
                Ok(Model::Mlp(MlpModel {
                    input: d,
                    hidden: h,
                    w1: init_weights(&mut rng, d * h, d),
                    b1: vec![0.0; h],
                    w2: init_weights(&mut rng, h * CLASSES, h),
                    b2: vec![0.0; CLASSES],
                }))
            }
            Arch::Tcn => {
                let (d, c, k) = (input_width, cfg.channels, cfg.kernel);
                let blocks = cfg
                    .dilations
                    .iter()
                    .map(|&dil| TcnBlock {
                        w: init_weights(&mut rng, k * c * c, k * c),
                        b: vec![0.0; c],
                        dilation: dil,
                    })
                    .collect();
                Ok(Model::Tcn(TcnModel {
                    input: d,
                    channels: c,
                    kernel: k,
                    w_in: init_weights(&mut rng, d * c, d),
                    b_in: vec![0.0; c],
                    blocks,
                    w_head: init_weights(&mut rng, c * CLASSES, c),
                    b_head: vec![0.0; CLASSES],
                }))
            }
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            Model::Mlp(m) => m.input,
            Model::Tcn(m) => m.input,
        }
    }

    pub fn arch(&self) -> Arch {
        match self {
            Model::Mlp(_) => Arch::Mlp,
            Model::Tcn(_) => Arch::Tcn,
        }
    }

    /// Visit every parameter group in canonical order.
    pub fn visit(&self, mut f: impl FnMut(&str, &[f64])) {
        match self {
            Model::Mlp(m) => {
                f("hidden.w", &m.w1);
                f("hidden.b", &m.b1);
                f("head.w", &m.w2);
                f("head.b", &m.b2);
            }
            Model::Tcn(m) => {
                f("in.w", &m.w_in);
                f("in.b", &m.b_in);
                for (i, blk) in m.blocks.iter().enumerate() {
                    f(&format!("block{i}.conv"), &blk.w);
                    f(&format!("block{i}.bias"), &blk.b);
                }
                f("head.w", &m.w_head);
                f("head.b", &m.b_head);
            }
        }
    }

    /// Mutable variant of [`Model::visit`], same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(&str, &mut [f64])) {
        match self {
            Model::Mlp(m) => {
                f("hidden.w", &mut m.w1);
                f("hidden.b", &mut m.b1);
                f("head.w", &mut m.w2);
                f("head.b", &mut m.b2);
            }
            Model::Tcn(m) => {
                f("in.w", &mut m.w_in);
                f("in.b", &mut m.b_in);
                for (i, blk) in m.blocks.iter_mut().enumerate() {
                    f(&format!("block{i}.conv"), &mut blk.w);
                    f(&format!("block{i}.bias"), &mut blk.b);
                }
                f("head.w", &mut m.w_head);
                f("head.b", &mut m.b_head);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit(|_, g| n += g.len());
        n
    }

    /// Posterior inference on one recording.
    pub fn forward(&self, features: &FrameFeatureMatrix) -> Result<PosteriorSequence> {
        if features.width != self.input_width() {
            return Err(Error::Model(format!(
                "model expects {} input features, matrix has {}",
                self.input_width(),
                features.width
            )));
        }
        let x = to_f64(features);
        let (mut logits, _cache) = self.forward_logits(&x, features.frames);
        softmax_rows(&mut logits, features.frames);
        Ok(PosteriorSequence {
            p: logits,
            frames: features.frames,
            frame_rate: features.frame_rate,
        })
    }

    /// Raw logits plus the activation cache needed by [`Model::backward`].
    fn forward_logits(&self, x: &[f64], t: usize) -> (Vec<f64>, Cache) {
        match self {
            Model::Mlp(m) => {
                let mut z1 = vec![0.0; t * m.hidden];
                for row in 0..t {
                    z1[row * m.hidden..(row + 1) * m.hidden].copy_from_slice(&m.b1);
                }
                matmul_acc(&mut z1, x, &m.w1, t, m.input, m.hidden);
                let mut h1 = z1.clone();
                for v in h1.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
                let mut logits = vec![0.0; t * CLASSES];
                for row in 0..t {
                    logits[row * CLASSES..(row + 1) * CLASSES].copy_from_slice(&m.b2);
                }
                matmul_acc(&mut logits, &h1, &m.w2, t, m.hidden, CLASSES);
                (logits, Cache::Mlp { z1, h1 })
            }
            Model::Tcn(m) => {
                let c = m.channels;
                let mut stream = vec![0.0; t * c];
                for row in 0..t {
                    stream[row * c..(row + 1) * c].copy_from_slice(&m.b_in);
                }
                matmul_acc(&mut stream, x, &m.w_in, t, m.input, c);
                let mut streams = vec![stream];
                let mut preacts = Vec::with_capacity(m.blocks.len());
                for blk in &m.blocks {
                    let prev = streams.last().unwrap();
                    let mut z = vec![0.0; t * c];
                    for row in 0..t {
                        z[row * c..(row + 1) * c].copy_from_slice(&blk.b);
                    }
                    conv_acc(&mut z, prev, &blk.w, t, c, m.kernel, blk.dilation);
                    let mut next = prev.clone();
                    for (nv, &zv) in next.iter_mut().zip(&z) {
                        if zv > 0.0 {
                            *nv += zv;
                        }
                    }
                    preacts.push(z);
                    streams.push(next);
                }
                let last = streams.last().unwrap();
                let mut logits = vec![0.0; t * CLASSES];
                for row in 0..t {
                    logits[row * CLASSES..(row + 1) * CLASSES].copy_from_slice(&m.b_head);
                }
                matmul_acc(&mut logits, last, &m.w_head, t, c, CLASSES);
                (logits, Cache::Tcn { streams, preacts })
            }
        }
    }

    /// Accumulate parameter gradients for `d loss / d logits = dlogits`.
    fn backward(&self, x: &[f64], t: usize, cache: &Cache, dlogits: &[f64], grads: &mut Gradients) {
        match (self, cache) {
            (Model::Mlp(m), Cache::Mlp { z1, h1 }) => {
                let h = m.hidden;
                let [dw1, db1, dw2, db2] = grads.take4();
                matmul_tn_acc(dw2, h1, dlogits, t, h, CLASSES);
                col_sums_acc(db2, dlogits, t, CLASSES);
                let w2_t = transpose(&m.w2, h, CLASSES);
                let mut dz1 = vec![0.0; t * h];
                matmul_acc(&mut dz1, dlogits, &w2_t, t, CLASSES, h);
                for (dv, &zv) in dz1.iter_mut().zip(z1) {
                    if zv <= 0.0 {
                        *dv = 0.0;
                    }
                }
                matmul_tn_acc(dw1, x, &dz1, t, m.input, h);
                col_sums_acc(db1, &dz1, t, h);
            }
            (Model::Tcn(m), Cache::Tcn { streams, preacts }) => {
                let c = m.channels;
                let last = streams.last().unwrap();
                {
                    let gs = grads.groups_mut();
                    let nb = m.blocks.len();
                    matmul_tn_acc(&mut gs[2 + 2 * nb], last, dlogits, t, c, CLASSES);
                    col_sums_acc(&mut gs[3 + 2 * nb], dlogits, t, CLASSES);
                }
                let head_t = transpose(&m.w_head, c, CLASSES);
                let mut dstream = vec![0.0; t * c];
                matmul_acc(&mut dstream, dlogits, &head_t, t, CLASSES, c);
                for (bi, blk) in m.blocks.iter().enumerate().rev() {
                    let z = &preacts[bi];
                    let mut dz = dstream.clone();
                    for (dv, &zv) in dz.iter_mut().zip(z) {
                        if zv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    {
                        let gs = grads.groups_mut();
                        conv_grad_acc(
                            &mut gs[2 + 2 * bi],
                            &streams[bi],
                            &dz,
                            t,
                            c,
                            m.kernel,
                            blk.dilation,
                        );
                        col_sums_acc(&mut gs[3 + 2 * bi], &dz, t, c);
                    }
                    conv_transpose_acc(&mut dstream, &dz, &blk.w, t, c, m.kernel, blk.dilation);
                }
                let gs = grads.groups_mut();
                matmul_tn_acc(&mut gs[0], x, &dstream, t, m.input, c);
                col_sums_acc(&mut gs[1], &dstream, t, c);
            }
            _ => unreachable!("cache arch mismatch"),
        }
    }
}

/// Activation cache from [`Model::forward_logits`].
enum Cache {
    Mlp {
        z1: Vec<f64>,
        h1: Vec<f64>,
    },
    Tcn {
        /// Residual stream before each block, plus the final one.
        streams: Vec<Vec<f64>>,
        /// Pre-activation of each block's convolution.
        preacts: Vec<Vec<f64>>,
    },
}

/// Valid output-row range for a tap shifted by `shift`.
fn tap_range(t: usize, shift: isize) -> (usize, usize) {
    let t0 = (-shift).max(0) as usize;
    let t1 = ((t as isize - shift).max(0) as usize).min(t);
    (t0, t1.max(t0))
}

/// `z (t×c) += dilated centered conv of x (t×c)` with tap matrices `w`.
fn conv_acc(z: &mut [f64], x: &[f64], w: &[f64], t: usize, c: usize, kernel: usize, dil: usize) {
    let half = (kernel / 2) as isize;
    for k in 0..kernel {
        let shift = (k as isize - half) * dil as isize;
        let (t0, t1) = tap_range(t, shift);
        if t0 >= t1 {
            continue;
        }
        let rows = t1 - t0;
        let src_start = (t0 as isize + shift) as usize;
        let wk = &w[k * c * c..(k + 1) * c * c];
        matmul_acc(
            &mut z[t0 * c..t1 * c],
            &x[src_start * c..(src_start + rows) * c],
            wk,
            rows,
            c,
            c,
        );
    }
}

/// Accumulate `d loss / d w` for the convolution of [`conv_acc`].
fn conv_grad_acc(
    dw: &mut [f64],
    x: &[f64],
    dz: &[f64],
    t: usize,
    c: usize,
    kernel: usize,
    dil: usize,
) {
    let half = (kernel / 2) as isize;
    for k in 0..kernel {
        let shift = (k as isize - half) * dil as isize;
        let (t0, t1) = tap_range(t, shift);
        if t0 >= t1 {
            continue;
        }
        let rows = t1 - t0;
        let src_start = (t0 as isize + shift) as usize;
        matmul_tn_acc(
            &mut dw[k * c * c..(k + 1) * c * c],
            &x[src_start * c..(src_start + rows) * c],
            &dz[t0 * c..t1 * c],
            rows,
            c,
            c,
        );
    }
}

/// `dx += convᵀ(dz)`: propagate gradients back through [`conv_acc`].
fn conv_transpose_acc(
    dx: &mut [f64],
    dz: &[f64],
    w: &[f64],
    t: usize,
    c: usize,
    kernel: usize,
    dil: usize,
) {
    let half = (kernel / 2) as isize;
    for k in 0..kernel {
        let shift = (k as isize - half) * dil as isize;
        let (t0, t1) = tap_range(t, shift);
        if t0 >= t1 {
            continue;
        }
        let rows = t1 - t0;
        let src_start = (t0 as isize + shift) as usize;
        let wk_t = transpose(&w[k * c * c..(k + 1) * c * c], c, c);
        matmul_acc(
            &mut dx[src_start * c..(src_start + rows) * c],
            &dz[t0 * c..t1 * c],
            &wk_t,
            rows,
            c,
            c,
        );
    }
}

fn col_sums_acc(out: &mut [f64], a: &[f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let arow = &a[r * cols..(r + 1) * cols];
        for (o, &v) in out.iter_mut().zip(arow) {
            *o += v;
        }
    }
}

/// Flatten to `f64`, scaled by `1/sqrt(width)` so a frame's squared norm
/// stays O(1) at any feature dimension; one learning-rate default then
/// remains stable from toy widths up to the full landscape stack.
fn to_f64(fm: &FrameFeatureMatrix) -> Vec<f64> {
    let scale = 1.0 / (fm.width.max(1) as f64).sqrt();
    fm.features.iter().map(|&v| v as f64 * scale).collect()
}

/// In-place row softmax with max subtraction.
fn softmax_rows(logits: &mut [f64], t: usize) {
    for row in 0..t {
        let r = &mut logits[row * CLASSES..(row + 1) * CLASSES];
        let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in r.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in r.iter_mut() {
            *v /= sum;
        }
    }
}

/// Summed cross-entropy over all frames; writes unscaled `p − y` into
/// `dlogits`.
fn ce_loss(logits: &[f64], labels: &[HeartState], dlogits: &mut [f64]) -> f64 {
    let t = labels.len();
    let mut loss = 0.0;
    for row in 0..t {
        let r = &logits[row * CLASSES..(row + 1) * CLASSES];
        let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in r {
            sum += (v - mx).exp();
        }
        let lse = mx + sum.ln();
        let y = labels[row].index();
        loss += lse - r[y];
        let drow = &mut dlogits[row * CLASSES..(row + 1) * CLASSES];
        for (j, dv) in drow.iter_mut().enumerate() {
            *dv = (r[j] - lse).exp();
        }
        drow[y] -= 1.0;
    }
    loss
}

/// Parameter-shaped gradient buffers in the model's canonical group order.
pub struct Gradients {
    names: Vec<String>,
    groups: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &Model) -> Gradients {
        let mut names = Vec::new();
        let mut groups = Vec::new();
        model.visit(|name, g| {
            names.push(name.to_string());
            groups.push(vec![0.0; g.len()]);
        });
        Gradients { names, groups }
    }

    pub fn zero(&mut self) {
        for g in &mut self.groups {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn groups(&self) -> &[Vec<f64>] {
        &self.groups
    }

    fn groups_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.groups
    }

    /// Exactly-four-group accessor for the MLP.
    fn take4(&mut self) -> [&mut Vec<f64>; 4] {
        let [a, b, c, d] = &mut self.groups[..] else {
            unreachable!("MLP has four parameter groups");
        };
        [a, b, c, d]
    }

}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

/// One training example: features and frame-aligned labels.
pub type TrainItem<'a> = (&'a FrameFeatureMatrix, &'a LabelSequence);

/// Result of [`train`] / [`train_early_stopping`].
pub struct TrainOutcome {
    pub model: Model,
    /// Mean per-frame training cross-entropy per epoch.
    pub loss_trace: Vec<f64>,
    /// Epoch whose parameters were kept (last, or best-validation).
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Validation losses per epoch when a validation set was supplied.
    pub val_trace: Vec<f64>,
}

fn check_items(items: &[TrainItem<'_>], width: usize) -> Result<()> {
    for (fm, labels) in items {
        if fm.width != width {
            return Err(Error::Model(format!(
                "feature width {} differs from {} in the same dataset",
                fm.width, width
            )));
        }
        if labels.states.len() != fm.frames {
            return Err(Error::Label(format!(
                "recording {}: {} label frames for {} feature frames",
                fm.recording_id,
                labels.states.len(),
                fm.frames
            )));
        }
        if (labels.frame_rate - fm.frame_rate).abs() > 1e-9 {
            return Err(Error::Label(format!(
                "recording {}: label rate {} differs from feature rate {}",
                fm.recording_id, labels.frame_rate, fm.frame_rate
            )));
        }
    }
    Ok(())
}

/// Train for the configured number of epochs on the full training set.
pub fn train(items: &[TrainItem<'_>], cfg: &DecoderConfig) -> Result<TrainOutcome> {
    train_inner(items, &[], usize::MAX, cfg)
}

/// Train with early stopping: keep the parameters of the best validation
/// epoch and stop after `patience` epochs without improvement.
pub fn train_early_stopping(
    items: &[TrainItem<'_>],
    val: &[TrainItem<'_>],
    patience: usize,
    cfg: &DecoderConfig,
) -> Result<TrainOutcome> {
    if val.is_empty() {
        return Err(Error::Config("early stopping needs a validation set".into()));
    }
    train_inner(items, val, patience, cfg)
}

fn train_inner(
    items: &[TrainItem<'_>],
    val: &[TrainItem<'_>],
    patience: usize,
    cfg: &DecoderConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let Some((first, _)) = items.first() else {
        return Err(Error::Config("training set is empty".into()));
    };
    let width = first.width;
    check_items(items, width)?;
    check_items(val, width)?;

    let mut model = Model::new(cfg, width)?;
    let mut grads = Gradients::zeros_like(&model);
    let mut velocity = Gradients::zeros_like(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    let mut order: Vec<usize> = (0..items.len()).collect();

    let mut loss_trace = Vec::with_capacity(cfg.epochs);
    let mut val_trace = Vec::new();
    let mut best = (0usize, f64::INFINITY, model.clone());
    let mut stopped_early = false;

    for epoch in 0..cfg.epochs {
        // Fisher–Yates shuffle from the seeded stream.
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_frames = 0usize;
        for batch in order.chunks(cfg.batch) {
            grads.zero();
            let total_frames: usize = batch.iter().map(|&i| items[i].0.frames).sum();
            if total_frames == 0 {
                continue;
            }
            for &i in batch {
                let (fm, labels) = items[i];
                let x = to_f64(fm);
                let (logits, cache) = model.forward_logits(&x, fm.frames);
                let mut dlogits = vec![0.0; fm.frames * CLASSES];
                let loss = ce_loss(&logits, &labels.states, &mut dlogits);
                epoch_loss += loss;
                epoch_frames += fm.frames;
                let inv = 1.0 / total_frames as f64;
                dlogits.iter_mut().for_each(|v| *v *= inv);
                model.backward(&x, fm.frames, &cache, &dlogits, &mut grads);
            }
            // SGD with momentum.
            let mut gi = 0;
            model.visit_mut(|_, params| {
                let g = &grads.groups()[gi];
                let v = &mut velocity.groups_mut()[gi];
                for ((p, vel), &gv) in params.iter_mut().zip(v.iter_mut()).zip(g) {
                    *vel = MOMENTUM * *vel - cfg.lr * gv;
                    *p += *vel;
                }
                gi += 1;
            });
        }
        let mean_loss = epoch_loss / epoch_frames.max(1) as f64;
        if !mean_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch });
        }
        loss_trace.push(mean_loss);

        if !val.is_empty() {
            let vl = dataset_loss(&model, val);
            val_trace.push(vl);
            if vl < best.1 - 1e-12 {
                best = (epoch, vl, model.clone());
            } else if epoch - best.0 >= patience {
                stopped_early = true;
                log::info!(
                    "early stop at epoch {epoch}: best validation loss {:.6} at epoch {}",
                    best.1,
                    best.0
                );
                break;
            }
        }
    }

    warn_if_not_decreasing(&loss_trace);
    let (best_epoch, model) = if val.is_empty() {
        (loss_trace.len().saturating_sub(1), model)
    } else {
        (best.0, best.2)
    };
    Ok(TrainOutcome {
        model,
        loss_trace,
        best_epoch,
        stopped_early,
        val_trace,
    })
}

/// Mean per-frame cross-entropy of `model` over a dataset (no gradients).
pub fn dataset_loss(model: &Model, items: &[TrainItem<'_>]) -> f64 {
    let mut loss = 0.0;
    let mut frames = 0usize;
    for (fm, labels) in items {
        let x = to_f64(fm);
        let (logits, _) = model.forward_logits(&x, fm.frames);
        let mut scratch = vec![0.0; fm.frames * CLASSES];
        loss += ce_loss(&logits, &labels.states, &mut scratch);
        frames += fm.frames;
    }
    loss / frames.max(1) as f64
}

/// Warn once if the smoothed loss trace ever increases.
fn warn_if_not_decreasing(trace: &[f64]) {
    let w = trace.len().min(5);
    if w < 2 {
        return;
    }
    let smoothed: Vec<f64> = (0..trace.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let window = &trace[lo..=i];
            window.iter().sum::<f64>() / window.len() as f64
        })
        .collect();
    if smoothed.windows(2).any(|p| p[1] > p[0] + 1e-9) {
        log::warn!("training loss is not monotone on a smoothed window");
    }
}

// ---------------------------------------------------------------------------
// Gradient checking.
// ---------------------------------------------------------------------------

/// Analytic-vs-numeric gradient comparison for one parameter group.
#[derive(Debug, Clone)]
pub struct GroupCheck {
    pub name: String,
    pub max_rel_error: f64,
}

/// Report from [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_error: f64,
}

/// Compare analytic gradients of the mean cross-entropy on one small batch
/// against central finite differences (step `1e-4`).
pub fn grad_check(
    model: &mut Model,
    features: &FrameFeatureMatrix,
    labels: &LabelSequence,
) -> Result<GradCheckReport> {
    if features.width != model.input_width() {
        return Err(Error::Model(format!(
            "model expects {} input features, matrix has {}",
            model.input_width(),
            features.width
        )));
    }
    if labels.states.len() != features.frames {
        return Err(Error::Label(format!(
            "{} label frames for {} feature frames",
            labels.states.len(),
            features.frames
        )));
    }
    let t = features.frames;
    let x = to_f64(features);
    let inv = 1.0 / t as f64;

    let mut grads = Gradients::zeros_like(model);
    {
        let (logits, cache) = model.forward_logits(&x, t);
        let mut dlogits = vec![0.0; t * CLASSES];
        ce_loss(&logits, &labels.states, &mut dlogits);
        dlogits.iter_mut().for_each(|v| *v *= inv);
        model.backward(&x, t, &cache, &dlogits, &mut grads);
    }

    let loss_at = |model: &Model| -> f64 {
        let (logits, _) = model.forward_logits(&x, t);
        let mut scratch = vec![0.0; t * CLASSES];
        ce_loss(&logits, &labels.states, &mut scratch) * inv
    };

    const H: f64 = 1e-4;
    let n_groups = grads.groups().len();
    let mut report = GradCheckReport {
        groups: Vec::with_capacity(n_groups),
        max_rel_error: 0.0,
    };
    for gi in 0..n_groups {
        let name = grads.names()[gi].clone();
        let len = grads.groups()[gi].len();
        let mut worst = 0.0f64;
        for pi in 0..len {
            let nudge = |model: &mut Model, delta: f64| {
                let mut seen = 0;
                model.visit_mut(|_, params| {
                    if seen == gi {
                        params[pi] += delta;
                    }
                    seen += 1;
                });
            };
            nudge(model, H);
            let plus = loss_at(model);
            nudge(model, -2.0 * H);
            let minus = loss_at(model);
            nudge(model, H);
            let numeric = (plus - minus) / (2.0 * H);
            let analytic = grads.groups()[gi][pi];
            let rel = (numeric - analytic).abs() / (numeric.abs() + analytic.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.groups.push(GroupCheck {
            name,
            max_rel_error: worst,
        });
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Serialization: same container family as the feature cache, magic "TSEGM".
// ---------------------------------------------------------------------------

const MODEL_MAGIC: &[u8; 5] = b"TSEGM";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    arch: Arch,
    input: usize,
    #[serde(default)]
    mlp_hidden: usize,
    #[serde(default)]
    channels: usize,
    #[serde(default)]
    kernel: usize,
    #[serde(default)]
    dilations: Vec<usize>,
    groups: Vec<(String, usize)>,
}

/// Write a model file (atomic replace).
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut groups = Vec::new();
    model.visit(|name, g| groups.push((name.to_string(), g.len())));
    let meta = match model {
        Model::Mlp(m) => ModelMeta {
            arch: Arch::Mlp,
            input: m.input,
            mlp_hidden: m.hidden,
            channels: 0,
            kernel: 0,
            dilations: Vec::new(),
            groups,
        },
        Model::Tcn(m) => ModelMeta {
            arch: Arch::Tcn,
            input: m.input,
            mlp_hidden: 0,
            channels: m.channels,
            kernel: m.kernel,
            dilations: m.blocks.iter().map(|b| b.dilation).collect(),
            groups,
        },
    };
    let meta_bytes = serde_json::to_vec(&meta)
        .map_err(|e| Error::Model(format!("meta serialization failed: {e}")))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    let write = |w: &mut dyn IoWrite| -> std::io::Result<()> {
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
        w.write_all(&meta_bytes)?;
        let mut buf = Vec::new();
        model.visit(|_, g| {
            for v in g {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        });
        w.write_all(&buf)?;
        w.flush()
    };
    write(tmp.as_file_mut()).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Read a model file written by [`save_model`].
pub fn load_model(path: &Path) -> Result<Model> {
    let invalid = |detail: String| Error::Model(format!("{}: {detail}", path.display()));
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 13 || &bytes[0..5] != MODEL_MAGIC {
        return Err(invalid("missing TSEGM magic".into()));
    }
    let version = u32::from_le_bytes(bytes[5..9].try_into().unwrap());
    if version != MODEL_VERSION {
        return Err(invalid(format!("unsupported version {version}")));
    }
    let meta_len = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
    if bytes.len() < 13 + meta_len {
        return Err(invalid("truncated meta".into()));
    }
    let meta: ModelMeta = serde_json::from_slice(&bytes[13..13 + meta_len])
        .map_err(|e| invalid(format!("bad meta: {e}")))?;
    let payload = &bytes[13 + meta_len..];
    let expected: usize = meta.groups.iter().map(|(_, len)| len).sum::<usize>() * 8;
    if payload.len() != expected {
        return Err(invalid(format!(
            "payload {} bytes, expected {expected}",
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite parameters".into()));
    }

    let mut model = match meta.arch {
        Arch::Mlp => {
            let (d, h) = (meta.input, meta.mlp_hidden);
            if d == 0 || h == 0 {
                return Err(invalid("bad MLP shape".into()));
            }
            Model::Mlp(MlpModel {
                input: d,
                hidden: h,
                w1: vec![0.0; d * h],
                b1: vec![0.0; h],
                w2: vec![0.0; h * CLASSES],
                b2: vec![0.0; CLASSES],
            })
        }
        Arch::Tcn => {
            let (d, c, k) = (meta.input, meta.channels, meta.kernel);
            if d == 0 || c == 0 || k == 0 || meta.dilations.is_empty() {
                return Err(invalid("bad TCN shape".into()));
            }
            let blocks = meta
                .dilations
                .iter()
                .map(|&dil| TcnBlock {
                    w: vec![0.0; k * c * c],
                    b: vec![0.0; c],
                    dilation: dil,
                })
                .collect();
            Model::Tcn(TcnModel {
                input: d,
                channels: c,
                kernel: k,
                w_in: vec![0.0; d * c],
                b_in: vec![0.0; c],
                blocks,
                w_head: vec![0.0; c * CLASSES],
                b_head: vec![0.0; CLASSES],
            })
        }
    };
    let mut shape_ok = true;
    let mut cursor = 0usize;
    let mut gi = 0usize;
    model.visit_mut(|name, params| {
        match meta.groups.get(gi) {
            Some((meta_name, len)) if meta_name == name && *len == params.len() => {
                params.copy_from_slice(&values[cursor..cursor + len]);
                cursor += len;
            }
            _ => shape_ok = false,
        }
        gi += 1;
    });
    if !shape_ok || gi != meta.groups.len() {
        return Err(invalid("parameter groups do not match declared shapes".into()));
    }
    Ok(model)
}
