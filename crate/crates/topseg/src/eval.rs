//! Four-state segmentation scoring with boundary tolerance, plus
//! subject-level subsampling for budgeted experiments.
//!
//! The primary metric is tolerant frame matching: a predicted frame of a
//! class is correct if any truth frame of the same class lies within the
//! boundary tolerance, and symmetrically for truth frames. The two
//! directions give the precision and recall numerators; per-class F1 is
//! `(tp_pred + tp_truth) / (pred_total + truth_total)`, which reduces to
//! the usual `2TP/(2TP+FP+FN)` when the directions agree. Event-onset
//! scoring with greedy one-to-one matching is available as a secondary
//! diagnostic.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::decoder::{intervals_from_labels, HeartState, LabelSequence};
use crate::error::{Error, Result};

/// Default boundary tolerance in seconds.
pub const DEFAULT_TOLERANCE: f64 = 0.060;

/// Tolerant frame-matching counts for one class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    /// Number of predicted frames of this class.
    pub pred_total: usize,
    /// Number of truth frames of this class.
    pub truth_total: usize,
    /// Predicted frames with a same-class truth frame within tolerance.
    pub tp_pred: usize,
    /// Truth frames with a same-class predicted frame within tolerance.
    pub tp_truth: usize,
}

impl ClassCounts {
    pub fn false_positives(&self) -> usize {
        self.pred_total - self.tp_pred
    }

    pub fn false_negatives(&self) -> usize {
        self.truth_total - self.tp_truth
    }

    /// Fraction of predicted frames that are correct; 1 when the class is
    /// absent from both sequences, 0 when predicted but never true.
    pub fn precision(&self) -> f64 {
        if self.pred_total == 0 {
            return if self.truth_total == 0 { 1.0 } else { 0.0 };
        }
        self.tp_pred as f64 / self.pred_total as f64
    }

    /// Fraction of truth frames that are recovered; 1 when the class is
    /// absent from both sequences, 0 when true but never predicted.
    pub fn recall(&self) -> f64 {
        if self.truth_total == 0 {
            return if self.pred_total == 0 { 1.0 } else { 0.0 };
        }
        self.tp_truth as f64 / self.truth_total as f64
    }

    pub fn f1(&self) -> f64 {
        let denom = self.pred_total + self.truth_total;
        if denom == 0 {
            return 1.0;
        }
        (self.tp_pred + self.tp_truth) as f64 / denom as f64
    }

    pub fn add(&mut self, other: &ClassCounts) {
        self.pred_total += other.pred_total;
        self.truth_total += other.truth_total;
        self.tp_pred += other.tp_pred;
        self.tp_truth += other.tp_truth;
    }
}

/// Pooled scoring summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub macro_f1: f64,
    pub per_class_f1: [f64; 4],
    pub per_class_precision: [f64; 4],
    pub per_class_recall: [f64; 4],
    /// Boundary tolerance in seconds.
    pub boundary_tolerance: f64,
    pub n_recordings: usize,
}

/// Number of elements of `a` that have some element of `b` within `w`.
///
/// Both inputs must be sorted ascending; runs in linear time.
fn matched_count(a: &[i64], b: &[i64], w: i64) -> usize {
    let mut count = 0;
    let mut j = 0;
    for &x in a {
        while j < b.len() && b[j] < x - w {
            j += 1;
        }
        if j < b.len() && b[j] <= x + w {
            count += 1;
        }
    }
    count
}

fn check_aligned(pred: &LabelSequence, truth: &LabelSequence) -> Result<()> {
    if (pred.frame_rate - truth.frame_rate).abs() > 1e-9 {
        return Err(Error::Eval(format!(
            "frame rate mismatch: pred {} Hz vs truth {} Hz",
            pred.frame_rate, truth.frame_rate
        )));
    }
    if pred.states.len() != truth.states.len() {
        return Err(Error::Eval(format!(
            "length mismatch: pred {} frames vs truth {} frames",
            pred.states.len(),
            truth.states.len()
        )));
    }
    Ok(())
}

/// Tolerant frame-matching counts per class for one recording.
///
/// `tol` is the boundary tolerance in seconds; a frame pair matches when
/// the frame-index distance is at most `floor(tol * frame_rate)`.
pub fn score(pred: &LabelSequence, truth: &LabelSequence, tol: f64) -> Result<[ClassCounts; 4]> {
    check_aligned(pred, truth)?;
    if !(tol >= 0.0) {
        return Err(Error::Eval(format!("tolerance must be >= 0, got {tol}")));
    }
    let w = (tol * pred.frame_rate + 1e-9).floor() as i64;

    let frames_of = |seq: &LabelSequence, class: HeartState| -> Vec<i64> {
        seq.states
            .iter()
            .enumerate()
            .filter(|(_, &s)| s == class)
            .map(|(i, _)| i as i64)
            .collect()
    };

    let mut out = [ClassCounts::default(); 4];
    for (c, counts) in out.iter_mut().enumerate() {
        let class = HeartState::from_index(c).unwrap();
        let p = frames_of(pred, class);
        let t = frames_of(truth, class);
        *counts = ClassCounts {
            pred_total: p.len(),
            truth_total: t.len(),
            tp_pred: matched_count(&p, &t, w),
            tp_truth: matched_count(&t, &p, w),
        };
    }
    Ok(out)
}

/// Pool per-recording counts (micro within class, macro across classes).
pub fn aggregate(per_recording: &[[ClassCounts; 4]], tol: f64) -> Result<EvalReport> {
    if per_recording.is_empty() {
        return Err(Error::Eval("no recordings to aggregate".into()));
    }
    let mut pooled = [ClassCounts::default(); 4];
    for rec in per_recording {
        for (p, c) in pooled.iter_mut().zip(rec) {
            p.add(c);
        }
    }
    let per_class_f1: [f64; 4] = std::array::from_fn(|c| pooled[c].f1());
    Ok(EvalReport {
        macro_f1: per_class_f1.iter().sum::<f64>() / 4.0,
        per_class_f1,
        per_class_precision: std::array::from_fn(|c| pooled[c].precision()),
        per_class_recall: std::array::from_fn(|c| pooled[c].recall()),
        boundary_tolerance: tol,
        n_recordings: per_recording.len(),
    })
}

/// Event-onset counts for one class: greedy one-to-one onset matching.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventCounts {
    pub tp: usize,
    pub fp: usize,
    pub missed: usize,
}

impl EventCounts {
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.missed;
        if denom == 0 {
            return 1.0;
        }
        2.0 * self.tp as f64 / denom as f64
    }
}

/// Secondary diagnostic: per-class onset detection with one-to-one
/// matching of run onsets within ±`tol` seconds, greedily in time order.
pub fn score_event_onsets(
    pred: &LabelSequence,
    truth: &LabelSequence,
    tol: f64,
) -> Result<[EventCounts; 4]> {
    check_aligned(pred, truth)?;
    let onsets = |seq: &LabelSequence, class: HeartState| -> Vec<f64> {
        intervals_from_labels(seq)
            .iter()
            .filter(|iv| iv.state == class)
            .map(|iv| iv.start)
            .collect()
    };
    let mut out = [EventCounts::default(); 4];
    for (c, counts) in out.iter_mut().enumerate() {
        let class = HeartState::from_index(c).unwrap();
        let p = onsets(pred, class);
        let t = onsets(truth, class);
        let (mut i, mut j, mut tp) = (0, 0, 0);
        while i < p.len() && j < t.len() {
            let d = p[i] - t[j];
            if d.abs() <= tol + 1e-9 {
                tp += 1;
                i += 1;
                j += 1;
            } else if d < 0.0 {
                i += 1;
            } else {
                j += 1;
            }
        }
        *counts = EventCounts {
            tp,
            fp: p.len() - tp,
            missed: t.len() - tp,
        };
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Subject manifests and budgeted subsampling.
// ---------------------------------------------------------------------------

/// One recording-to-subject assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub recording: String,
    pub subject: String,
}

/// Ordered list of recording-to-subject assignments.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Distinct subjects in first-appearance order.
    pub fn subjects(&self) -> Vec<&str> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::new();
        for e in &self.entries {
            if seen.insert(e.subject.as_str()) {
                out.push(e.subject.as_str());
            }
        }
        out
    }

    /// Parse a tab-separated `recording<TAB>subject` file; `#` comments
    /// and blank lines are ignored.
    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut cols = line.split('\t');
            let (rec, subj) = match (cols.next(), cols.next()) {
                (Some(r), Some(s)) if !r.is_empty() && !s.is_empty() => (r, s),
                _ => {
                    return Err(Error::Eval(format!(
                        "{}:{}: expected 'recording<TAB>subject'",
                        path.display(),
                        lineno + 1
                    )))
                }
            };
            entries.push(ManifestEntry {
                recording: rec.to_string(),
                subject: subj.to_string(),
            });
        }
        Ok(Manifest { entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for e in &self.entries {
            let _ = writeln!(text, "{}\t{}", e.recording, e.subject);
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Keep `ceil(pct * n_subjects)` subjects chosen uniformly with the given
/// seed; all recordings of a selected subject are kept, in original order.
pub fn subsample_subjects(manifest: &Manifest, pct: f64, seed: u64) -> Result<Manifest> {
    if !(pct > 0.0 && pct <= 1.0) {
        return Err(Error::Config(format!(
            "subject budget must be in (0, 1], got {pct}"
        )));
    }
    let subjects = manifest.subjects();
    let n = subjects.len();
    let k = (pct * n as f64).ceil() as usize;
    if k >= n {
        return Ok(manifest.clone());
    }
    // Partial Fisher–Yates: the first k slots are a uniform k-subset.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        order.swap(i, j);
    }
    let keep: std::collections::HashSet<&str> =
        order[..k].iter().map(|&i| subjects[i]).collect();
    Ok(Manifest {
        entries: manifest
            .entries
            .iter()
            .filter(|e| keep.contains(e.subject.as_str()))
            .cloned()
            .collect(),
    })
}

/// Split a manifest into train/validation parts at subject granularity.
///
/// `val_fraction` of the subjects (at least one, at most all but one) are
/// held out, chosen by a seeded shuffle; each part keeps its recordings
/// in original order.
pub fn split_subjects(
    manifest: &Manifest,
    val_fraction: f64,
    seed: u64,
) -> Result<(Manifest, Manifest)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "validation fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let subjects = manifest.subjects();
    let n = subjects.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "need at least two subjects to split, got {n}"
        )));
    }
    let n_val = ((val_fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let val_set: std::collections::HashSet<&str> =
        order[..n_val].iter().map(|&i| subjects[i]).collect();
    let pick = |keep_val: bool| Manifest {
        entries: manifest
            .entries
            .iter()
            .filter(|e| val_set.contains(e.subject.as_str()) == keep_val)
            .cloned()
            .collect(),
    };
    Ok((pick(false), pick(true)))
}

// ---------------------------------------------------------------------------
// Report rendering.
// ---------------------------------------------------------------------------

/// Human-readable multi-line report.
pub fn render_report(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "segmentation report ({} recording{}, tolerance {:.0} ms)",
        report.n_recordings,
        if report.n_recordings == 1 { "" } else { "s" },
        1000.0 * report.boundary_tolerance
    );
    let _ = writeln!(s, "  macro-F1: {:.4}", report.macro_f1);
    let _ = writeln!(s, "  class      F1      precision  recall");
    for (c, state) in HeartState::ALL.iter().enumerate() {
        let _ = writeln!(
            s,
            "  {:<9}  {:.4}  {:.4}     {:.4}",
            state.as_str(),
            report.per_class_f1[c],
            report.per_class_precision[c],
            report.per_class_recall[c]
        );
    }
    s
}

/// Machine-readable `key=value` lines with fixed six-decimal formatting.
pub fn report_key_values(report: &EvalReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "macro_f1={:.6}", report.macro_f1);
    for (c, state) in HeartState::ALL.iter().enumerate() {
        let key = state.as_str().to_ascii_lowercase();
        let _ = writeln!(s, "f1_{key}={:.6}", report.per_class_f1[c]);
        let _ = writeln!(s, "precision_{key}={:.6}", report.per_class_precision[c]);
        let _ = writeln!(s, "recall_{key}={:.6}", report.per_class_recall[c]);
    }
    let _ = writeln!(s, "tolerance_s={:.6}", report.boundary_tolerance);
    let _ = writeln!(s, "n_recordings={}", report.n_recordings);
    s
}
