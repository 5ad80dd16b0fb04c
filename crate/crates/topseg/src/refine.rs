//! Topology-guided posterior refinement and constrained decoding.
//!
//! From the fine-scale landscape features we derive a per-frame topology
//! target `r(t) ∈ [0, 1]` and a reliability weight `η(t)`.  The decoder's
//! posteriors are then refined by a small convex program — fidelity plus
//! temporal smoothness, an event-mass cap and a reliability-weighted
//! alignment of `P_S1 + P_S2` with `r` — solved by monotone projected
//! gradient descent over the per-frame probability simplex.  A final
//! dynamic program decodes the refined posteriors under the cyclic state
//! order S1 → systole → S2 → diastole with per-state minimum durations.

use serde::{Deserialize, Serialize};

use crate::decoder::{HeartState, LabelSequence, PosteriorSequence};
use crate::error::{Error, Result};
use crate::features::FrameFeatureMatrix;

/// How landscape values are reduced over the grid axis per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpsReduction {
    /// Peak landscape value (default).
    Max,
    /// Mean landscape value over the grid.
    Mean,
}

/// Refinement hyper-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Temporal smoothness weight λ_s.
    pub lambda_s: f64,
    /// Event-mass cap weight λ_b.
    pub lambda_b: f64,
    /// Topology alignment weight λ.
    pub lambda: f64,
    /// Event-mass cap threshold θ_max.
    pub theta_max: f64,
    /// Projected-gradient iterations per recording.
    pub n_iter: usize,
    /// Reliability sigmoid sharpness γ.
    pub gamma: f64,
    /// Reliability threshold τ.
    pub tau_thr: f64,
    /// EMA decay ρ for the reliability input.
    pub rho: f64,
    /// Centered percentile-normalization window in seconds.
    pub norm_window: f64,
    /// Explicit step size; `None` selects `1 / Lip` automatically.
    pub step_size: Option<f64>,
    /// Grid reduction for the topology target.
    pub reduction: EpsReduction,
    /// Minimum state durations in seconds (S1, systole, S2, diastole).
    pub min_durations: [f64; 4],
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            lambda_s: 1e-2,
            lambda_b: 5e-2,
            lambda: 5e-2,
            theta_max: 0.65,
            n_iter: 8,
            gamma: 2.0,
            tau_thr: 0.5,
            rho: 0.90,
            norm_window: 2.0,
            step_size: None,
            reduction: EpsReduction::Max,
            min_durations: [0.05, 0.10, 0.04, 0.15],
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.lambda_s < 0.0 || self.lambda_b < 0.0 || self.lambda < 0.0 {
            return bad("refinement weights must be nonnegative".into());
        }
        if !(self.theta_max > 0.0 && self.theta_max <= 1.0) {
            return bad(format!("theta_max {} outside (0, 1]", self.theta_max));
        }
        if self.n_iter == 0 {
            return bad("n_iter must be positive".into());
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma {} must be positive", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.tau_thr) {
            return bad(format!("tau_thr {} outside [0, 1]", self.tau_thr));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return bad(format!("rho {} outside [0, 1)", self.rho));
        }
        if !(self.norm_window > 0.0) {
            return bad(format!("norm_window {} must be positive", self.norm_window));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) {
                return bad(format!("step_size {s} must be positive"));
            }
        }
        if self.min_durations.iter().any(|&d| !(d > 0.0)) {
            return bad("minimum durations must be positive".into());
        }
        Ok(())
    }

    /// Upper bound on the objective's gradient Lipschitz constant.
    pub fn lipschitz(&self) -> f64 {
        2.0 * (1.0 + 4.0 * self.lambda_s + self.lambda_b + self.lambda)
    }
}

/// Fixed per-frame guide for the refinement: target `r` and reliability `η`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopologyTarget {
    pub r: Vec<f64>,
    pub eta: Vec<f64>,
}

impl TopologyTarget {
    /// Build the target from a feature matrix whose trailing `2·layers·grid`
    /// columns are the fine-scale landscape block.
    pub fn from_features(
        fm: &FrameFeatureMatrix,
        layers: usize,
        grid: usize,
        cfg: &RefineConfig,
    ) -> Result<TopologyTarget> {
        let r = topo_target(fm, layers, grid, cfg)?;
        let eta = reliability(&r, cfg);
        Ok(TopologyTarget { r, eta })
    }

    pub fn validate(&self, frames: usize) -> Result<()> {
        if self.r.len() != frames || self.eta.len() != frames {
            return Err(Error::Config(format!(
                "topology target lengths {}/{} do not match {frames} frames",
                self.r.len(),
                self.eta.len()
            )));
        }
        let in_unit = |v: &f64| (0.0..=1.0).contains(v);
        if !self.r.iter().all(in_unit) || !self.eta.iter().all(in_unit) {
            return Err(Error::Config("topology target outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Linear-interpolation percentile of an ascending-sorted slice.
fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-frame topology target `r(t)`.
///
/// The raw score sums, over the fine-scale H0 and H1 landscape layers, the
/// grid reduction (peak by default) of each layer.  The score is then
/// normalized per frame to `[0, 1]` by the p5/p95 percentiles of a centered
/// `norm_window`-second window; frames whose window is degenerate (p95 = p5)
/// get `r = 0`.
pub fn topo_target(
    fm: &FrameFeatureMatrix,
    layers: usize,
    grid: usize,
    cfg: &RefineConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if layers == 0 || grid == 0 {
        return Err(Error::Config("layers and grid must be positive".into()));
    }
    let block = 2 * layers * grid;
    if fm.width < block {
        return Err(Error::Config(format!(
            "feature width {} is smaller than one landscape block {block}",
            fm.width
        )));
    }
    let offset = fm.width - block;
    let mut raw = Vec::with_capacity(fm.frames);
    for t in 0..fm.frames {
        let fine = &fm.frame(t)[offset..];
        let mut score = 0.0f64;
        for layer in 0..2 * layers {
            let values = &fine[layer * grid..(layer + 1) * grid];
            score += match cfg.reduction {
                EpsReduction::Max => values
                    .iter()
                    .fold(0.0f64, |acc, &v| acc.max(v as f64)),
                EpsReduction::Mean => {
                    values.iter().map(|&v| v as f64).sum::<f64>() / grid as f64
                }
            };
        }
        raw.push(score);
    }

    let radius = (cfg.norm_window * fm.frame_rate / 2.0).round() as usize;
    let mut r = Vec::with_capacity(fm.frames);
    let mut window = Vec::with_capacity(2 * radius + 1);
    for t in 0..fm.frames {
        let lo = t.saturating_sub(radius);
        let hi = (t + radius + 1).min(fm.frames);
        window.clear();
        window.extend_from_slice(&raw[lo..hi]);
        window.sort_by(f64::total_cmp);
        let p5 = percentile_sorted(&window, 0.05);
        let p95 = percentile_sorted(&window, 0.95);
        let span = p95 - p5;
        if span > 0.0 {
            r.push(((raw[t] - p5) / span).clamp(0.0, 1.0));
        } else {
            r.push(0.0);
        }
    }
    Ok(r)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Reliability `η(t) = σ(γ·(EMA(t) − τ))` with `EMA(0) = r(0)`.
pub fn reliability(r: &[f64], cfg: &RefineConfig) -> Vec<f64> {
    let mut eta = Vec::with_capacity(r.len());
    let mut ema = r.first().copied().unwrap_or(0.0);
    for (t, &rt) in r.iter().enumerate() {
        if t > 0 {
            ema = cfg.rho * ema + (1.0 - cfg.rho) * rt;
        }
        eta.push(sigmoid(cfg.gamma * (ema - cfg.tau_thr)));
    }
    eta
}

/// Euclidean projection of a 4-vector onto the probability simplex
/// (sort-and-threshold).
pub fn simplex_project(v: &[f64; 4]) -> [f64; 4] {
    let mut sorted = *v;
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if u > candidate {
            theta = candidate;
        }
    }
    let mut out = *v;
    for o in out.iter_mut() {
        *o = (*o - theta).max(0.0);
    }
    out
}

/// Column indices of the sound classes inside a stochastic row.
const S1: usize = 0;
const S2: usize = 2;

/// Eq.-style refinement objective of a flat `T×4` iterate.
fn objective(p: &[f64], p_hat: &[f64], t: usize, target: &TopologyTarget, cfg: &RefineConfig) -> f64 {
    let mut f = 0.0;
    for i in 0..t * 4 {
        let d = p[i] - p_hat[i];
        f += d * d;
    }
    for i in 1..t {
        for j in 0..4 {
            let d = p[i * 4 + j] - p[(i - 1) * 4 + j];
            f += cfg.lambda_s * d * d;
        }
    }
    for i in 0..t {
        let evt = p[i * 4 + S1] + p[i * 4 + S2];
        let over = (evt - cfg.theta_max).max(0.0);
        f += cfg.lambda_b * over * over;
        let align = evt - target.r[i];
        f += cfg.lambda * target.eta[i] * align * align;
    }
    f
}

/// Gradient of [`objective`]; one-sided smoothness differences at the borders.
fn gradient(
    p: &[f64],
    p_hat: &[f64],
    t: usize,
    target: &TopologyTarget,
    cfg: &RefineConfig,
    out: &mut [f64],
) {
    for i in 0..t * 4 {
        out[i] = 2.0 * (p[i] - p_hat[i]);
    }
    for i in 0..t {
        for j in 0..4 {
            let idx = i * 4 + j;
            let mut g = 0.0;
            if i > 0 {
                g += p[idx] - p[idx - 4];
            }
            if i + 1 < t {
                g += p[idx] - p[idx + 4];
            }
            out[idx] += 2.0 * cfg.lambda_s * g;
        }
        let evt = p[i * 4 + S1] + p[i * 4 + S2];
        let mut gevt = 2.0 * cfg.lambda_b * (evt - cfg.theta_max).max(0.0);
        gevt += 2.0 * cfg.lambda * target.eta[i] * (evt - target.r[i]);
        out[i * 4 + S1] += gevt;
        out[i * 4 + S2] += gevt;
    }
}

/// Output of the refinement solver.
pub struct RefineOutcome {
    pub posterior: PosteriorSequence,
    /// Objective value after every accepted iteration, preceded by the
    /// starting value.
    pub objective_trace: Vec<f64>,
}

enum StopRule {
    Iters(usize),
    Converge { tol: f64, max_iter: usize },
}

fn pgd(
    mut p: Vec<f64>,
    p_hat: &PosteriorSequence,
    target: &TopologyTarget,
    cfg: &RefineConfig,
    stop: StopRule,
) -> Result<RefineOutcome> {
    cfg.validate()?;
    p_hat.validate(1e-6)?;
    let t = p_hat.frames;
    target.validate(t)?;
    debug_assert_eq!(p.len(), t * 4);

    // Start from a feasible point.
    for i in 0..t {
        let row: [f64; 4] = p[i * 4..(i + 1) * 4].try_into().unwrap();
        p[i * 4..(i + 1) * 4].copy_from_slice(&simplex_project(&row));
    }

    let base_step = cfg.step_size.unwrap_or(1.0 / cfg.lipschitz());
    let mut step = base_step;
    let mut grad = vec![0.0; t * 4];
    let mut candidate = vec![0.0; t * 4];
    let mut f_cur = objective(&p, &p_hat.p, t, target, cfg);
    let mut trace = vec![f_cur];
    let (iters, tol) = match stop {
        StopRule::Iters(n) => (n, 0.0),
        StopRule::Converge { tol, max_iter } => (max_iter, tol),
    };

    for _ in 0..iters {
        gradient(&p, &p_hat.p, t, target, cfg, &mut grad);
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..t {
                let mut row = [0.0f64; 4];
                for j in 0..4 {
                    row[j] = p[i * 4 + j] - step * grad[i * 4 + j];
                }
                candidate[i * 4..(i + 1) * 4].copy_from_slice(&simplex_project(&row));
            }
            let f_new = objective(&candidate, &p_hat.p, t, target, cfg);
            if f_new <= f_cur {
                f_cur = f_new;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
        let mut delta = 0.0f64;
        for (pv, cv) in p.iter().zip(&candidate) {
            delta = delta.max((pv - cv).abs());
        }
        std::mem::swap(&mut p, &mut candidate);
        trace.push(f_cur);
        if matches!(stop, StopRule::Converge { .. }) && delta <= tol {
            break;
        }
    }

    Ok(RefineOutcome {
        posterior: PosteriorSequence {
            p,
            frames: t,
            frame_rate: p_hat.frame_rate,
        },
        objective_trace: trace,
    })
}

/// Refine `p_hat` with `cfg.n_iter` monotone projected-gradient iterations.
pub fn refine_pgd(
    p_hat: &PosteriorSequence,
    target: &TopologyTarget,
    cfg: &RefineConfig,
) -> Result<RefineOutcome> {
    pgd(p_hat.p.clone(), p_hat, target, cfg, StopRule::Iters(cfg.n_iter))
}

/// Run the solver until the iterate moves less than `tol` in max-norm.
pub fn refine_to_convergence(
    p_hat: &PosteriorSequence,
    target: &TopologyTarget,
    cfg: &RefineConfig,
    tol: f64,
    max_iter: usize,
) -> Result<RefineOutcome> {
    pgd(
        p_hat.p.clone(),
        p_hat,
        target,
        cfg,
        StopRule::Converge { tol, max_iter },
    )
}

/// [`refine_to_convergence`] from an explicit feasible start.
pub fn refine_to_convergence_from(
    start: &[f64],
    p_hat: &PosteriorSequence,
    target: &TopologyTarget,
    cfg: &RefineConfig,
    tol: f64,
    max_iter: usize,
) -> Result<RefineOutcome> {
    if start.len() != p_hat.frames * 4 {
        return Err(Error::Config(format!(
            "start length {} does not match {} frames",
            start.len(),
            p_hat.frames
        )));
    }
    pgd(
        start.to_vec(),
        p_hat,
        target,
        cfg,
        StopRule::Converge { tol, max_iter },
    )
}

/// Objective value of an iterate; exposed for monotonicity and oracle tests.
pub fn refine_objective(
    p: &PosteriorSequence,
    p_hat: &PosteriorSequence,
    target: &TopologyTarget,
    cfg: &RefineConfig,
) -> f64 {
    objective(&p.p, &p_hat.p, p_hat.frames, target, cfg)
}

/// Maximum-likelihood state path under the cyclic order
/// S1 → systole → S2 → diastole (self-loops allowed) with per-state minimum
/// durations, by dynamic programming over (state, bounded run length).
///
/// The first and last runs are exempt from the minimum durations.  When the
/// recording is shorter than one full minimum cycle the decoder falls back
/// to framewise argmax with a warning.
pub fn constrained_decode(p: &PosteriorSequence, min_durations: &[f64; 4]) -> LabelSequence {
    let t = p.frames;
    if t == 0 {
        return LabelSequence {
            states: Vec::new(),
            frame_rate: p.frame_rate,
        };
    }
    // Minimum durations in frames, at least one frame each.
    let dmin: [usize; 4] =
        std::array::from_fn(|s| ((min_durations[s] * p.frame_rate).round() as usize).max(1));
    let cycle: usize = dmin.iter().sum();
    if t < cycle {
        log::warn!(
            "{} frames is shorter than one minimum cycle ({cycle}); falling back to argmax",
            t
        );
        return p.argmax_labels();
    }

    // Cell layout: per frame, state s occupies dmin[s] run-length slots.
    let offsets = {
        let mut o = [0usize; 4];
        for s in 1..4 {
            o[s] = o[s - 1] + dmin[s - 1];
        }
        o
    };
    let cells = cycle;
    let cell = |s: usize, d: usize| offsets[s] + d - 1;
    let pred = |s: usize| (s + 3) % 4;

    let logp = |t_idx: usize, s: usize| p.row(t_idx)[s].max(1e-300).ln();

    let mut dp_prev = vec![f64::NEG_INFINITY; cells];
    let mut dp_cur = vec![f64::NEG_INFINITY; cells];
    let mut back = vec![u16::MAX; t * cells];
    // The first run starts with full duration credit, so it may be cut short.
    for s in 0..4 {
        dp_prev[cell(s, dmin[s])] = logp(0, s);
    }
    for ti in 1..t {
        dp_cur.iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        for s in 0..4 {
            let lp = logp(ti, s);
            for d in 1..=dmin[s] {
                let mut best = f64::NEG_INFINITY;
                let mut from = u16::MAX;
                if d == 1 {
                    let ps = pred(s);
                    let c = cell(ps, dmin[ps]);
                    if dp_prev[c] > best {
                        best = dp_prev[c];
                        from = c as u16;
                    }
                }
                if d > 1 {
                    let c = cell(s, d - 1);
                    if dp_prev[c] > best {
                        best = dp_prev[c];
                        from = c as u16;
                    }
                }
                if d == dmin[s] {
                    let c = cell(s, d);
                    if dp_prev[c] > best {
                        best = dp_prev[c];
                        from = c as u16;
                    }
                }
                let idx = cell(s, d);
                dp_cur[idx] = best + lp;
                back[ti * cells + idx] = from;
            }
        }
        std::mem::swap(&mut dp_prev, &mut dp_cur);
    }

    // The last run is unconstrained: take the best cell of the final frame.
    let mut best_cell = 0;
    for c in 1..cells {
        if dp_prev[c] > dp_prev[best_cell] {
            best_cell = c;
        }
    }
    let state_of = |c: usize| (0..4).rfind(|&s| offsets[s] <= c).unwrap();
    let mut states = vec![HeartState::Diastole; t];
    let mut c = best_cell;
    for ti in (0..t).rev() {
        states[ti] = HeartState::from_index(state_of(c)).unwrap();
        if ti > 0 {
            c = back[ti * cells + c] as usize;
        }
    }
    LabelSequence {
        states,
        frame_rate: p.frame_rate,
    }
}

/// Best log-likelihood found by [`constrained_decode`]'s dynamic program for
/// a given label path (for oracle comparisons).
pub fn path_log_likelihood(p: &PosteriorSequence, path: &LabelSequence) -> f64 {
    path.states
        .iter()
        .enumerate()
        .map(|(t, s)| p.row(t)[s.index()].max(1e-300).ln())
        .sum()
}
