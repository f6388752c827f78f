//! Inference on a trained model: future/past prediction, interpolation via
//! latent intersection, best-of-M evaluation, error-vs-time curves, and
//! temporal-editing directions via PCA on encoded variants.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{point_distance, segment_from_window, Segment, Trajectory};
use crate::error::TrajError;
use crate::latent::{Distribution, NEAR_EMPTY_LOG_VOL};
use crate::model::TrajModel;
use crate::train::stream_rng;
use crate::Result;

// ---------------------------------------------------------------------------
// prediction and interpolation
// ---------------------------------------------------------------------------

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(TrajError::Data("predict: no query times".into()));
    }
    if !times.iter().all(|t| t.is_finite()) {
        return Err(TrajError::Data("predict: non-finite query time".into()));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(TrajError::Data("predict: query times must be sorted".into()));
    }
    Ok(())
}

/// M independent latent samples from Θ(seg), each decoded at all query times.
/// Past prediction is the same operation with times before the segment span.
pub fn predict(
    model: &TrajModel,
    seg: &Segment,
    times: &[f64],
    m: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if m == 0 {
        return Err(TrajError::Config("predict: M must be ≥ 1".into()));
    }
    check_times(times)?;
    let d = model.encode(seg)?;
    let zs: Vec<Vec<f64>> = (0..m).map(|_| d.sample(rng)).collect();
    let jobs: Vec<(&[f64], &[f64])> = zs.iter().map(|z| (z.as_slice(), times)).collect();
    model.decode_many(&jobs)
}

/// Combination of two beliefs with a near-emptiness verdict: boxes whose soft
/// intersection volume falls below exp(NEAR_EMPTY_LOG_VOL) are flagged, but
/// remain sampleable (the draw collapses toward the degenerate region).
pub fn intersect_with_flag(a: &Distribution, b: &Distribution) -> Result<(Distribution, bool)> {
    let inter = a.intersect(b)?;
    let near_empty = match inter.log_mass()? {
        Some(lv) => lv < NEAR_EMPTY_LOG_VOL,
        None => false,
    };
    Ok((inter, near_empty))
}

#[derive(Clone, Debug)]
pub struct Interpolation {
    pub candidates: Vec<Vec<Vec<f64>>>,
    /// The latent intersection was near-empty; candidates come from the
    /// degenerate region.
    pub near_empty: bool,
}

/// Sample M latents from intersect(Θ(past), Θ(future)) and decode them at the
/// query times (normally inside the gap between the two spans).
pub fn interpolate(
    model: &TrajModel,
    past: &Segment,
    future: &Segment,
    times: &[f64],
    m: usize,
    rng: &mut impl Rng,
) -> Result<Interpolation> {
    if m == 0 {
        return Err(TrajError::Config("interpolate: M must be ≥ 1".into()));
    }
    check_times(times)?;
    let dists = model.encode_many(&[past, future])?;
    let (inter, near_empty) = intersect_with_flag(&dists[0], &dists[1])?;
    let zs: Vec<Vec<f64>> = (0..m).map(|_| inter.sample(rng)).collect();
    let jobs: Vec<(&[f64], &[f64])> = zs.iter().map(|z| (z.as_slice(), times)).collect();
    Ok(Interpolation { candidates: model.decode_many(&jobs)?, near_empty })
}

// ---------------------------------------------------------------------------
// scoring
// ---------------------------------------------------------------------------

/// Mean-over-times δ error of one candidate against a ground-truth segment.
/// Times with no visible joint are skipped; erroring when nothing is visible
/// anywhere.
pub fn candidate_error(candidate: &[Vec<f64>], truth: &Segment) -> Result<f64> {
    if candidate.len() != truth.count() {
        return Err(TrajError::Dim(format!(
            "candidate has {} points, truth {}",
            candidate.len(),
            truth.count()
        )));
    }
    let all = vec![true; truth.joints()];
    let mut sum = 0.0;
    let mut n = 0usize;
    for (row, (tp, tv)) in candidate.iter().zip(truth.points.iter().zip(&truth.visibility)) {
        if !tv.iter().any(|&v| v) {
            continue;
        }
        sum += point_distance(row, &all, tp, tv)?;
        n += 1;
    }
    if n == 0 {
        return Err(TrajError::Data("candidate_error: no visible points".into()));
    }
    Ok(sum / n as f64)
}

/// Min over candidates of the mean-over-times δ error.
pub fn best_of_m_error(candidates: &[Vec<Vec<f64>>], truth: &Segment) -> Result<f64> {
    let curve = best_of_m_curve(candidates, truth)?;
    Ok(*curve.last().expect("≥1 candidate"))
}

/// Nested best-of-m values for m = 1..=M over the given candidate order;
/// non-increasing by construction.
pub fn best_of_m_curve(candidates: &[Vec<Vec<f64>>], truth: &Segment) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(TrajError::Data("best_of_m: no candidates".into()));
    }
    let mut best = f64::INFINITY;
    let mut curve = Vec::with_capacity(candidates.len());
    for c in candidates {
        best = best.min(candidate_error(c, truth)?);
        curve.push(best);
    }
    Ok(curve)
}

// ---------------------------------------------------------------------------
// baselines
// ---------------------------------------------------------------------------

/// Linear extrapolation through the segment's first and last points; a
/// single-point segment extends as a constant.
pub fn constant_velocity_baseline(seg: &Segment, times: &[f64]) -> Result<Vec<Vec<f64>>> {
    check_times(times)?;
    let a = &seg.points[0];
    let b = &seg.points[seg.count() - 1];
    let (ta, tb) = (seg.times[0], seg.times[seg.count() - 1]);
    let dt = tb - ta;
    let vel: Vec<f64> = if dt > 0.0 {
        a.iter().zip(b).map(|(&x, &y)| (y - x) / dt).collect()
    } else {
        vec![0.0; seg.k()]
    };
    Ok(times
        .iter()
        .map(|&t| a.iter().zip(&vel).map(|(&x, &v)| x + v * (t - ta)).collect())
        .collect())
}

/// Straight line from the past segment's last point to the future segment's
/// first point.
pub fn linear_bridge_baseline(
    past: &Segment,
    future: &Segment,
    times: &[f64],
) -> Result<Vec<Vec<f64>>> {
    check_times(times)?;
    if past.k() != future.k() {
        return Err(TrajError::Dim("bridge: point dims differ".into()));
    }
    let a = &past.points[past.count() - 1];
    let b = &future.points[0];
    let (ta, tb) = (past.times[past.count() - 1], future.times[0]);
    let dt = tb - ta;
    if dt <= 0.0 {
        return Err(TrajError::Data("bridge: segments are not ordered in time".into()));
    }
    Ok(times
        .iter()
        .map(|&t| {
            let w = (t - ta) / dt;
            a.iter().zip(b).map(|(&x, &y)| x + w * (y - x)).collect()
        })
        .collect())
}

// ---------------------------------------------------------------------------
// evaluation report
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Candidates per prediction.
    pub m: usize,
    /// Number of test-time seeds; the report carries mean and std across them.
    pub seeds: usize,
    /// Frames covered by one evaluation window (split into thirds).
    pub window_frames: usize,
    /// Bins of the error-vs-time curve.
    pub bins: usize,
    /// Curve horizon in seconds, measured from the end of the input segment.
    pub horizon: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { m: 10, seeds: 10, window_frames: 30, bins: 20, horizon: 0.6 }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.seeds == 0 || self.bins == 0 {
            return Err(TrajError::Config("eval: m, seeds and bins must be positive".into()));
        }
        if self.window_frames < 12 {
            return Err(TrajError::Config("eval: window_frames must be ≥ 12".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(TrajError::Config("eval: horizon must be positive".into()));
        }
        Ok(())
    }
}

/// One evaluation window, split into thirds: the model sees `past` and/or
/// `future` and is scored on `middle`, so the F, P and I columns share one
/// target span.
pub struct EvalWindows {
    pub past: Segment,
    pub middle: Segment,
    pub future: Segment,
}

pub fn sample_eval_windows(
    traj: &Trajectory,
    window_frames: usize,
    rng: &mut rand_chacha::ChaCha12Rng,
) -> Result<EvalWindows> {
    let t = traj.len();
    if t < 12 {
        return Err(TrajError::Data(format!(
            "trajectory {} too short for evaluation windows: {t} frames",
            traj.id
        )));
    }
    let len = window_frames.clamp(12, t);
    let part = len / 3;
    let start = rng.random_range(0..=t - len);
    Ok(EvalWindows {
        past: segment_from_window(traj, start, part, rng)?,
        middle: segment_from_window(traj, start + part, part, rng)?,
        future: segment_from_window(traj, start + 2 * part, len - 2 * part, rng)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStats {
    pub mean: f64,
    pub std: f64,
}

fn stats(xs: &[f64]) -> TaskStats {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    TaskStats { mean, std: var.sqrt() }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTriple {
    pub f: TaskStats,
    pub p: TaskStats,
    pub i: TaskStats,
}

/// Best-of-M errors per task (mean ± std across seeds) for the model and the
/// straight-line baselines, plus a reconstruction column (the input decoded
/// at its own times).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub m: usize,
    pub seeds: usize,
    pub trajectories: usize,
    pub model: TaskTriple,
    pub baseline: TaskTriple,
    pub reconstruction: TaskStats,
    /// Evaluation windows whose latent intersection was near-empty.
    pub near_empty_intersections: usize,
}

impl EvalReport {
    /// Rows = methods, columns = F/P/I mean and std.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("method,F_mean,F_std,P_mean,P_std,I_mean,I_std\n");
        for (name, t) in [("model", &self.model), ("constant_velocity", &self.baseline)] {
            s.push_str(&format!(
                "{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                t.f.mean, t.f.std, t.p.mean, t.p.std, t.i.mean, t.i.std
            ));
        }
        s
    }
}

struct WindowScores {
    f: f64,
    p: f64,
    i: f64,
    bf: f64,
    bp: f64,
    bi: f64,
    recon: f64,
    near_empty: bool,
}

const STREAM_EVAL: u64 = 16;

fn score_window(
    model: &TrajModel,
    traj: &Trajectory,
    cfg: &EvalConfig,
    master_seed: u64,
    seed_ix: u64,
    traj_ix: u64,
) -> Result<WindowScores> {
    let mut rng = stream_rng(master_seed, seed_ix, STREAM_EVAL, traj_ix);
    let w = sample_eval_windows(traj, cfg.window_frames, &mut rng)?;
    let times = &w.middle.times;

    let f_cand = predict(model, &w.past, times, cfg.m, &mut rng)?;
    let p_cand = predict(model, &w.future, times, cfg.m, &mut rng)?;
    let inter = interpolate(model, &w.past, &w.future, times, cfg.m, &mut rng)?;
    let recon_cand = predict(model, &w.past, &w.past.times, cfg.m, &mut rng)?;

    Ok(WindowScores {
        f: best_of_m_error(&f_cand, &w.middle)?,
        p: best_of_m_error(&p_cand, &w.middle)?,
        i: best_of_m_error(&inter.candidates, &w.middle)?,
        bf: best_of_m_error(&[constant_velocity_baseline(&w.past, times)?], &w.middle)?,
        bp: best_of_m_error(&[constant_velocity_baseline(&w.future, times)?], &w.middle)?,
        bi: best_of_m_error(&[linear_bridge_baseline(&w.past, &w.future, times)?], &w.middle)?,
        recon: best_of_m_error(&recon_cand, &w.past)?,
        near_empty: inter.near_empty,
    })
}

/// Evaluate the three tasks over a dataset: each seed draws fresh windows and
/// latent samples; the report aggregates across seeds.
pub fn evaluate(
    model: &TrajModel,
    trajs: &[Trajectory],
    cfg: &EvalConfig,
    master_seed: u64,
) -> Result<EvalReport> {
    cfg.validate()?;
    if trajs.is_empty() {
        return Err(TrajError::Data("evaluate: empty dataset".into()));
    }
    let mut per_seed: Vec<Vec<f64>> = vec![Vec::new(); 7];
    let mut near_empty = 0usize;
    for s in 0..cfg.seeds {
        let scores: Vec<WindowScores> = trajs
            .par_iter()
            .enumerate()
            .map(|(ti, traj)| score_window(model, traj, cfg, master_seed, s as u64, ti as u64))
            .collect::<Result<Vec<_>>>()?;
        let n = scores.len() as f64;
        let mut acc = [0.0; 7];
        for w in &scores {
            for (a, v) in acc
                .iter_mut()
                .zip([w.f, w.p, w.i, w.bf, w.bp, w.bi, w.recon])
            {
                *a += v;
            }
            near_empty += w.near_empty as usize;
        }
        for (col, a) in per_seed.iter_mut().zip(acc) {
            col.push(a / n);
        }
    }
    Ok(EvalReport {
        m: cfg.m,
        seeds: cfg.seeds,
        trajectories: trajs.len(),
        model: TaskTriple { f: stats(&per_seed[0]), p: stats(&per_seed[1]), i: stats(&per_seed[2]) },
        baseline: TaskTriple {
            f: stats(&per_seed[3]),
            p: stats(&per_seed[4]),
            i: stats(&per_seed[5]),
        },
        reconstruction: stats(&per_seed[6]),
        near_empty_intersections: near_empty,
    })
}

// ---------------------------------------------------------------------------
// error vs time
// ---------------------------------------------------------------------------

/// Binned mean error as a function of time from the end of the input segment
/// (t = 0 is the input's end). Bins partition [0, horizon] exactly; empty
/// bins are missing, not zero.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ErrorCurve {
    pub edges: Vec<f64>,
    pub mean: Vec<Option<f64>>,
    pub counts: Vec<usize>,
}

const STREAM_CURVE: u64 = 17;

pub fn error_vs_time(
    model: &TrajModel,
    trajs: &[Trajectory],
    cfg: &EvalConfig,
    master_seed: u64,
) -> Result<ErrorCurve> {
    cfg.validate()?;
    if trajs.is_empty() {
        return Err(TrajError::Data("error_vs_time: empty dataset".into()));
    }
    let width = cfg.horizon / cfg.bins as f64;
    let edges: Vec<f64> = (0..=cfg.bins).map(|i| i as f64 * width).collect();

    // (sum, count) per bin per trajectory, reduced in order
    let partials: Vec<Vec<(f64, usize)>> = trajs
        .par_iter()
        .enumerate()
        .map(|(ti, traj)| -> Result<Vec<(f64, usize)>> {
            let mut rng = stream_rng(master_seed, 0, STREAM_CURVE, ti as u64);
            let rs = crate::pairs::sample_role_segments(traj, cfg.window_frames, &mut rng)?;
            let cands = predict(model, &rs.past, &rs.future.times, cfg.m, &mut rng)?;
            let all = vec![true; rs.future.joints()];
            let mut bins = vec![(0.0, 0usize); cfg.bins];
            let t_end = rs.past.span.1;
            for (ix, (&t, (tp, tv))) in rs
                .future
                .times
                .iter()
                .zip(rs.future.points.iter().zip(&rs.future.visibility))
                .enumerate()
            {
                let dt = t - t_end;
                if dt < 0.0 || dt > cfg.horizon || !tv.iter().any(|&v| v) {
                    continue;
                }
                let bin = ((dt / width) as usize).min(cfg.bins - 1);
                let mut best = f64::INFINITY;
                for c in &cands {
                    best = best.min(point_distance(&c[ix], &all, tp, tv)?);
                }
                bins[bin].0 += best;
                bins[bin].1 += 1;
            }
            Ok(bins)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut sums = vec![(0.0, 0usize); cfg.bins];
    for p in partials {
        for (acc, b) in sums.iter_mut().zip(p) {
            acc.0 += b.0;
            acc.1 += b.1;
        }
    }
    let mean = sums
        .iter()
        .map(|&(s, n)| if n > 0 { Some(s / n as f64) } else { None })
        .collect();
    let counts = sums.iter().map(|&(_, n)| n).collect();
    Ok(ErrorCurve { edges, mean, counts })
}

// ---------------------------------------------------------------------------
// latent editing
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditAttribute {
    /// Multiply time indices by a constant.
    Speed,
    /// Add a constant to time indices.
    Offset,
}

/// Number of time-modified variants encoded per source segment.
pub const EDIT_VARIANTS: usize = 10;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EditDirection {
    /// Unit vector in latent space.
    pub direction: Vec<f64>,
    pub attribute: EditAttribute,
    /// Source segments the direction was averaged over.
    pub segments: usize,
    /// Mean fraction of variance captured by the first component.
    pub variance_explained: f64,
}

/// First principal component of the rows via covariance power iteration
/// (50 iterations, tolerance 1e-9), plus the fraction of variance explained.
/// The sign is arbitrary; callers align it.
pub fn principal_component(rows: &[Vec<f64>]) -> Result<(Vec<f64>, f64)> {
    if rows.len() < 2 {
        return Err(TrajError::Data("pca: need at least two rows".into()));
    }
    let n = rows[0].len();
    if rows.iter().any(|r| r.len() != n) || n == 0 {
        return Err(TrajError::Dim("pca: ragged rows".into()));
    }
    let m = rows.len() as f64;
    let mut mean = vec![0.0; n];
    for r in rows {
        for (a, &x) in mean.iter_mut().zip(r) {
            *a += x / m;
        }
    }
    let centered: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.iter().zip(&mean).map(|(&x, &c)| x - c).collect())
        .collect();
    let denom = m - 1.0;
    let trace: f64 = (0..n)
        .map(|j| centered.iter().map(|r| r[j] * r[j]).sum::<f64>() / denom)
        .sum();
    if !(trace > 1e-18) {
        return Err(TrajError::Data("pca: degenerate variance (all rows identical)".into()));
    }

    // cov·v without materializing cov: Xᵀ(X v) / (m−1)
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * i as f64).collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut lambda = 0.0;
    for _ in 0..50 {
        let xv: Vec<f64> = centered
            .iter()
            .map(|r| r.iter().zip(&v).map(|(&a, &b)| a * b).sum::<f64>())
            .collect();
        let mut w = vec![0.0; n];
        for (r, &c) in centered.iter().zip(&xv) {
            for (a, &x) in w.iter_mut().zip(r) {
                *a += x * c / denom;
            }
        }
        let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(wn > 1e-18) {
            return Err(TrajError::Data("pca: power iteration collapsed".into()));
        }
        w.iter_mut().for_each(|x| *x /= wn);
        let delta: f64 = w
            .iter()
            .zip(&v)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max);
        lambda = wn;
        v = w;
        if delta < 1e-9 {
            break;
        }
    }
    Ok((v, lambda / trace))
}

fn time_variants(seg: &Segment, attribute: EditAttribute) -> Result<Vec<Segment>> {
    let mut out = Vec::with_capacity(EDIT_VARIANTS);
    for i in 0..EDIT_VARIANTS {
        let u = i as f64 / (EDIT_VARIANTS - 1) as f64;
        let times: Vec<f64> = match attribute {
            // factors in [0.5, 2.0]
            EditAttribute::Speed => {
                let c = 0.5 + 1.5 * u;
                seg.times.iter().map(|&t| t * c).collect()
            }
            // shifts in [-1, 1] seconds
            EditAttribute::Offset => {
                let c = -1.0 + 2.0 * u;
                seg.times.iter().map(|&t| t + c).collect()
            }
        };
        let span = (times[0], times[times.len() - 1]);
        out.push(Segment::new(
            times,
            seg.points.clone(),
            seg.visibility.clone(),
            seg.parent_id.clone(),
            span,
        )?);
    }
    Ok(out)
}

/// Average the first principal component of the encoded locations of
/// time-modified variants across source segments, sign-aligned to the first
/// segment's component; deterministic.
pub fn edit_direction(
    model: &TrajModel,
    segs: &[&Segment],
    attribute: EditAttribute,
) -> Result<EditDirection> {
    if segs.len() < 10 {
        return Err(TrajError::Config(format!(
            "edit_direction: need ≥ 10 source segments, got {}",
            segs.len()
        )));
    }
    let comps: Vec<(Vec<f64>, f64)> = segs
        .par_iter()
        .map(|seg| -> Result<(Vec<f64>, f64)> {
            let variants = time_variants(seg, attribute)?;
            let refs: Vec<&Segment> = variants.iter().collect();
            let dists = model.encode_many(&refs)?;
            let locs: Vec<Vec<f64>> = dists.iter().map(|d| d.location()).collect();
            principal_component(&locs)
        })
        .collect::<Result<Vec<_>>>()?;

    let reference = &comps[0].0;
    let n = reference.len();
    let mut avg = vec![0.0; n];
    let mut explained = 0.0;
    for (c, e) in &comps {
        let dot: f64 = c.iter().zip(reference).map(|(&a, &b)| a * b).sum();
        let sign = if dot < 0.0 { -1.0 } else { 1.0 };
        for (a, &x) in avg.iter_mut().zip(c) {
            *a += sign * x;
        }
        explained += e;
    }
    let norm = avg.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 1e-12) {
        return Err(TrajError::Data("edit_direction: per-segment directions cancel".into()));
    }
    avg.iter_mut().for_each(|x| *x /= norm);
    Ok(EditDirection {
        direction: avg,
        attribute,
        segments: segs.len(),
        variance_explained: explained / comps.len() as f64,
    })
}

/// Decode location(Θ(seg)) + λ·direction at the query times, one sequence per
/// magnitude.
pub fn apply_edit(
    model: &TrajModel,
    seg: &Segment,
    direction: &[f64],
    magnitudes: &[f64],
    times: &[f64],
) -> Result<Vec<Vec<Vec<f64>>>> {
    check_times(times)?;
    let loc = model.encode(seg)?.location();
    if loc.len() != direction.len() {
        return Err(TrajError::Dim(format!(
            "apply_edit: direction dim {} vs latent {}",
            direction.len(),
            loc.len()
        )));
    }
    let zs: Vec<Vec<f64>> = magnitudes
        .iter()
        .map(|&l| loc.iter().zip(direction).map(|(&a, &d)| a + l * d).collect())
        .collect();
    let jobs: Vec<(&[f64], &[f64])> = zs.iter().map(|z| (z.as_slice(), times)).collect();
    model.decode_many(&jobs)
}

/// Best time-rescale factor c such that decoding `z_base` at c·times matches
/// the target points: coarse log grid over [0.25, 4] then one refinement
/// pass. Deterministic.
pub fn fit_time_rescale(
    model: &TrajModel,
    z_base: &[f64],
    target: &[Vec<f64>],
    times: &[f64],
) -> Result<f64> {
    if target.len() != times.len() || times.is_empty() {
        return Err(TrajError::Dim("fit_time_rescale: target/times length mismatch".into()));
    }
    let k = model.k;
    if target.iter().any(|r| r.len() != k) {
        return Err(TrajError::Dim("fit_time_rescale: target point dim mismatch".into()));
    }
    let all = vec![true; k / 2];
    let eval_grid = |cs: &[f64]| -> Result<Vec<f64>> {
        let scaled: Vec<Vec<f64>> = cs
            .iter()
            .map(|&c| times.iter().map(|&t| c * t).collect())
            .collect();
        let jobs: Vec<(&[f64], &[f64])> =
            scaled.iter().map(|ts| (z_base, ts.as_slice())).collect();
        let decoded = model.decode_many(&jobs)?;
        decoded
            .iter()
            .map(|points| {
                let mut sum = 0.0;
                for (p, t) in points.iter().zip(target) {
                    sum += point_distance(p, &all, t, &all)?;
                }
                Ok(sum / times.len() as f64)
            })
            .collect()
    };

    let argmin = |errs: &[f64]| -> usize {
        errs.iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).expect("finite errors"))
            .map(|(i, _)| i)
            .expect("nonempty grid")
    };
    let coarse: Vec<f64> = (0..81).map(|i| 0.25 * 16f64.powf(i as f64 / 80.0)).collect();
    let best = argmin(&eval_grid(&coarse)?);
    let lo = coarse[best.saturating_sub(1)];
    let hi = coarse[(best + 1).min(coarse.len() - 1)];
    // the coarse winner rides along so refinement can only improve
    let mut fine: Vec<f64> = (0..=20).map(|i| lo + (hi - lo) * i as f64 / 20.0).collect();
    fine.push(coarse[best]);
    let best = argmin(&eval_grid(&fine)?);
    Ok(fine[best])
}

// ---------------------------------------------------------------------------
