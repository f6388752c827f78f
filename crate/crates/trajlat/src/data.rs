//! Trajectory data model, synthetic generators, JSONL ingestion,
//! normalization, and segment sampling.
//!
//! A trajectory is a continuous motion observed at discrete frame times; a
//! segment is a partial observation of one — a sparse, irregular subset of
//! frames inside a contiguous window. Invisible joints carry a false
//! visibility bit and zeroed coordinates; on disk they are encoded as nulls.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, TrajError};

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub id: String,
    pub fps: f64,
    /// Strictly increasing, seconds, t=0 at trajectory start.
    pub times: Vec<f64>,
    /// T rows of K = 2J interleaved coordinates [x0, y0, x1, y1, ...].
    pub points: Vec<Vec<f64>>,
    /// T rows of J per-joint visibility bits.
    pub visibility: Vec<Vec<bool>>,
}

impl Trajectory {
    pub fn new(
        id: String,
        fps: f64,
        times: Vec<f64>,
        points: Vec<Vec<f64>>,
        visibility: Vec<Vec<bool>>,
    ) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(TrajError::Data(format!("trajectory {id}: fps must be positive")));
        }
        if times.is_empty() || times.len() != points.len() || times.len() != visibility.len() {
            return Err(TrajError::Data(format!(
                "trajectory {id}: times/points/visibility length mismatch"
            )));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TrajError::Data(format!(
                "trajectory {id}: times not strictly increasing"
            )));
        }
        let k = points[0].len();
        if k == 0 || k % 2 != 0 {
            return Err(TrajError::Data(format!("trajectory {id}: K must be even and nonzero")));
        }
        let j = k / 2;
        for (t, (row, vis)) in points.iter().zip(&visibility).enumerate() {
            if row.len() != k || vis.len() != j {
                return Err(TrajError::Data(format!(
                    "trajectory {id}: inconsistent row width at frame {t}"
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(TrajError::Data(format!(
                    "trajectory {id}: non-finite coordinate at frame {t}"
                )));
            }
        }
        Ok(Trajectory { id, fps, times, points, visibility })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn joints(&self) -> usize {
        self.points[0].len() / 2
    }

    pub fn k(&self) -> usize {
        self.points[0].len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    pub visibility: Vec<Vec<bool>>,
    pub parent_id: Option<String>,
    /// Temporal window [t_start, t_end] the observation was drawn from.
    pub span: (f64, f64),
}

impl Segment {
    pub fn new(
        times: Vec<f64>,
        points: Vec<Vec<f64>>,
        visibility: Vec<Vec<bool>>,
        parent_id: Option<String>,
        span: (f64, f64),
    ) -> Result<Self> {
        if times.is_empty() || times.len() != points.len() || times.len() != visibility.len() {
            return Err(TrajError::Data("segment: length mismatch".into()));
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(TrajError::Data("segment: times not strictly increasing".into()));
        }
        if times.iter().any(|&t| t < span.0 - 1e-9 || t > span.1 + 1e-9) {
            return Err(TrajError::Data("segment: time outside span".into()));
        }
        Ok(Segment { times, points, visibility, parent_id, span })
    }

    pub fn count(&self) -> usize {
        self.times.len()
    }

    pub fn k(&self) -> usize {
        self.points[0].len()
    }

    pub fn joints(&self) -> usize {
        self.k() / 2
    }
}

// ---------------------------------------------------------------------------
// generators
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    ArticulatedPendulum,
    LissajousWalker,
    BounceBranch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub joints: usize,
    pub duration: f64,
    pub fps: f64,
    pub noise_std: f64,
    /// bounce_branch only: probability the post-branch direction flips.
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
}

fn default_flip_prob() -> f64 {
    0.5
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.joints == 0 {
            return Err(TrajError::Config("generator: joints must be >= 1".into()));
        }
        if !(self.duration > 0.0 && self.fps > 0.0) {
            return Err(TrajError::Config("generator: duration and fps must be positive".into()));
        }
        if self.noise_std < 0.0 {
            return Err(TrajError::Config("generator: noise_std must be >= 0".into()));
        }
        if ((self.duration * self.fps) as usize) < 4 {
            return Err(TrajError::Config("generator: fewer than 4 frames".into()));
        }
        if self.kind == GeneratorKind::BounceBranch
            && !(self.flip_prob > 0.0 && self.flip_prob < 1.0)
        {
            return Err(TrajError::Config(
                "generator: bounce_branch needs 0 < flip_prob < 1".into(),
            ));
        }
        Ok(())
    }

    fn frames(&self) -> usize {
        (self.duration * self.fps).round() as usize
    }
}

struct PendulumParams {
    lengths: Vec<f64>,
    amps: Vec<f64>,
    base: Vec<f64>,
    phases: Vec<f64>,
    freq: f64,
}

fn pendulum_params(rng: &mut ChaCha12Rng, joints: usize) -> PendulumParams {
    let links = joints.saturating_sub(1).max(1);
    PendulumParams {
        lengths: (0..links).map(|_| rng.random_range(0.5..1.5)).collect(),
        amps: (0..links).map(|_| rng.random_range(0.2..0.8)).collect(),
        base: (0..links).map(|_| rng.random_range(-0.5..0.5)).collect(),
        phases: (0..links).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
        freq: rng.random_range(0.3..0.8),
    }
}

/// Joint positions of the chain at time t: joint 0 is the fixed root, each
/// link hangs off the previous joint at angle θ_i(t) = base + amp·sin(2πft+φ).
fn pendulum_point(p: &PendulumParams, joint: usize, t: f64) -> (f64, f64) {
    let (mut x, mut y) = (0.0, 0.0);
    for i in 0..joint.min(p.lengths.len()) {
        let theta = p.base[i]
            + p.amps[i] * (std::f64::consts::TAU * p.freq * t + p.phases[i]).sin();
        x += p.lengths[i] * theta.sin();
        y -= p.lengths[i] * theta.cos();
    }
    (x, y)
}

struct LissajousParams {
    ax: f64,
    ay: f64,
    a: f64,
    b: f64,
    omega: f64,
    delta: f64,
    radius: Vec<f64>,
    limb_omega: Vec<f64>,
    limb_phase: Vec<f64>,
}

fn lissajous_params(rng: &mut ChaCha12Rng, joints: usize) -> LissajousParams {
    LissajousParams {
        ax: rng.random_range(2.0..4.0),
        ay: rng.random_range(2.0..4.0),
        a: rng.random_range(1..=3) as f64,
        b: rng.random_range(1..=3) as f64,
        omega: std::f64::consts::TAU * rng.random_range(0.08..0.2),
        delta: rng.random_range(0.0..std::f64::consts::TAU),
        radius: (0..joints)
            .map(|j| if j == 0 { 0.0 } else { rng.random_range(0.3..0.8) })
            .collect(),
        limb_omega: (0..joints)
            .map(|_| std::f64::consts::TAU * rng.random_range(0.5..1.2))
            .collect(),
        limb_phase: (0..joints).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect(),
    }
}

/// Body center follows a Lissajous curve; limbs circle the center.
fn lissajous_point(p: &LissajousParams, joint: usize, t: f64) -> (f64, f64) {
    let cx = p.ax * (p.a * p.omega * t + p.delta).sin();
    let cy = p.ay * (p.b * p.omega * t).sin();
    let r = p.radius[joint];
    let ang = p.limb_omega[joint] * t + p.limb_phase[joint];
    (cx + r * ang.cos(), cy + r * ang.sin())
}

struct BounceParams {
    x0: f64,
    vx: f64,
    amp: f64,
    period: f64,
    offsets: Vec<(f64, f64)>,
    branch_time: f64,
}

fn bounce_params(rng: &mut ChaCha12Rng, joints: usize, spec: &GeneratorSpec) -> BounceParams {
    let frames = spec.frames();
    let branch_frame = frames / 2;
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    BounceParams {
        x0: rng.random_range(-1.0..1.0),
        vx: sign * rng.random_range(1.0..2.0),
        amp: rng.random_range(1.0..2.0),
        period: rng.random_range(0.8..1.6),
        offsets: (0..joints)
            .map(|j| {
                if j == 0 {
                    (0.0, 0.0)
                } else {
                    let ang = std::f64::consts::TAU * (j as f64) / (joints as f64);
                    let r = rng.random_range(0.2..0.5);
                    (r * ang.cos(), r * ang.sin())
                }
            })
            .collect(),
        branch_time: branch_frame as f64 / spec.fps,
    }
}

/// Bouncing cluster: |sin| height profile, linear horizontal drift that may
/// reverse at the branch time.
fn bounce_point(p: &BounceParams, joint: usize, t: f64, flipped: bool) -> (f64, f64) {
    let x = if t <= p.branch_time || !flipped {
        p.x0 + p.vx * t
    } else {
        p.x0 + p.vx * p.branch_time - p.vx * (t - p.branch_time)
    };
    let y = p.amp * (std::f64::consts::PI * t / p.period).sin().abs();
    let (ox, oy) = p.offsets[joint];
    (x + ox, y + oy)
}

/// Random occlusion windows: each non-root joint may disappear for a
/// contiguous stretch. Joint 0 stays visible so every frame keeps at least
/// one joint.
fn occlude(vis: &mut [Vec<bool>], joints: usize, rng: &mut ChaCha12Rng) {
    let frames = vis.len();
    for j in 1..joints {
        if rng.random_bool(0.25) {
            let len = (frames / 8).max(1) + rng.random_range(0..(frames / 8).max(1));
            let start = rng.random_range(0..frames.saturating_sub(len).max(1));
            for row in vis.iter_mut().skip(start).take(len) {
                row[j] = false;
            }
        }
    }
}

fn assemble(
    id: String,
    spec: &GeneratorSpec,
    rng: &mut ChaCha12Rng,
    point_of: impl Fn(usize, f64) -> (f64, f64),
) -> Result<Trajectory> {
    let frames = spec.frames();
    let j = spec.joints;
    let times: Vec<f64> = (0..frames).map(|i| i as f64 / spec.fps).collect();
    let mut vis = vec![vec![true; j]; frames];
    occlude(&mut vis, j, rng);
    let mut points = Vec::with_capacity(frames);
    for (i, &t) in times.iter().enumerate() {
        let mut row = Vec::with_capacity(2 * j);
        for joint in 0..j {
            let (mut x, mut y) = point_of(joint, t);
            if spec.noise_std > 0.0 {
                x += spec.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
                y += spec.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal);
            }
            if vis[i][joint] {
                row.push(x);
                row.push(y);
            } else {
                row.push(0.0);
                row.push(0.0);
            }
        }
        points.push(row);
    }
    Trajectory::new(id, spec.fps, times, points, vis)
}

/// Deterministic synthetic trajectories. bounce_branch emits consecutive
/// pairs sharing identical pasts (same parameters, same past noise) whose
/// futures branch independently with `flip_prob`.
pub fn generate(spec: &GeneratorSpec, count: usize, seed: u64) -> Result<Vec<Trajectory>> {
    spec.validate()?;
    let mut master = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    match spec.kind {
        GeneratorKind::ArticulatedPendulum => {
            for i in 0..count {
                let mut rng = ChaCha12Rng::seed_from_u64(master.random());
                let p = pendulum_params(&mut rng, spec.joints);
                let id = format!("pend_s{seed}_{i:05}");
                out.push(assemble(id, spec, &mut rng, |j, t| pendulum_point(&p, j, t))?);
            }
        }
        GeneratorKind::LissajousWalker => {
            for i in 0..count {
                let mut rng = ChaCha12Rng::seed_from_u64(master.random());
                let p = lissajous_params(&mut rng, spec.joints);
                let id = format!("liss_s{seed}_{i:05}");
                out.push(assemble(id, spec, &mut rng, |j, t| lissajous_point(&p, j, t))?);
            }
        }
        GeneratorKind::BounceBranch => {
            let pairs = count.div_ceil(2);
            let mut any_divergent = false;
            for pair in 0..pairs {
                let pair_seed: u64 = master.random();
                let mut setup = ChaCha12Rng::seed_from_u64(pair_seed);
                let p = bounce_params(&mut setup, spec.joints, spec);
                let mut flips = [false; 2];
                for (m, flip) in flips.iter_mut().enumerate() {
                    *flip = ChaCha12Rng::seed_from_u64(pair_seed ^ (0xB0 + m as u64))
                        .random_bool(spec.flip_prob);
                }
                let emit = if 2 * pair + 2 <= count { 2 } else { 1 };
                if emit == 2 && flips[0] != flips[1] {
                    any_divergent = true;
                }
                // force one divergent pair if the whole set would otherwise
                // collapse to a single continuation
                if pair + 1 == pairs && !any_divergent && emit == 2 {
                    flips[1] = !flips[0];
                    any_divergent = true;
                }
                for (m, suffix) in ["a", "b"].iter().enumerate().take(emit) {
                    // identical past noise: both members replay the pair rng
                    let mut rng = ChaCha12Rng::seed_from_u64(pair_seed);
                    let _ = bounce_params(&mut rng, spec.joints, spec);
                    let flip = flips[m];
                    let id = format!("bnc_s{seed}_{pair:04}{suffix}");
                    let traj = assemble(id, spec, &mut rng, |j, t| bounce_point(&p, j, t, flip))?;
                    out.push(traj);
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// file format: one JSON object per line, nulls for invisible coordinates
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    fps: f64,
    times: Vec<f64>,
    points: Vec<Vec<Option<f64>>>,
}

pub fn save_trajectories(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for t in trajs {
        let points = t
            .points
            .iter()
            .zip(&t.visibility)
            .map(|(row, vis)| {
                row.chunks(2)
                    .zip(vis)
                    .flat_map(|(xy, &v)| {
                        if v {
                            [Some(xy[0]), Some(xy[1])]
                        } else {
                            [None, None]
                        }
                    })
                    .collect()
            })
            .collect();
        let rec = Record { id: t.id.clone(), fps: t.fps, times: t.times.clone(), points };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_trajectories(path: &Path) -> Result<Vec<Trajectory>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let n = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| TrajError::Data(format!("line {n}: {e}")))?;
        let mut points = Vec::with_capacity(rec.points.len());
        let mut visibility = Vec::with_capacity(rec.points.len());
        for (f, row) in rec.points.iter().enumerate() {
            if row.len() % 2 != 0 {
                return Err(TrajError::Data(format!("line {n}: odd coordinate count at frame {f}")));
            }
            let mut prow = Vec::with_capacity(row.len());
            let mut vrow = Vec::with_capacity(row.len() / 2);
            for (j, xy) in row.chunks(2).enumerate() {
                match (xy[0], xy[1]) {
                    (Some(x), Some(y)) => {
                        prow.push(x);
                        prow.push(y);
                        vrow.push(true);
                    }
                    (None, None) => {
                        prow.push(0.0);
                        prow.push(0.0);
                        vrow.push(false);
                    }
                    _ => {
                        return Err(TrajError::Data(format!(
                            "line {n}: joint {j} has exactly one null coordinate"
                        )));
                    }
                }
            }
            points.push(prow);
            visibility.push(vrow);
        }
        let traj = Trajectory::new(rec.id, rec.fps, rec.times, points, visibility)
            .map_err(|e| TrajError::Data(format!("line {n}: {e}")))?;
        out.push(traj);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

/// Affine map applied per coordinate: x' = scale·x + bx, y' = scale·y + by.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    pub scale: f64,
    pub bx: f64,
    pub by: f64,
}

impl NormalizationRecord {
    pub fn identity() -> Self {
        NormalizationRecord { scale: 1.0, bx: 0.0, by: 0.0 }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.scale * x + self.bx, self.scale * y + self.by)
    }

    pub fn invert(&self, x: f64, y: f64) -> (f64, f64) {
        ((x - self.bx) / self.scale, (y - self.by) / self.scale)
    }
}

/// Isotropic rescale so the bounding square of all visible coordinates is
/// [0,100]²: the longer side spans exactly [0,100], the shorter axis is
/// centered. Zero extent falls back to scale 1 centered at (50,50).
pub fn normalize(traj: &Trajectory) -> Result<(Trajectory, NormalizationRecord)> {
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    let mut seen = false;
    for (row, vis) in traj.points.iter().zip(&traj.visibility) {
        for (j, &v) in vis.iter().enumerate() {
            if v {
                seen = true;
                min_x = min_x.min(row[2 * j]);
                max_x = max_x.max(row[2 * j]);
                min_y = min_y.min(row[2 * j + 1]);
                max_y = max_y.max(row[2 * j + 1]);
            }
        }
    }
    if !seen {
        return Err(TrajError::Data(format!(
            "trajectory {}: no visible joint to normalize",
            traj.id
        )));
    }
    let ext_x = max_x - min_x;
    let ext_y = max_y - min_y;
    let longest = ext_x.max(ext_y);
    let record = if longest == 0.0 {
        NormalizationRecord { scale: 1.0, bx: 50.0 - min_x, by: 50.0 - min_y }
    } else {
        let scale = 100.0 / longest;
        let off = |min: f64, ext: f64| {
            if ext == longest {
                -scale * min
            } else {
                (100.0 - scale * ext) / 2.0 - scale * min
            }
        };
        NormalizationRecord { scale, bx: off(min_x, ext_x), by: off(min_y, ext_y) }
    };
    let points = traj
        .points
        .iter()
        .zip(&traj.visibility)
        .map(|(row, vis)| {
            row.chunks(2)
                .zip(vis)
                .flat_map(|(xy, &v)| {
                    if v {
                        let (x, y) = record.apply(xy[0], xy[1]);
                        [x, y]
                    } else {
                        [0.0, 0.0]
                    }
                })
                .collect()
        })
        .collect();
    let out = Trajectory {
        id: traj.id.clone(),
        fps: traj.fps,
        times: traj.times.clone(),
        points,
        visibility: traj.visibility.clone(),
    };
    Ok((out, record))
}

// ---------------------------------------------------------------------------
// segment sampling
// ---------------------------------------------------------------------------

/// Sparse observation of a specific frame window: keeps ⌈len/3⌉ frames
/// chosen uniformly without replacement, sorted by time.
pub fn segment_from_window(
    traj: &Trajectory,
    start: usize,
    len: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Segment> {
    if len == 0 || start + len > traj.len() {
        return Err(TrajError::Data(format!(
            "segment window [{start}, {}) outside trajectory of {} frames",
            start + len,
            traj.len()
        )));
    }
    let keep = len.div_ceil(3);
    let mut idx: Vec<usize> = rand::seq::index::sample(rng, len, keep).into_vec();
    idx.sort_unstable();
    let times: Vec<f64> = idx.iter().map(|&i| traj.times[start + i]).collect();
    let points: Vec<Vec<f64>> = idx.iter().map(|&i| traj.points[start + i].clone()).collect();
    let vis: Vec<Vec<bool>> = idx.iter().map(|&i| traj.visibility[start + i].clone()).collect();
    let span = (traj.times[start], traj.times[start + len - 1]);
    Segment::new(times, points, vis, Some(traj.id.clone()), span)
}

/// Random window of `span_frames` frames (clipped to the trajectory), then
/// the sparse subset rule.
pub fn sample_segment(
    traj: &Trajectory,
    span_frames: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Segment> {
    if span_frames == 0 || traj.is_empty() {
        return Err(TrajError::Data("sample_segment: empty window or trajectory".into()));
    }
    let len = span_frames.min(traj.len());
    let start = rng.random_range(0..=traj.len() - len);
    segment_from_window(traj, start, len, rng)
}

// ---------------------------------------------------------------------------
// point distance
// ---------------------------------------------------------------------------

/// Mean over jointly visible joints of the per-joint Euclidean distance.
/// Errors when no joint is visible in both rows so callers can skip the term.
pub fn point_distance(pa: &[f64], va: &[bool], pb: &[f64], vb: &[bool]) -> Result<f64> {
    if pa.len() != pb.len() || va.len() != vb.len() || pa.len() != 2 * va.len() {
        return Err(TrajError::Dim("point_distance: shape mismatch".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for j in 0..va.len() {
        if va[j] && vb[j] {
            let dx = pa[2 * j] - pb[2 * j];
            let dy = pa[2 * j + 1] - pb[2 * j + 1];
            sum += (dx * dx + dy * dy).sqrt();
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrajError::Data("point_distance: no jointly visible joint".into()));
    }
    Ok(sum / n as f64)
}

// ---------------------------------------------------------------------------
// dataset split
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic 80/10/10 split of trajectory indices.
pub fn split_indices(n: usize, seed: u64) -> Splits {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    // Fisher–Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let n_val = n / 10;
    let n_test = n / 10;
    let n_train = n - n_val - n_test;
    let val = idx.split_off(n_train + n_val);
    let train_val = idx;
    let (train, val_part) = train_val.split_at(n_train);
    Splits { train: train.to_vec(), val: val_part.to_vec(), test: val }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick_spec(kind: GeneratorKind) -> GeneratorSpec {
        GeneratorSpec {
            kind,
            joints: 5,
            duration: 2.0,
            fps: 25.0,
            noise_std: 0.0,
            flip_prob: 0.5,
        }
    }

    #[test]
    fn test_generate_deterministic() {
        for kind in [
            GeneratorKind::ArticulatedPendulum,
            GeneratorKind::LissajousWalker,
            GeneratorKind::BounceBranch,
        ] {
            let spec = quick_spec(kind);
            let a = generate(&spec, 6, 99).unwrap();
            let b = generate(&spec, 6, 99).unwrap();
            assert_eq!(a, b);
            let c = generate(&spec, 6, 100).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn test_lissajous_matches_closed_form() {
        let spec = quick_spec(GeneratorKind::LissajousWalker);
        let trajs = generate(&spec, 3, 7).unwrap();
        // replay the parameter draws the generator made
        let mut master = ChaCha12Rng::seed_from_u64(7);
        for traj in &trajs {
            let mut rng = ChaCha12Rng::seed_from_u64(master.random());
            let p = lissajous_params(&mut rng, spec.joints);
            for (i, &t) in traj.times.iter().enumerate() {
                for j in 0..spec.joints {
                    if !traj.visibility[i][j] {
                        continue;
                    }
                    let (x, y) = lissajous_point(&p, j, t);
                    assert!((traj.points[i][2 * j] - x).abs() < 1e-9);
                    assert!((traj.points[i][2 * j + 1] - y).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn test_pendulum_periodic() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let p = pendulum_params(&mut rng, 5);
        let period = 1.0 / p.freq;
        for j in 0..5 {
            for &t in &[0.17, 0.9, 1.43] {
                let (x0, y0) = pendulum_point(&p, j, t);
                let (x1, y1) = pendulum_point(&p, j, t + period);
                assert!((x0 - x1).abs() < 1e-9 && (y0 - y1).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn test_bounce_pairs_share_past() {
        let mut spec = quick_spec(GeneratorKind::BounceBranch);
        spec.noise_std = 0.05;
        let trajs = generate(&spec, 10, 5).unwrap();
        let frames = spec.frames();
        let branch = frames / 2;
        for pair in trajs.chunks(2) {
            let (a, b) = (&pair[0], &pair[1]);
            for f in 0..=branch {
                assert_eq!(a.points[f], b.points[f], "past differs at frame {f}");
            }
        }
    }

    #[test]
    fn test_bounce_rejects_degenerate_flip_prob() {
        let mut spec = quick_spec(GeneratorKind::BounceBranch);
        spec.flip_prob = 0.0;
        assert!(matches!(generate(&spec, 4, 1), Err(TrajError::Config(_))));
        spec.flip_prob = 1.0;
        assert!(matches!(generate(&spec, 4, 1), Err(TrajError::Config(_))));
    }

    #[test]
    fn test_roundtrip_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let mut spec = quick_spec(GeneratorKind::ArticulatedPendulum);
        spec.noise_std = 0.1;
        let trajs = generate(&spec, 4, 11).unwrap();
        save_trajectories(&path, &trajs).unwrap();
        let loaded = load_trajectories(&path).unwrap();
        assert_eq!(trajs, loaded);
    }

    #[test]
    fn test_load_null_joint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        std::fs::write(
            &path,
            r#"{"id":"x","fps":10.0,"times":[0.0,0.1],"points":[[1.0,2.0,null,null],[3.0,4.0,5.0,6.0]]}"#,
        )
        .unwrap();
        let t = &load_trajectories(&path).unwrap()[0];
        assert!(!t.visibility[0][1]);
        assert_eq!(&t.points[0][2..4], &[0.0, 0.0]);
        assert!(t.visibility[1][1]);
    }

    #[test]
    fn test_load_rejects_bad_records_with_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        // line 2: non-monotone times
        std::fs::write(
            &path,
            concat!(
                r#"{"id":"a","fps":10.0,"times":[0.0,0.1],"points":[[1.0,2.0],[3.0,4.0]]}"#,
                "\n",
                r#"{"id":"b","fps":10.0,"times":[0.1,0.1],"points":[[1.0,2.0],[3.0,4.0]]}"#,
            ),
        )
        .unwrap();
        let err = load_trajectories(&path).unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        assert!(err.contains("strictly increasing"), "{err}");
        // half-null joint
        std::fs::write(
            &path,
            r#"{"id":"c","fps":10.0,"times":[0.0],"points":[[1.0,null]]}"#,
        )
        .unwrap();
        let err = load_trajectories(&path).unwrap_err().to_string();
        assert!(err.contains("line 1") && err.contains("one null"), "{err}");
        // malformed json
        std::fs::write(&path, "{not json}").unwrap();
        let err = load_trajectories(&path).unwrap_err().to_string();
        assert!(err.contains("line 1"), "{err}");
    }

    #[test]
    fn test_normalize_isotropic_rule() {
        // x in [0,4], y in [0,2] -> x spans [0,100], y spans [25,75]
        let t = Trajectory::new(
            "n".into(),
            10.0,
            vec![0.0, 0.1],
            vec![vec![0.0, 0.0], vec![4.0, 2.0]],
            vec![vec![true], vec![true]],
        )
        .unwrap();
        let (nt, rec) = normalize(&t).unwrap();
        assert_eq!(rec.scale, 25.0);
        assert_eq!(nt.points[0], vec![0.0, 25.0]);
        assert_eq!(nt.points[1], vec![100.0, 75.0]);
    }

    #[test]
    fn test_normalize_identity_when_already_fitted() {
        let t = Trajectory::new(
            "n".into(),
            10.0,
            vec![0.0, 0.1],
            vec![vec![0.0, 0.0], vec![100.0, 100.0]],
            vec![vec![true], vec![true]],
        )
        .unwrap();
        let (_, rec) = normalize(&t).unwrap();
        assert_eq!(rec, NormalizationRecord::identity());
    }

    #[test]
    fn test_normalize_static_point_centered() {
        let t = Trajectory::new(
            "n".into(),
            10.0,
            vec![0.0, 0.1],
            vec![vec![7.0, -3.0], vec![7.0, -3.0]],
            vec![vec![true], vec![true]],
        )
        .unwrap();
        let (nt, rec) = normalize(&t).unwrap();
        assert_eq!(rec.scale, 1.0);
        assert_eq!(nt.points[0], vec![50.0, 50.0]);
    }

    #[test]
    fn test_normalize_invert_roundtrip() {
        let spec = quick_spec(GeneratorKind::LissajousWalker);
        let trajs = generate(&spec, 3, 21).unwrap();
        for t in &trajs {
            let (nt, rec) = normalize(t).unwrap();
            for (i, row) in nt.points.iter().enumerate() {
                for (j, &v) in nt.visibility[i].iter().enumerate() {
                    if v {
                        let (x, y) = rec.invert(row[2 * j], row[2 * j + 1]);
                        assert!((x - t.points[i][2 * j]).abs() < 1e-9);
                        assert!((y - t.points[i][2 * j + 1]).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn test_segment_subset_rule() {
        let spec = quick_spec(GeneratorKind::ArticulatedPendulum);
        let traj = &generate(&spec, 1, 2).unwrap()[0];
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        // window 30 -> 10 points, window 3 -> 1 point
        let s = segment_from_window(traj, 5, 30, &mut rng).unwrap();
        assert_eq!(s.count(), 10);
        assert!(s.times.windows(2).all(|w| w[1] > w[0]));
        assert!(s.times.iter().all(|t| traj.times.contains(t)));
        let s1 = segment_from_window(traj, 0, 3, &mut rng).unwrap();
        assert_eq!(s1.count(), 1);
        // out-of-range window
        assert!(segment_from_window(traj, 40, 30, &mut rng).is_err());
    }

    #[test]
    fn test_sample_segment_inside_trajectory() {
        let spec = quick_spec(GeneratorKind::LissajousWalker);
        let traj = &generate(&spec, 1, 4).unwrap()[0];
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..20 {
            let s = sample_segment(traj, 30, &mut rng).unwrap();
            assert_eq!(s.count(), 10);
            assert!(s.span.0 >= traj.times[0] && s.span.1 <= *traj.times.last().unwrap());
            assert!(s.times.iter().all(|&t| t >= s.span.0 && t <= s.span.1));
        }
    }

    #[test]
    fn test_point_distance_examples() {
        // A=(0,0),(1,0); B=(3,4),(1,0): (5+0)/2
        let pa = [0.0, 0.0, 1.0, 0.0];
        let pb = [3.0, 4.0, 1.0, 0.0];
        let all = [true, true];
        assert_eq!(point_distance(&pa, &all, &pb, &all).unwrap(), 2.5);
        // joint 2 invisible in B -> 5.0
        let vb = [true, false];
        assert_eq!(point_distance(&pa, &all, &pb, &vb).unwrap(), 5.0);
        // identical -> 0
        assert_eq!(point_distance(&pa, &all, &pa, &all).unwrap(), 0.0);
        // disjoint masks -> error
        let va = [false, true];
        let vb = [true, false];
        assert!(point_distance(&pa, &va, &pb, &vb).is_err());
    }

    #[test]
    fn test_split_indices_disjoint_80_10_10() {
        let s = split_indices(200, 13);
        assert_eq!(s.train.len(), 160);
        assert_eq!(s.val.len(), 20);
        assert_eq!(s.test.len(), 20);
        let mut all: Vec<usize> =
            s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..200).collect::<Vec<_>>());
    }
}
