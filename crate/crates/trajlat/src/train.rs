//! Joint optimization of the triplet and reconstruction losses: batch
//! assembly, AdamW with a warmup-cosine schedule, gradient clipping, and
//! directory checkpoints.
//!
//! A step is two passes. Pass one draws each slot's windows and latent noise
//! and produces plain first encodings (which become detached `O` negatives
//! for the other slots). Pass two builds one differentiable graph per slot —
//! first encodings, reparameterized reconstruction samples, re-encoded roles,
//! triplet hinges — and backpropagates. Slot gradients are reduced in slot
//! order, so a step is bit-deterministic regardless of thread scheduling.

use std::fs;
use std::path::Path;

use diffcore::{Graph, NodeId, Tensor};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Segment, Trajectory};
use crate::error::TrajError;
use crate::latent::{
    g_box_conditional, g_box_symmetric_distance, g_dist_intersect, g_dist_sample,
    g_gaussian_symmetric_kl, BoxNodes, DistNodes, Distribution, Family, GaussianNodes,
    SymmetricBoxDistance,
};
use crate::model::{BoundParams, TrajModel};
use crate::pairs::{
    sample_role_segments, sample_triplets, step_instances, Mode, Provenance, Role, RoleInstance,
    RoleSegments, Triplet, ALL_ROLES, MIN_HALF_FRAMES,
};
use crate::Result;

// ---------------------------------------------------------------------------
// configuration
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Triplet distance mode. Conditional requires box embeddings.
    pub mode: Mode,
    /// Triplet margin α.
    pub margin: f64,
    /// Latent samples per distribution: reconstruction draws and re-encoding
    /// draws per role.
    pub samples: usize,
    pub w_enc: f64,
    pub w_dec: f64,
    /// When false, the instance set is only P, F, C, I plus batch peers.
    pub re_encoding_enabled: bool,
    pub triplets_per_anchor: usize,
    /// Hard pools are preferred with probability ratio/(ratio+1).
    pub hard_ratio: f64,
    /// Multiplier on a hinge term per soft side of its triplet. 1.0 keeps the
    /// plain sum; emphasis on hard pairs is normally carried by oversampling.
    pub soft_pair_weight: f64,
    /// Distance kind used by symmetric mode with box embeddings.
    pub box_distance: SymmetricBoxDistance,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            mode: Mode::Conditional,
            margin: 1.0,
            samples: 3,
            w_enc: 1.0,
            w_dec: 1.0,
            re_encoding_enabled: true,
            triplets_per_anchor: 4,
            hard_ratio: 3.0,
            soft_pair_weight: 1.0,
            box_distance: SymmetricBoxDistance::SymmetricConditional,
        }
    }
}

impl LossConfig {
    pub fn validate(&self, family: Family) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(TrajError::Config("loss: margin must be positive".into()));
        }
        if self.w_enc < 0.0 || self.w_dec < 0.0 {
            return Err(TrajError::Config("loss: weights must be non-negative".into()));
        }
        if self.samples == 0 || self.triplets_per_anchor == 0 {
            return Err(TrajError::Config(
                "loss: samples and triplets_per_anchor must be positive".into(),
            ));
        }
        if !(self.hard_ratio >= 0.0 && self.hard_ratio.is_finite()) {
            return Err(TrajError::Config("loss: hard_ratio must be finite and ≥ 0".into()));
        }
        if self.soft_pair_weight < 0.0 {
            return Err(TrajError::Config("loss: soft_pair_weight must be ≥ 0".into()));
        }
        if self.mode == Mode::Conditional && family == Family::Gaussian {
            return Err(TrajError::Config(
                "conditional distances are only defined for box embeddings; \
                 use symmetric mode with the gaussian family"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    /// Linear warmup 0 → lr_max over steps [0, warmup).
    pub warmup: u64,
    /// Cosine period after warmup; the schedule restarts every period.
    pub period: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to matrix weights only (names ending ".w").
    pub weight_decay: f64,
    /// Global gradient-norm ceiling.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr_min: 1e-6,
            lr_max: 1e-4,
            warmup: 1000,
            period: 4000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
            clip_norm: 0.01,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_min > 0.0 && self.lr_max >= self.lr_min) {
            return Err(TrajError::Config("optim: need 0 < lr_min ≤ lr_max".into()));
        }
        if self.warmup == 0 || self.period == 0 {
            return Err(TrajError::Config("optim: warmup and period must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(TrajError::Config("optim: betas must lie in [0, 1)".into()));
        }
        if !(self.eps > 0.0) || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(TrajError::Config("optim: eps/clip_norm positive, decay ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Trajectories per step.
    pub batch: usize,
    /// Frames covered by the combined past+future window.
    pub window_frames: usize,
    /// Total optimizer steps of the run.
    pub steps: u64,
    /// Checkpoint interval in steps.
    pub checkpoint_every: u64,
    pub loss: LossConfig,
    pub optim: OptimConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch: 64,
            window_frames: 30,
            steps: 20_000,
            checkpoint_every: 2_000,
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, family: Family) -> Result<()> {
        if self.batch == 0 {
            return Err(TrajError::Config("train: batch must be positive".into()));
        }
        if self.steps == 0 || self.checkpoint_every == 0 {
            return Err(TrajError::Config(
                "train: steps and checkpoint_every must be positive".into(),
            ));
        }
        if self.window_frames < 2 * MIN_HALF_FRAMES {
            return Err(TrajError::Config(format!(
                "train: window_frames must be ≥ {}",
                2 * MIN_HALF_FRAMES
            )));
        }
        self.loss.validate(family)?;
        self.optim.validate()
    }
}

// ---------------------------------------------------------------------------
// schedule and optimizer
// ---------------------------------------------------------------------------

/// Warmup-cosine learning rate: linear 0 → lr_max over [0, warmup), then a
/// periodic cosine between the bounds, restarting every period.
pub fn lr_at(step: u64, o: &OptimConfig) -> f64 {
    if step < o.warmup {
        o.lr_max * step as f64 / o.warmup as f64
    } else {
        let t = (step - o.warmup) as f64 / o.period as f64;
        o.lr_min + (o.lr_max - o.lr_min) * (1.0 + (std::f64::consts::TAU * t).cos()) / 2.0
    }
}

/// AdamW moment buffers, flat over the registration order of the parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamW {
    pub fn new(n_values: usize) -> Self {
        AdamW { m: vec![0.0; n_values], v: vec![0.0; n_values], t: 0 }
    }
}

/// Decoupled weight decay applies to matrix weights only; biases, layer-norm
/// gains, and the learned summary token are exempt.
pub fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

fn adamw_update(
    model: &mut TrajModel,
    opt: &mut AdamW,
    grad: &[f64],
    lr: f64,
    o: &OptimConfig,
) -> Result<()> {
    if grad.len() != opt.m.len() {
        return Err(TrajError::Dim(format!(
            "adamw: gradient size {} vs moments {}",
            grad.len(),
            opt.m.len()
        )));
    }
    opt.t += 1;
    let bc1 = 1.0 - o.beta1.powi(opt.t as i32);
    let bc2 = 1.0 - o.beta2.powi(opt.t as i32);
    let mut off = 0;
    for prm in model.params.params_mut() {
        let decay = decays(&prm.name);
        for (x, (&g, (m, v))) in prm
            .data
            .iter_mut()
            .zip(grad[off..].iter().zip(opt.m[off..].iter_mut().zip(opt.v[off..].iter_mut())))
        {
            *m = o.beta1 * *m + (1.0 - o.beta1) * g;
            *v = o.beta2 * *v + (1.0 - o.beta2) * g * g;
            let mut upd = (*m / bc1) / ((*v / bc2).sqrt() + o.eps);
            if decay {
                upd += o.weight_decay * *x;
            }
            *x -= lr * upd;
        }
        off += prm.data.len();
    }
    Ok(())
}

/// Scale `grad` in place so its global L2 norm is at most `clip`; returns the
/// post-clip norm.
pub fn clip_global_norm(grad: &mut [f64], clip: f64) -> f64 {
    let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > clip {
        let s = clip / norm;
        for v in grad.iter_mut() {
            *v *= s;
        }
        clip
    } else {
        norm
    }
}

// ---------------------------------------------------------------------------
// deterministic stream seeding
// ---------------------------------------------------------------------------

const STREAM_BATCH: u64 = 0;
const STREAM_SLOT: u64 = 1;
const STREAM_TRIPLET: u64 = 2;

/// Independent RNG per (seed, step, stream, slot), so resuming at any step
/// reproduces the unbroken run exactly.
pub fn stream_rng(master_seed: u64, step: u64, stream: u64, slot: u64) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(master_seed.to_le_bytes());
    h.update(step.to_le_bytes());
    h.update(stream.to_le_bytes());
    h.update(slot.to_le_bytes());
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&h.finalize());
    ChaCha12Rng::from_seed(seed)
}

// ---------------------------------------------------------------------------
// per-slot batch assembly
// ---------------------------------------------------------------------------

/// Pass-one product for one slot: windows, latent noise for the four sources,
/// and plain first encodings (the slot's contribution to peers' O pools).
#[derive(Clone, Debug)]
pub struct SlotSample {
    pub segs: RoleSegments,
    /// noise[source][draw], sources ordered P, F, C, I.
    pub noise: Vec<Vec<Vec<f64>>>,
    /// Plain encodings of past, future, comb.
    pub firsts: Vec<Distribution>,
}

pub fn draw_slot_sample(
    model: &TrajModel,
    traj: &Trajectory,
    window_frames: usize,
    samples: usize,
    rng: &mut ChaCha12Rng,
) -> Result<SlotSample> {
    let segs = sample_role_segments(traj, window_frames, rng)?;
    let n = model.enc.latent;
    let noise = (0..4)
        .map(|_| {
            (0..samples).map(|_| Distribution::draw_noise(model.family, n, rng)).collect()
        })
        .collect();
    let firsts = model.encode_many(&[&segs.past, &segs.future, &segs.comb])?;
    Ok(SlotSample { segs, noise, firsts })
}

/// Everything non-differentiable a slot's graph build needs, precomputed:
/// re-encoded segments (decoded from detached latent draws), peer encodings,
/// the instance list, and the sampled triplets.
#[derive(Clone, Debug)]
pub struct SlotPlan {
    pub segs: RoleSegments,
    pub noise: Vec<Vec<Vec<f64>>>,
    pub re_segments: Vec<Segment>,
    pub o_dists: Vec<Distribution>,
    pub instances: Vec<RoleInstance>,
    pub triplets: Vec<Triplet>,
}

/// Assemble one slot's plan from pass-one samples. The latent draws behind
/// the re-encoded segments use the same noise as the reconstruction samples,
/// so each re-encoded role asserts the content of a trajectory the decoder is
/// simultaneously trained to produce; gradients flow through the re-encoding
/// only.
pub fn plan_slot(
    model: &TrajModel,
    loss: &LossConfig,
    slots: &[SlotSample],
    slot: usize,
    rng: &mut ChaCha12Rng,
) -> Result<SlotPlan> {
    let me = &slots[slot];
    let draws = if loss.re_encoding_enabled { loss.samples } else { 0 };

    let mut re_segments = Vec::new();
    if draws > 0 {
        let i_plain = me.firsts[0].intersect(&me.firsts[1])?;
        let sources = [&me.firsts[0], &me.firsts[1], &me.firsts[2], &i_plain];
        let mut z = Vec::with_capacity(4);
        for (s, d) in sources.iter().enumerate() {
            let per: Vec<Vec<f64>> =
                (0..draws).map(|k| d.sample_with(&me.noise[s][k])).collect::<Result<_>>()?;
            z.push(per);
        }
        let time_seg = |r: Role| -> &Segment {
            match r {
                Role::P => &me.segs.past,
                Role::F => &me.segs.future,
                _ => &me.segs.comb,
            }
        };
        let mut jobs: Vec<(&[f64], &[f64])> = Vec::new();
        let mut times_src: Vec<Role> = Vec::new();
        for role in ALL_ROLES {
            if let Provenance::ReEncoding { source, times } = role.provenance() {
                for k in 0..draws {
                    jobs.push((&z[source as usize][k], &time_seg(times).times));
                    times_src.push(times);
                }
            }
        }
        let decoded = model.decode_many(&jobs)?;
        let parent = me.segs.past.parent_id.clone();
        for (times, points) in times_src.iter().zip(decoded) {
            let src = time_seg(*times);
            let vis = vec![vec![true; model.k / 2]; points.len()];
            re_segments.push(Segment::new(
                src.times.clone(),
                points,
                vis,
                parent.clone(),
                src.span,
            )?);
        }
    }

    let mut o_dists = Vec::with_capacity(slots.len().saturating_sub(1));
    for (peer, s) in slots.iter().enumerate() {
        if peer == slot {
            continue;
        }
        o_dists.push(s.firsts[rng.random_range(0..3)].clone());
    }

    let instances = step_instances(draws, o_dists.len());
    let triplets =
        sample_triplets(&instances, loss.mode, loss.triplets_per_anchor, loss.hard_ratio, rng);
    Ok(SlotPlan {
        segs: me.segs.clone(),
        noise: me.noise.clone(),
        re_segments,
        o_dists,
        instances,
        triplets,
    })
}

// ---------------------------------------------------------------------------
// differentiable slot graph
// ---------------------------------------------------------------------------

/// Triplet distance in the orientation the label was assigned: the anchor is
/// the first argument, so conditional mode uses D = 1 − P(anchor | other).
fn g_pair_distance(
    g: &mut Graph,
    a: &DistNodes,
    b: &DistNodes,
    mode: Mode,
    box_kind: SymmetricBoxDistance,
) -> Result<NodeId> {
    match (a, b) {
        (DistNodes::Box(x), DistNodes::Box(y)) => match mode {
            Mode::Conditional => {
                let p = g_box_conditional(g, x, y)?;
                let n = g.mul_scalar(p, -1.0)?;
                Ok(g.add_scalar(n, 1.0)?)
            }
            Mode::Symmetric => g_box_symmetric_distance(g, x, y, box_kind),
        },
        (DistNodes::Gaussian(x), DistNodes::Gaussian(y)) => match mode {
            Mode::Symmetric => g_gaussian_symmetric_kl(g, x, y),
            Mode::Conditional => Err(TrajError::Config(
                "conditional distances are only defined for box embeddings".into(),
            )),
        },
        _ => Err(TrajError::Dim("pair distance: mixed families".into())),
    }
}

fn g_hinge(g: &mut Graph, d_pos: NodeId, d_neg: NodeId, margin: f64) -> Result<NodeId> {
    let diff = g.sub(d_pos, d_neg)?;
    let arg = g.add_scalar(diff, margin)?;
    Ok(g.relu(arg)?)
}

/// Sum over a segment's points of the masked mean per-joint distance between
/// decoded rows and the observed points. Points with no visible joint
/// contribute nothing.
fn g_segment_delta_sum(g: &mut Graph, rows: NodeId, seg: &Segment) -> Result<NodeId> {
    let (m, k, j) = (seg.count(), seg.k(), seg.joints());
    let mut flat = Vec::with_capacity(m * k);
    for row in &seg.points {
        flat.extend_from_slice(row);
    }
    let target = g.constant(Tensor::matrix(m, k, flat)?)?;

    // (K, J) indicator summing each joint's coordinate pair
    let mut pm = vec![0.0; k * j];
    for jj in 0..j {
        pm[(2 * jj) * j + jj] = 1.0;
        pm[(2 * jj + 1) * j + jj] = 1.0;
    }
    let pair = g.constant(Tensor::matrix(k, j, pm)?)?;

    // per-row visibility weights: 1/|visible| on visible joints, else 0
    let mut wts = vec![0.0; m * j];
    for (t, vis) in seg.visibility.iter().enumerate() {
        let nv = vis.iter().filter(|&&v| v).count();
        if nv == 0 {
            continue;
        }
        for (jj, &v) in vis.iter().enumerate() {
            if v {
                wts[t * j + jj] = 1.0 / nv as f64;
            }
        }
    }
    let w = g.constant(Tensor::matrix(m, j, wts)?)?;

    let d = g.sub(rows, target)?;
    let s = g.square(d)?;
    let per_joint = g.matmul(s, pair)?;
    let eps = g.add_scalar(per_joint, 1e-12)?;
    let dist = g.sqrt(eps)?;
    let weighted = g.mul(dist, w)?;
    Ok(g.sum_all(weighted)?)
}

fn const_dist_nodes(g: &mut Graph, d: &Distribution) -> Result<DistNodes> {
    Ok(match d {
        Distribution::Gaussian(p) => DistNodes::Gaussian(GaussianNodes {
            mu: g.constant(Tensor::vector(p.mu().to_vec()))?,
            sigma: g.constant(Tensor::vector(p.sigma().to_vec()))?,
        }),
        Distribution::Box(b) => DistNodes::Box(BoxNodes {
            z_min: g.constant(Tensor::vector(b.z_min().to_vec()))?,
            z_max: g.constant(Tensor::vector(b.z_max().to_vec()))?,
            beta: b.beta(),
        }),
    })
}

pub struct SlotLossNodes {
    pub loss: NodeId,
    /// Σ of hinge terms over the slot's triplets.
    pub enc_sum: NodeId,
    /// Σ over the slot's three observed segments of the per-segment point
    /// sums, averaged over the latent samples (not yet divided by the batch
    /// segment count).
    pub dec_sum: NodeId,
}

/// Build one slot's differentiable loss. `dec_scale` folds the global
/// mean-over-segments normalization into the slot term, so the batch loss is
/// the plain sum of slot losses.
pub fn build_slot_loss(
    g: &mut Graph,
    p: &BoundParams,
    model: &TrajModel,
    loss: &LossConfig,
    plan: &SlotPlan,
    dec_scale: f64,
) -> Result<SlotLossNodes> {
    let segs3 = [&plan.segs.past, &plan.segs.future, &plan.segs.comb];
    let firsts = model.encode_batch(g, p, &segs3)?;
    let i_nodes = g_dist_intersect(g, &firsts[0], &firsts[1])?;

    // reconstruction: decode each source's reparameterized samples at the
    // observed times
    let inv = 1.0 / loss.samples as f64;
    let mut dec_acc: Option<NodeId> = None;
    for (si, seg) in segs3.iter().enumerate() {
        for d in 0..loss.samples {
            let z = g_dist_sample(g, &firsts[si], &plan.noise[si][d])?;
            let rows = model.decode_rows(g, p, z, &seg.times)?;
            let term = g_segment_delta_sum(g, rows, seg)?;
            dec_acc = Some(match dec_acc {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
    }
    let dec_sum = g.mul_scalar(dec_acc.expect("samples ≥ 1"), inv)?;

    let mut dist_nodes = vec![firsts[0], firsts[1], firsts[2], i_nodes];
    if !plan.re_segments.is_empty() {
        let refs: Vec<&Segment> = plan.re_segments.iter().collect();
        dist_nodes.extend(model.encode_batch(g, p, &refs)?);
    }
    for od in &plan.o_dists {
        dist_nodes.push(const_dist_nodes(g, od)?);
    }
    if dist_nodes.len() != plan.instances.len() {
        return Err(TrajError::Dim(format!(
            "slot build: {} distributions vs {} instances",
            dist_nodes.len(),
            plan.instances.len()
        )));
    }

    let describe = |i: usize| -> String {
        let inst = &plan.instances[i];
        match inst.draw {
            Some(d) => format!("{}#{d}", inst.role.name()),
            None => inst.role.name().to_string(),
        }
    };
    let mut enc_acc: Option<NodeId> = None;
    for t in &plan.triplets {
        let term = (|| -> Result<NodeId> {
            let dp = g_pair_distance(
                g,
                &dist_nodes[t.anchor],
                &dist_nodes[t.positive],
                loss.mode,
                loss.box_distance,
            )?;
            let dn = g_pair_distance(
                g,
                &dist_nodes[t.anchor],
                &dist_nodes[t.negative],
                loss.mode,
                loss.box_distance,
            )?;
            let hinge = g_hinge(g, dp, dn, loss.margin)?;
            let soft_sides = !t.hard_positive as usize + !t.hard_negative as usize;
            let w = loss.soft_pair_weight.powi(soft_sides as i32);
            if (w - 1.0).abs() > 0.0 {
                Ok(g.mul_scalar(hinge, w)?)
            } else {
                Ok(hinge)
            }
        })()
        .map_err(|e| {
            TrajError::Data(format!(
                "triplet (anchor {}, positive {}, negative {}): {e}",
                describe(t.anchor),
                describe(t.positive),
                describe(t.negative)
            ))
        })?;
        enc_acc = Some(match enc_acc {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let enc_sum = match enc_acc {
        Some(n) => n,
        None => g.scalar(0.0)?,
    };

    let enc_w = g.mul_scalar(enc_sum, loss.w_enc)?;
    let dec_w = g.mul_scalar(dec_sum, loss.w_dec * dec_scale)?;
    let total = g.add(enc_w, dec_w)?;
    Ok(SlotLossNodes { loss: total, enc_sum, dec_sum })
}

// ---------------------------------------------------------------------------
// the step
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: TrajModel,
    pub opt: AdamW,
    pub step: u64,
    pub master_seed: u64,
    pub config_hash: String,
}

impl TrainState {
    pub fn new(model: TrajModel, master_seed: u64, config_hash: impl Into<String>) -> Self {
        let n = model.params.n_values();
        TrainState { model, opt: AdamW::new(n), step: 0, master_seed, config_hash: config_hash.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub loss_enc: f64,
    pub loss_dec: f64,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,loss_enc,loss_dec,grad_norm,lr,wallclock";

impl StepMetrics {
    pub fn csv_row(&self, wallclock: f64) -> String {
        format!(
            "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.3}",
            self.step, self.loss_enc, self.loss_dec, self.grad_norm, self.lr, wallclock
        )
    }
}

struct SlotOut {
    enc_sum: f64,
    dec_sum: f64,
    grads: Vec<f64>,
}

fn slot_pass(
    model: &TrajModel,
    cfg: &TrainConfig,
    slots: &[SlotSample],
    slot: usize,
    master_seed: u64,
    step: u64,
    dec_scale: f64,
) -> Result<SlotOut> {
    let mut rng = stream_rng(master_seed, step, STREAM_TRIPLET, slot as u64);
    let plan = plan_slot(model, &cfg.loss, slots, slot, &mut rng)?;
    let mut g = Graph::new();
    let p = model.bind(&mut g)?;
    let nodes = build_slot_loss(&mut g, &p, model, &cfg.loss, &plan, dec_scale)?;
    let grads = g.backward(nodes.loss)?;
    let mut flat = Vec::with_capacity(model.params.n_values());
    for (prm, &id) in model.params.params().iter().zip(p.ids()) {
        match grads.wrt(id) {
            Some(t) => flat.extend_from_slice(t.data()),
            None => flat.extend(std::iter::repeat(0.0).take(prm.data.len())),
        }
    }
    Ok(SlotOut {
        enc_sum: g.value(nodes.enc_sum).item()?,
        dec_sum: g.value(nodes.dec_sum).item()?,
        grads: flat,
    })
}

/// One optimization step on w_enc·L_enc + w_dec·L_dec over a freshly sampled
/// batch. Deterministic given (master_seed, step): batch choice, windows,
/// noise and triplets all come from keyed streams.
pub fn train_step(
    state: &mut TrainState,
    data: &[Trajectory],
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    cfg.validate(state.model.family)?;
    if data.len() < cfg.batch {
        return Err(TrajError::Data(format!(
            "train: batch {} exceeds dataset size {}",
            cfg.batch,
            data.len()
        )));
    }
    let step = state.step;
    let seed = state.master_seed;
    let model = &state.model;

    let mut brng = stream_rng(seed, step, STREAM_BATCH, 0);
    let idx = rand::seq::index::sample(&mut brng, data.len(), cfg.batch).into_vec();

    let slots: Vec<SlotSample> = idx
        .par_iter()
        .enumerate()
        .map(|(slot, &ti)| {
            let mut rng = stream_rng(seed, step, STREAM_SLOT, slot as u64);
            draw_slot_sample(model, &data[ti], cfg.window_frames, cfg.loss.samples, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;

    let dec_scale = 1.0 / (3 * cfg.batch) as f64;
    let outs: Vec<SlotOut> = (0..cfg.batch)
        .into_par_iter()
        .map(|slot| slot_pass(model, cfg, &slots, slot, seed, step, dec_scale))
        .collect::<Result<Vec<_>>>()?;

    let mut grad = vec![0.0; model.params.n_values()];
    let mut loss_enc = 0.0;
    let mut loss_dec = 0.0;
    for o in &outs {
        for (a, &b) in grad.iter_mut().zip(&o.grads) {
            *a += b;
        }
        loss_enc += o.enc_sum;
        loss_dec += o.dec_sum * dec_scale;
    }

    let grad_norm = clip_global_norm(&mut grad, cfg.optim.clip_norm);
    let lr = lr_at(step, &cfg.optim);
    adamw_update(&mut state.model, &mut state.opt, &grad, lr, &cfg.optim)?;
    state.step += 1;

    Ok(StepMetrics { step, loss_enc, loss_dec, grad_norm, lr })
}

/// Drive `train_step` until `state.step` reaches `total_steps`, invoking the
/// callback after each update (checkpointing, metrics, progress).
pub fn run(
    state: &mut TrainState,
    data: &[Trajectory],
    cfg: &TrainConfig,
    total_steps: u64,
    mut on_step: impl FnMut(&TrainState, &StepMetrics) -> Result<()>,
) -> Result<()> {
    while state.step < total_steps {
        let m = train_step(state, data, cfg)?;
        on_step(state, &m)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// checkpointing
// ---------------------------------------------------------------------------

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into tensors.bin, counted in f64 values.
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    config_hash: String,
    step: u64,
    master_seed: u64,
    adam_t: u64,
    /// SHA-256 of tensors.bin, lowercase hex.
    checksum: String,
    tensors: Vec<TensorEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Write `dir/manifest.json` + `dir/tensors.bin`: parameters in registration
/// order, then the optimizer moments, as little-endian f64.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut blob: Vec<f64> = Vec::with_capacity(state.model.params.n_values() * 3);
    let mut push = |name: String, shape: Vec<usize>, data: &[f64], blob: &mut Vec<f64>| {
        entries.push(TensorEntry { name, shape, offset: blob.len(), len: data.len() });
        blob.extend_from_slice(data);
    };
    for prm in state.model.params.params() {
        push(prm.name.clone(), prm.shape.clone(), &prm.data, &mut blob);
    }
    push("opt.m".into(), vec![state.opt.m.len()], &state.opt.m, &mut blob);
    push("opt.v".into(), vec![state.opt.v.len()], &state.opt.v, &mut blob);

    let mut bytes = Vec::with_capacity(blob.len() * 8);
    for v in &blob {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        config_hash: state.config_hash.clone(),
        step: state.step,
        master_seed: state.master_seed,
        adam_t: state.opt.t,
        checksum: sha256_hex(&bytes),
        tensors: entries,
    };
    fs::write(dir.join("tensors.bin"), &bytes)?;
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Fully validated checkpoint contents; nothing is mutated until a load has
/// passed the version and checksum checks.
pub struct CheckpointData {
    pub config_hash: String,
    pub step: u64,
    pub master_seed: u64,
    pub adam_t: u64,
    tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub fn load_checkpoint(dir: &Path) -> Result<CheckpointData> {
    let manifest: Manifest =
        serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(TrajError::Checkpoint(format!(
            "version mismatch: archive {} vs supported {}",
            manifest.version, CHECKPOINT_VERSION
        )));
    }
    let bytes = fs::read(dir.join("tensors.bin"))?;
    let actual = sha256_hex(&bytes);
    if actual != manifest.checksum {
        return Err(TrajError::Checkpoint(format!(
            "checksum mismatch for tensors.bin: manifest {} vs actual {actual}",
            manifest.checksum
        )));
    }
    let total = bytes.len() / 8;
    if bytes.len() % 8 != 0 {
        return Err(TrajError::Checkpoint("tensors.bin length not a multiple of 8".into()));
    }
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        let end = e.offset.checked_add(e.len).filter(|&end| end <= total);
        let Some(end) = end else {
            return Err(TrajError::Checkpoint(format!(
                "tensor {} exceeds archive bounds",
                e.name
            )));
        };
        if e.shape.iter().product::<usize>() != e.len {
            return Err(TrajError::Checkpoint(format!("tensor {} shape/len disagree", e.name)));
        }
        let data: Vec<f64> = bytes[e.offset * 8..end * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        tensors.push((e.name.clone(), e.shape.clone(), data));
    }
    Ok(CheckpointData {
        config_hash: manifest.config_hash,
        step: manifest.step,
        master_seed: manifest.master_seed,
        adam_t: manifest.adam_t,
        tensors,
    })
}

impl TrainState {
    /// Rebuild a state from a loaded checkpoint onto a freshly constructed
    /// model of the same architecture. Names and shapes must match the
    /// model's registry exactly. When `expected_hash` is given, a differing
    /// archive hash is a checkpoint error (resuming under a changed config).
    pub fn restore(
        mut model: TrajModel,
        data: CheckpointData,
        expected_hash: Option<&str>,
    ) -> Result<TrainState> {
        if let Some(h) = expected_hash {
            if data.config_hash != h {
                return Err(TrajError::Checkpoint(format!(
                    "config hash mismatch: archive {} vs current {h}",
                    data.config_hash
                )));
            }
        }
        let mut by_name: std::collections::HashMap<&str, (&[usize], &[f64])> = data
            .tensors
            .iter()
            .map(|(n, s, d)| (n.as_str(), (s.as_slice(), d.as_slice())))
            .collect();
        if by_name.len() != data.tensors.len() {
            return Err(TrajError::Checkpoint("duplicate tensor name in archive".into()));
        }
        for prm in model.params.params_mut() {
            let Some((shape, vals)) = by_name.remove(prm.name.as_str()) else {
                return Err(TrajError::Checkpoint(format!("missing tensor {}", prm.name)));
            };
            if shape != prm.shape.as_slice() {
                return Err(TrajError::Checkpoint(format!(
                    "tensor {} shape {:?} vs model {:?}",
                    prm.name, shape, prm.shape
                )));
            }
            prm.data.copy_from_slice(vals);
        }
        let n = model.params.n_values();
        let mut take_moment = |name: &str| -> Result<Vec<f64>> {
            let Some((_, vals)) = by_name.remove(name) else {
                return Err(TrajError::Checkpoint(format!("missing tensor {name}")));
            };
            if vals.len() != n {
                return Err(TrajError::Checkpoint(format!(
                    "tensor {name} length {} vs parameter count {n}",
                    vals.len()
                )));
            }
            Ok(vals.to_vec())
        };
        let m = take_moment("opt.m")?;
        let v = take_moment("opt.v")?;
        if let Some(extra) = by_name.keys().next() {
            return Err(TrajError::Checkpoint(format!("unexpected tensor {extra}")));
        }
        Ok(TrainState {
            model,
            opt: AdamW { m, v, t: data.adam_t },
            step: data.step,
            master_seed: data.master_seed,
            config_hash: data.config_hash,
        })
    }
}

// ---------------------------------------------------------------------------
