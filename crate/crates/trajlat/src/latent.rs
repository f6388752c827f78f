//! Latent distribution families and their algebra.
//!
//! Segments are represented either as diagonal Gaussians or as Gumbel boxes
//! in R^N. Every formula is written once, as a differentiable graph builder
//! (`g_*`); the plain structs evaluate those builders through a scratch
//! graph with constant leaves, so inference and training cannot drift apart.
//! Sampling is ordinary arithmetic over a stored noise draw
//! (reparameterization), so it differentiates exactly when done in-graph.
//!
//! Box smoothing: soft volume per dimension is
//! `beta * softplus((max - min)/beta - 2*EULER_GAMMA)`, accumulated in log
//! space. Intersection corners use a softmax-weighted (Boltzmann) max/min at
//! temperature beta — exactly idempotent, smooth, and converging to the hard
//! corners as beta → 0.

use diffcore::{Graph, NodeId, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Result, TrajError};

pub const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

/// Floor added to softplus(raw) box sides by the encoder head.
pub const SIDE_FLOOR: f64 = 1e-6;
/// Floor added to softplus(raw) Gaussian scales by the encoder head.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Log soft volume below which an intersection is reported as near-empty.
pub const NEAR_EMPTY_LOG_VOL: f64 = -40.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Gaussian,
    Box,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetricBoxDistance {
    /// 1 − (P(A|B) + P(B|A)) / 2
    SymmetricConditional,
    /// 1 − Vol(∩)/Vol(∪), union by inclusion–exclusion
    Jaccard,
    /// 1 − 2·Vol(∩)/(Vol(A) + Vol(B)) (Sørensen–Dice)
    Dice,
    /// 1 − Vol(∪)/(Vol(A) + Vol(B)): a union-normalized Dice variant, range
    /// [0, 1/2] with D(A,A) = 1/2 — exposed alongside the standard form
    DiceUnion,
    /// Vol(A) + Vol(B) − 2·Vol(∩)
    SymDiff,
}

// ---------------------------------------------------------------------------
// graph-level nodes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
pub struct GaussianNodes {
    pub mu: NodeId,
    pub sigma: NodeId,
}

#[derive(Clone, Copy, Debug)]
pub struct BoxNodes {
    pub z_min: NodeId,
    pub z_max: NodeId,
    pub beta: f64,
}

#[derive(Clone, Copy, Debug)]
pub enum DistNodes {
    Gaussian(GaussianNodes),
    Box(BoxNodes),
}

fn dim_of(g: &Graph, id: NodeId) -> usize {
    g.value(id).len()
}

fn check_same_dim(g: &Graph, a: NodeId, b: NodeId, what: &str) -> Result<()> {
    let (da, db) = (dim_of(g, a), dim_of(g, b));
    if da != db {
        return Err(TrajError::Dim(format!("{what}: {da} vs {db}")));
    }
    Ok(())
}

/// Product of two diagonal Gaussian densities, renormalized (the scale
/// factor of the pointwise product is dropped — the result is the
/// distribution, not a valid sub-probability mass).
pub fn g_gaussian_product(
    g: &mut Graph,
    p: &GaussianNodes,
    q: &GaussianNodes,
) -> Result<GaussianNodes> {
    check_same_dim(g, p.mu, q.mu, "gaussian_product")?;
    let vp = g.square(p.sigma)?;
    let vq = g.square(q.sigma)?;
    let vsum = g.add(vp, vq)?;
    let vprod = g.mul(vp, vq)?;
    let var = g.div(vprod, vsum)?;
    let sigma = g.sqrt(var)?;
    let mp_vq = g.mul(p.mu, vq)?;
    let mq_vp = g.mul(q.mu, vp)?;
    let msum = g.add(mp_vq, mq_vp)?;
    let mu = g.div(msum, vsum)?;
    Ok(GaussianNodes { mu, sigma })
}

/// KL(P‖Q) = Σ_i [log σq − log σp − 1/2 + (σp² + (μq−μp)²) / (2σq²)].
pub fn g_gaussian_kl(g: &mut Graph, p: &GaussianNodes, q: &GaussianNodes) -> Result<NodeId> {
    check_same_dim(g, p.mu, q.mu, "gaussian_kl")?;
    let n = dim_of(g, p.mu) as f64;
    let lq = g.log(q.sigma)?;
    let lp = g.log(p.sigma)?;
    let logs = g.sub(lq, lp)?;
    let d = g.sub(q.mu, p.mu)?;
    let d2 = g.square(d)?;
    let vp = g.square(p.sigma)?;
    let num = g.add(vp, d2)?;
    let vq = g.square(q.sigma)?;
    let den = g.mul_scalar(vq, 2.0)?;
    let frac = g.div(num, den)?;
    let terms = g.add(logs, frac)?;
    let s = g.sum_all(terms)?;
    Ok(g.add_scalar(s, -0.5 * n)?)
}

/// Symmetrized KL: (KL(P‖Q) + KL(Q‖P)) / 2.
pub fn g_gaussian_symmetric_kl(
    g: &mut Graph,
    p: &GaussianNodes,
    q: &GaussianNodes,
) -> Result<NodeId> {
    let ab = g_gaussian_kl(g, p, q)?;
    let ba = g_gaussian_kl(g, q, p)?;
    let s = g.add(ab, ba)?;
    Ok(g.mul_scalar(s, 0.5)?)
}

/// Squared 2-Wasserstein: Σ_i (μp−μq)² + (σp−σq)².
pub fn g_gaussian_w2_squared(
    g: &mut Graph,
    p: &GaussianNodes,
    q: &GaussianNodes,
) -> Result<NodeId> {
    check_same_dim(g, p.mu, q.mu, "gaussian_w2")?;
    let dm = g.sub(p.mu, q.mu)?;
    let dm2 = g.square(dm)?;
    let ds = g.sub(p.sigma, q.sigma)?;
    let ds2 = g.square(ds)?;
    let t = g.add(dm2, ds2)?;
    Ok(g.sum_all(t)?)
}

/// Reparameterized draw z = μ + σ ⊙ ε with a fixed noise vector.
pub fn g_gaussian_sample(g: &mut Graph, p: &GaussianNodes, eps: &[f64]) -> Result<NodeId> {
    if eps.len() != dim_of(g, p.mu) {
        return Err(TrajError::Dim(format!(
            "gaussian_sample: noise dim {} vs {}",
            eps.len(),
            dim_of(g, p.mu)
        )));
    }
    let e = g.constant(Tensor::vector(eps.to_vec()))?;
    let se = g.mul(p.sigma, e)?;
    Ok(g.add(p.mu, se)?)
}

/// Σ_i [ln β + log softplus((max_i − min_i)/β − 2γ)]; finite for arbitrarily
/// degenerate boxes thanks to the fused log-softplus.
pub fn g_box_log_soft_volume(g: &mut Graph, b: &BoxNodes) -> Result<NodeId> {
    check_same_dim(g, b.z_min, b.z_max, "box_log_soft_volume")?;
    let n = dim_of(g, b.z_min) as f64;
    let side = g.sub(b.z_max, b.z_min)?;
    let scaled = g.mul_scalar(side, 1.0 / b.beta)?;
    let shifted = g.add_scalar(scaled, -2.0 * EULER_GAMMA)?;
    let ls = g.log_softplus(shifted)?;
    let s = g.sum_all(ls)?;
    Ok(g.add_scalar(s, n * b.beta.ln())?)
}

/// Softmax-weighted (Boltzmann) maximum of two vectors at temperature beta.
fn g_smooth_extreme(
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
    beta: f64,
    max: bool,
) -> Result<NodeId> {
    let n = dim_of(g, x);
    let xc = g.reshape(x, &[n, 1])?;
    let yc = g.reshape(y, &[n, 1])?;
    let s = g.concat(&[xc, yc], 1)?;
    let sign = if max { 1.0 } else { -1.0 };
    let logits = g.mul_scalar(s, sign / beta)?;
    let w = g.softmax(logits)?;
    let weighted = g.mul(w, s)?;
    Ok(g.sum_axis(weighted, 1, false)?)
}

/// Intersection box: smoothed max of lower corners, smoothed min of upper.
/// The result can be degenerate (max below min) for disjoint inputs; its
/// soft volume stays positive and differentiable.
pub fn g_box_intersection(g: &mut Graph, a: &BoxNodes, b: &BoxNodes) -> Result<BoxNodes> {
    if a.beta != b.beta {
        return Err(TrajError::Dim(format!(
            "box_intersection: beta mismatch {} vs {}",
            a.beta, b.beta
        )));
    }
    check_same_dim(g, a.z_min, b.z_min, "box_intersection")?;
    let z_min = g_smooth_extreme(g, a.z_min, b.z_min, a.beta, true)?;
    let z_max = g_smooth_extreme(g, a.z_max, b.z_max, a.beta, false)?;
    Ok(BoxNodes { z_min, z_max, beta: a.beta })
}

fn g_clamp_nonpositive(g: &mut Graph, x: NodeId) -> Result<NodeId> {
    // min(x, 0) = −relu(−x)
    let nx = g.mul_scalar(x, -1.0)?;
    let r = g.relu(nx)?;
    Ok(g.mul_scalar(r, -1.0)?)
}

/// P(A|B) = Vol(A∩B)/Vol(B), computed as exp(logVol(∩) − logVol(B)) with the
/// log-ratio clamped at 0 so the probability stays in [0, 1].
pub fn g_box_conditional(g: &mut Graph, a: &BoxNodes, b: &BoxNodes) -> Result<NodeId> {
    let inter = g_box_intersection(g, a, b)?;
    let lv_i = g_box_log_soft_volume(g, &inter)?;
    let lv_b = g_box_log_soft_volume(g, b)?;
    let diff = g.sub(lv_i, lv_b)?;
    let clamped = g_clamp_nonpositive(g, diff)?;
    Ok(g.exp(clamped)?)
}

/// Symmetric box distances. All variants satisfy D(A,B) = D(B,A); every kind
/// except `DiceUnion` also has D(A,A) ≈ 0 (exact, via the idempotent
/// intersection).
pub fn g_box_symmetric_distance(
    g: &mut Graph,
    a: &BoxNodes,
    b: &BoxNodes,
    kind: SymmetricBoxDistance,
) -> Result<NodeId> {
    if let SymmetricBoxDistance::SymmetricConditional = kind {
        let pab = g_box_conditional(g, a, b)?;
        let pba = g_box_conditional(g, b, a)?;
        let s = g.add(pab, pba)?;
        let half = g.mul_scalar(s, -0.5)?;
        return Ok(g.add_scalar(half, 1.0)?);
    }
    let inter = g_box_intersection(g, a, b)?;
    let lv_i = g_box_log_soft_volume(g, &inter)?;
    let lv_a = g_box_log_soft_volume(g, a)?;
    let lv_b = g_box_log_soft_volume(g, b)?;
    // volume space, max-shifted so exp never overflows
    let la = g.reshape(lv_a, &[1, 1])?;
    let lb = g.reshape(lv_b, &[1, 1])?;
    let both = g.concat(&[la, lb], 1)?;
    let m = g.max_axis(both, 1, false)?;
    let ea_arg = g.sub(lv_a, m)?;
    let ea = g.exp(ea_arg)?;
    let eb_arg = g.sub(lv_b, m)?;
    let eb = g.exp(eb_arg)?;
    let ei_arg = g.sub(lv_i, m)?;
    let ei = g.exp(ei_arg)?;
    match kind {
        SymmetricBoxDistance::Jaccard => {
            let sum = g.add(ea, eb)?;
            let union = g.sub(sum, ei)?;
            let ratio = g.div(ei, union)?;
            let neg = g.mul_scalar(ratio, -1.0)?;
            Ok(g.add_scalar(neg, 1.0)?)
        }
        SymmetricBoxDistance::Dice => {
            let two_i = g.mul_scalar(ei, 2.0)?;
            let den = g.add(ea, eb)?;
            let ratio = g.div(two_i, den)?;
            let neg = g.mul_scalar(ratio, -1.0)?;
            Ok(g.add_scalar(neg, 1.0)?)
        }
        SymmetricBoxDistance::DiceUnion => {
            let sum = g.add(ea, eb)?;
            let union = g.sub(sum, ei)?;
            let ratio = g.div(union, sum)?;
            let neg = g.mul_scalar(ratio, -1.0)?;
            Ok(g.add_scalar(neg, 1.0)?)
        }
        SymmetricBoxDistance::SymDiff => {
            let sum = g.add(ea, eb)?;
            let two_i = g.mul_scalar(ei, 2.0)?;
            let d = g.sub(sum, two_i)?;
            let scale = g.exp(m)?;
            Ok(g.mul(d, scale)?)
        }
        _ => unreachable!("handled above"),
    }
}

/// Uniform draw within the hard box, z = min + u ⊙ relu(max − min); collapses
/// to the lower corner on degenerate dimensions.
pub fn g_box_sample(g: &mut Graph, b: &BoxNodes, u: &[f64]) -> Result<NodeId> {
    if u.len() != dim_of(g, b.z_min) {
        return Err(TrajError::Dim(format!(
            "box_sample: noise dim {} vs {}",
            u.len(),
            dim_of(g, b.z_min)
        )));
    }
    let side = g.sub(b.z_max, b.z_min)?;
    let pos = g.relu(side)?;
    let un = g.constant(Tensor::vector(u.to_vec()))?;
    let off = g.mul(pos, un)?;
    Ok(g.add(b.z_min, off)?)
}

/// Family dispatch for [`g_gaussian_sample`] / [`g_box_sample`].
pub fn g_dist_sample(g: &mut Graph, d: &DistNodes, noise: &[f64]) -> Result<NodeId> {
    match d {
        DistNodes::Gaussian(p) => g_gaussian_sample(g, p, noise),
        DistNodes::Box(b) => g_box_sample(g, b, noise),
    }
}

/// Family dispatch for belief combination: Gaussian product / box intersection.
pub fn g_dist_intersect(g: &mut Graph, a: &DistNodes, b: &DistNodes) -> Result<DistNodes> {
    match (a, b) {
        (DistNodes::Gaussian(x), DistNodes::Gaussian(y)) => {
            Ok(DistNodes::Gaussian(g_gaussian_product(g, x, y)?))
        }
        (DistNodes::Box(x), DistNodes::Box(y)) => {
            Ok(DistNodes::Box(g_box_intersection(g, x, y)?))
        }
        _ => Err(TrajError::Dim("intersect: mixed families".into())),
    }
}

/// Encoder-head parameterization shared by both families: the first raw
/// vector is a location (μ / z_min), the second becomes a strictly positive
/// scale via softplus plus a floor (σ / box side).
pub fn g_dist_from_raw(
    g: &mut Graph,
    raw_loc: NodeId,
    raw_scale: NodeId,
    family: Family,
    beta: f64,
) -> Result<DistNodes> {
    check_same_dim(g, raw_loc, raw_scale, "dist_from_raw")?;
    let sp = g.softplus(raw_scale)?;
    match family {
        Family::Gaussian => {
            let sigma = g.add_scalar(sp, SIGMA_FLOOR)?;
            Ok(DistNodes::Gaussian(GaussianNodes { mu: raw_loc, sigma }))
        }
        Family::Box => {
            let side = g.add_scalar(sp, SIDE_FLOOR)?;
            let z_max = g.add(raw_loc, side)?;
            Ok(DistNodes::Box(BoxNodes { z_min: raw_loc, z_max, beta }))
        }
    }
}

// ---------------------------------------------------------------------------
// plain (inference-time) wrappers
// ---------------------------------------------------------------------------

fn eval_scalar(
    inputs: &[&[f64]],
    build: impl FnOnce(&mut Graph, &[NodeId]) -> Result<NodeId>,
) -> Result<f64> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|x| g.constant(Tensor::vector(x.to_vec())))
        .collect::<std::result::Result<_, _>>()?;
    let out = build(&mut g, &ids)?;
    Ok(g.value(out).item()?)
}

fn eval_vectors(
    inputs: &[&[f64]],
    build: impl FnOnce(&mut Graph, &[NodeId]) -> Result<Vec<NodeId>>,
) -> Result<Vec<Vec<f64>>> {
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|x| g.constant(Tensor::vector(x.to_vec())))
        .collect::<std::result::Result<_, _>>()?;
    let outs = build(&mut g, &ids)?;
    Ok(outs.into_iter().map(|o| g.value(o).data().to_vec()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalGaussian {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() || mu.is_empty() {
            return Err(TrajError::Dim(format!(
                "gaussian: mu dim {} vs sigma dim {}",
                mu.len(),
                sigma.len()
            )));
        }
        if !mu.iter().chain(&sigma).all(|v| v.is_finite()) {
            return Err(TrajError::Data("gaussian: non-finite parameter".into()));
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(TrajError::Data("gaussian: sigma must be positive".into()));
        }
        Ok(DiagonalGaussian { mu, sigma })
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn product(&self, other: &Self) -> Result<Self> {
        let outs = eval_vectors(&[&self.mu, &self.sigma, &other.mu, &other.sigma], |g, ids| {
            let p = GaussianNodes { mu: ids[0], sigma: ids[1] };
            let q = GaussianNodes { mu: ids[2], sigma: ids[3] };
            let r = g_gaussian_product(g, &p, &q)?;
            Ok(vec![r.mu, r.sigma])
        })?;
        let mut it = outs.into_iter();
        DiagonalGaussian::new(it.next().unwrap(), it.next().unwrap())
    }

    /// KL(self ‖ other).
    pub fn kl(&self, other: &Self) -> Result<f64> {
        eval_scalar(&[&self.mu, &self.sigma, &other.mu, &other.sigma], |g, ids| {
            let p = GaussianNodes { mu: ids[0], sigma: ids[1] };
            let q = GaussianNodes { mu: ids[2], sigma: ids[3] };
            g_gaussian_kl(g, &p, &q)
        })
    }

    pub fn symmetric_kl(&self, other: &Self) -> Result<f64> {
        eval_scalar(&[&self.mu, &self.sigma, &other.mu, &other.sigma], |g, ids| {
            let p = GaussianNodes { mu: ids[0], sigma: ids[1] };
            let q = GaussianNodes { mu: ids[2], sigma: ids[3] };
            g_gaussian_symmetric_kl(g, &p, &q)
        })
    }

    pub fn w2_squared(&self, other: &Self) -> Result<f64> {
        eval_scalar(&[&self.mu, &self.sigma, &other.mu, &other.sigma], |g, ids| {
            let p = GaussianNodes { mu: ids[0], sigma: ids[1] };
            let q = GaussianNodes { mu: ids[2], sigma: ids[3] };
            g_gaussian_w2_squared(g, &p, &q)
        })
    }

    pub fn log_pdf(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.dim() {
            return Err(TrajError::Dim("log_pdf: dim mismatch".into()));
        }
        const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;
        Ok(self
            .mu
            .iter()
            .zip(&self.sigma)
            .zip(z)
            .map(|((&m, &s), &x)| {
                let t = (x - m) / s;
                -0.5 * t * t - s.ln() - HALF_LN_2PI
            })
            .sum())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.sigma)
            .map(|(&m, &s)| {
                let eps: f64 = rng.sample(rand_distr::StandardNormal);
                m + s * eps
            })
            .collect()
    }
}

/// Warning-carrying conditional probability.
#[derive(Clone, Copy, Debug)]
pub struct ConditionalProb {
    pub p: f64,
    /// Vol(B) underflowed to zero in linear space; p was forced to 0.
    pub underflow: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GumbelBox {
    z_min: Vec<f64>,
    z_max: Vec<f64>,
    beta: f64,
}

impl GumbelBox {
    /// Encoder-produced boxes always have z_max ≥ z_min (see `from_raw`);
    /// intersection results may be degenerate, which this constructor allows.
    pub fn new(z_min: Vec<f64>, z_max: Vec<f64>, beta: f64) -> Result<Self> {
        if z_min.len() != z_max.len() || z_min.is_empty() {
            return Err(TrajError::Dim(format!(
                "box: min dim {} vs max dim {}",
                z_min.len(),
                z_max.len()
            )));
        }
        if !z_min.iter().chain(&z_max).all(|v| v.is_finite()) || !beta.is_finite() {
            return Err(TrajError::Data("box: non-finite parameter".into()));
        }
        if beta <= 0.0 {
            return Err(TrajError::Data("box: beta must be positive".into()));
        }
        Ok(GumbelBox { z_min, z_max, beta })
    }

    /// Network parameterization: z_min = raw, side = softplus(raw) + floor.
    pub fn from_raw(raw_min: &[f64], raw_side: &[f64], beta: f64, side_floor: f64) -> Result<Self> {
        if raw_min.len() != raw_side.len() {
            return Err(TrajError::Dim("box from_raw: dim mismatch".into()));
        }
        let z_min = raw_min.to_vec();
        let z_max: Vec<f64> = raw_min
            .iter()
            .zip(raw_side)
            .map(|(&m, &r)| m + (r.max(0.0) + (-r.abs()).exp().ln_1p()) + side_floor)
            .collect();
        GumbelBox::new(z_min, z_max, beta)
    }

    pub fn dim(&self) -> usize {
        self.z_min.len()
    }

    pub fn z_min(&self) -> &[f64] {
        &self.z_min
    }

    pub fn z_max(&self) -> &[f64] {
        &self.z_max
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn center(&self) -> Vec<f64> {
        self.z_min
            .iter()
            .zip(&self.z_max)
            .map(|(&a, &b)| 0.5 * (a + b))
            .collect()
    }

    pub fn log_soft_volume(&self) -> Result<f64> {
        let beta = self.beta;
        eval_scalar(&[&self.z_min, &self.z_max], |g, ids| {
            let b = BoxNodes { z_min: ids[0], z_max: ids[1], beta };
            g_box_log_soft_volume(g, &b)
        })
    }

    pub fn soft_volume(&self) -> Result<f64> {
        Ok(self.log_soft_volume()?.exp())
    }

    /// Π_i max(max_i − min_i, 0): the limiting hard volume.
    pub fn hard_volume(&self) -> f64 {
        self.z_min
            .iter()
            .zip(&self.z_max)
            .map(|(&a, &b)| (b - a).max(0.0))
            .product()
    }

    pub fn intersection(&self, other: &Self) -> Result<Self> {
        if self.beta != other.beta {
            return Err(TrajError::Dim(format!(
                "box intersection: beta mismatch {} vs {}",
                self.beta, other.beta
            )));
        }
        let beta = self.beta;
        let outs = eval_vectors(
            &[&self.z_min, &self.z_max, &other.z_min, &other.z_max],
            |g, ids| {
                let a = BoxNodes { z_min: ids[0], z_max: ids[1], beta };
                let b = BoxNodes { z_min: ids[2], z_max: ids[3], beta };
                let r = g_box_intersection(g, &a, &b)?;
                Ok(vec![r.z_min, r.z_max])
            },
        )?;
        let mut it = outs.into_iter();
        GumbelBox::new(it.next().unwrap(), it.next().unwrap(), beta)
    }

    /// P(self | other), clamped to [0, 1].
    pub fn conditional(&self, other: &Self) -> Result<ConditionalProb> {
        if self.beta != other.beta {
            return Err(TrajError::Dim("box conditional: beta mismatch".into()));
        }
        if other.soft_volume()? == 0.0 {
            return Ok(ConditionalProb { p: 0.0, underflow: true });
        }
        let beta = self.beta;
        let p = eval_scalar(
            &[&self.z_min, &self.z_max, &other.z_min, &other.z_max],
            |g, ids| {
                let a = BoxNodes { z_min: ids[0], z_max: ids[1], beta };
                let b = BoxNodes { z_min: ids[2], z_max: ids[3], beta };
                g_box_conditional(g, &a, &b)
            },
        )?;
        Ok(ConditionalProb { p, underflow: false })
    }

    pub fn symmetric_distance(&self, other: &Self, kind: SymmetricBoxDistance) -> Result<f64> {
        if self.beta != other.beta {
            return Err(TrajError::Dim("box distance: beta mismatch".into()));
        }
        let beta = self.beta;
        eval_scalar(
            &[&self.z_min, &self.z_max, &other.z_min, &other.z_max],
            |g, ids| {
                let a = BoxNodes { z_min: ids[0], z_max: ids[1], beta };
                let b = BoxNodes { z_min: ids[2], z_max: ids[3], beta };
                g_box_symmetric_distance(g, &a, &b, kind)
            },
        )
    }

    /// Uniform draw within the hard box; degenerate dims collapse to z_min.
    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.z_min
            .iter()
            .zip(&self.z_max)
            .map(|(&a, &b)| {
                let u: f64 = rng.random();
                a + u * (b - a).max(0.0)
            })
            .collect()
    }
}

/// Family-generic distribution handle used by inference.
#[derive(Clone, Debug)]
pub enum Distribution {
    Gaussian(DiagonalGaussian),
    Box(GumbelBox),
}

impl Distribution {
    /// Plain-path twin of [`g_dist_from_raw`].
    pub fn from_raw(raw_loc: &[f64], raw_scale: &[f64], family: Family, beta: f64) -> Result<Self> {
        match family {
            Family::Gaussian => {
                let sigma = raw_scale
                    .iter()
                    .map(|&r| r.max(0.0) + (-r.abs()).exp().ln_1p() + SIGMA_FLOOR)
                    .collect();
                Ok(Distribution::Gaussian(DiagonalGaussian::new(raw_loc.to_vec(), sigma)?))
            }
            Family::Box => Ok(Distribution::Box(GumbelBox::from_raw(
                raw_loc, raw_scale, beta, SIDE_FLOOR,
            )?)),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Distribution::Gaussian(d) => d.dim(),
            Distribution::Box(b) => b.dim(),
        }
    }

    /// Point summary used by latent editing: the mean / box center.
    pub fn location(&self) -> Vec<f64> {
        match self {
            Distribution::Gaussian(d) => d.mu().to_vec(),
            Distribution::Box(b) => b.center(),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self {
            Distribution::Gaussian(d) => d.sample(rng),
            Distribution::Box(b) => b.sample(rng),
        }
    }

    /// Per-dimension noise for `sample_with`: ε ~ N(0,1) for Gaussians,
    /// u ~ U(0,1) for boxes.
    pub fn draw_noise(family: Family, dim: usize, rng: &mut impl Rng) -> Vec<f64> {
        match family {
            Family::Gaussian => {
                (0..dim).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
            }
            Family::Box => (0..dim).map(|_| rng.random()).collect(),
        }
    }

    /// Reparameterized sample from caller-supplied noise. Matches the
    /// graph-level samplers exactly, so one draw can feed both the plain and
    /// the differentiable path.
    pub fn sample_with(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(TrajError::Dim(format!(
                "sample_with: noise dim {} vs {}",
                noise.len(),
                self.dim()
            )));
        }
        Ok(match self {
            Distribution::Gaussian(d) => d
                .mu()
                .iter()
                .zip(d.sigma())
                .zip(noise)
                .map(|((&m, &s), &e)| m + s * e)
                .collect(),
            Distribution::Box(b) => b
                .z_min()
                .iter()
                .zip(b.z_max())
                .zip(noise)
                .map(|((&a, &c), &u)| a + u * (c - a).max(0.0))
                .collect(),
        })
    }

    /// Combination of two beliefs: Gaussian product or box intersection.
    pub fn intersect(&self, other: &Self) -> Result<Distribution> {
        match (self, other) {
            (Distribution::Gaussian(a), Distribution::Gaussian(b)) => {
                Ok(Distribution::Gaussian(a.product(b)?))
            }
            (Distribution::Box(a), Distribution::Box(b)) => {
                Ok(Distribution::Box(a.intersection(b)?))
            }
            _ => Err(TrajError::Dim("intersect: mixed families".into())),
        }
    }

    /// Log soft volume for boxes; None for Gaussians (always proper mass).
    pub fn log_mass(&self) -> Result<Option<f64>> {
        match self {
            Distribution::Gaussian(_) => Ok(None),
            Distribution::Box(b) => Ok(Some(b.log_soft_volume()?)),
        }
    }
}
