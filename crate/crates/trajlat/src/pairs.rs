//! Segment-role taxonomy and pair labeling.
//!
//! Each trajectory contributes sixteen roles per step: the three first
//! encodings (P, F, C), their latent intersection I, twelve re-encoded
//! roles XY ("X given Y": sample z from Θ(Y), decode at the times of X's
//! segment, re-encode), and O, a first encoding borrowed from another batch
//! element.
//!
//! Labels follow from what each role asserts about the two temporal spans.
//! A role either pins a span to the observed trajectory (True), to one
//! sampled continuation (Sample), or says nothing (None). Two roles conflict
//! — form a negative pair — exactly when some span is asserted by both and
//! at least one assertion is a Sample: independent draws almost surely
//! disagree, and a draw almost surely disagrees with the ground truth.
//! Non-conflicting pairs are positives. The hard/soft split then applies the
//! rules listed on `relationship`.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::data::{segment_from_window, Segment, Trajectory};
use crate::latent::Distribution;
use crate::model::TrajModel;
use crate::{Result, TrajError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    P,
    F,
    C,
    I,
    FP,
    PF,
    CP,
    CF,
    PP,
    FF,
    CC,
    PI,
    FI,
    PC,
    FC,
    O,
}

pub const ALL_ROLES: [Role; 16] = [
    Role::P,
    Role::F,
    Role::C,
    Role::I,
    Role::FP,
    Role::PF,
    Role::CP,
    Role::CF,
    Role::PP,
    Role::FF,
    Role::CC,
    Role::PI,
    Role::FI,
    Role::PC,
    Role::FC,
    Role::O,
];

/// Distribution a re-encoded role draws its latent sample from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Source {
    P,
    F,
    C,
    I,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    FirstEncoding,
    Intersection,
    ReEncoding { source: Source, times: Role },
    OtherBatch,
}

/// Temporal span of the segment a role encodes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Span {
    Past,
    Future,
    Combination,
    Other,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::P => "P",
            Role::F => "F",
            Role::C => "C",
            Role::I => "I",
            Role::FP => "FP",
            Role::PF => "PF",
            Role::CP => "CP",
            Role::CF => "CF",
            Role::PP => "PP",
            Role::FF => "FF",
            Role::CC => "CC",
            Role::PI => "PI",
            Role::FI => "FI",
            Role::PC => "PC",
            Role::FC => "FC",
            Role::O => "O",
        }
    }

    pub fn from_name(s: &str) -> Result<Role> {
        ALL_ROLES
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| TrajError::Data(format!("unknown role tag {s:?}")))
    }

    pub fn provenance(self) -> Provenance {
        use Provenance::*;
        match self {
            Role::P | Role::F | Role::C => FirstEncoding,
            Role::I => Intersection,
            Role::O => OtherBatch,
            Role::FP => ReEncoding { source: Source::P, times: Role::F },
            Role::PF => ReEncoding { source: Source::F, times: Role::P },
            Role::CP => ReEncoding { source: Source::P, times: Role::C },
            Role::CF => ReEncoding { source: Source::F, times: Role::C },
            Role::PP => ReEncoding { source: Source::P, times: Role::P },
            Role::FF => ReEncoding { source: Source::F, times: Role::F },
            Role::CC => ReEncoding { source: Source::C, times: Role::C },
            Role::PI => ReEncoding { source: Source::I, times: Role::P },
            Role::FI => ReEncoding { source: Source::I, times: Role::F },
            Role::PC => ReEncoding { source: Source::C, times: Role::P },
            Role::FC => ReEncoding { source: Source::C, times: Role::F },
        }
    }

    pub fn span(self) -> Span {
        match self {
            Role::P | Role::PP | Role::PI | Role::PC | Role::PF => Span::Past,
            Role::F | Role::FF | Role::FI | Role::FC | Role::FP => Span::Future,
            Role::C | Role::CC | Role::I | Role::CP | Role::CF => Span::Combination,
            Role::O => Span::Other,
        }
    }

    /// Latent source a re-encoded role samples from; None for the rest.
    pub fn source(self) -> Option<Source> {
        match self.provenance() {
            Provenance::ReEncoding { source, .. } => Some(source),
            _ => None,
        }
    }

    fn is_first_encoding(self) -> bool {
        matches!(self, Role::P | Role::F | Role::C)
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Symmetric,
    Conditional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairLabel {
    HardPositive,
    SoftPositive,
    SoftNegative,
    HardNegative,
}

impl PairLabel {
    pub fn is_positive(self) -> bool {
        matches!(self, PairLabel::HardPositive | PairLabel::SoftPositive)
    }

    pub fn short(self) -> &'static str {
        match self {
            PairLabel::HardPositive => "HP",
            PairLabel::SoftPositive => "SP",
            PairLabel::SoftNegative => "SN",
            PairLabel::HardNegative => "HN",
        }
    }
}

/// What a role claims about one temporal span.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Assert {
    None,
    True,
    Sample(Source),
}

/// (past, future) assertions. O is handled before this table applies.
fn assertions(role: Role) -> (Assert, Assert) {
    use Assert::*;
    match role {
        Role::P | Role::PP | Role::PI | Role::PC => (True, None),
        Role::F | Role::FF | Role::FI | Role::FC => (None, True),
        Role::C | Role::CC | Role::I => (True, True),
        Role::FP => (None, Sample(Source::P)),
        Role::PF => (Sample(Source::F), None),
        Role::CP => (True, Sample(Source::P)),
        Role::CF => (Sample(Source::F), True),
        Role::O => unreachable!("O has no span assertions"),
    }
}

fn conflicting(a: Role, b: Role) -> bool {
    if a == Role::O || b == Role::O {
        return true;
    }
    let (ap, af) = assertions(a);
    let (bp, bf) = assertions(b);
    let clash = |x: Assert, y: Assert| {
        x != Assert::None
            && y != Assert::None
            && (matches!(x, Assert::Sample(_)) || matches!(y, Assert::Sample(_)))
    };
    clash(ap, bp) || clash(af, bf)
}

/// Exact-same-segment classes: truthful encodings of the same observation.
fn segment_class(role: Role) -> Option<u8> {
    match role {
        Role::P | Role::PP | Role::PI | Role::PC => Some(0),
        Role::F | Role::FF | Role::FI | Role::FC => Some(1),
        Role::C | Role::CC | Role::I => Some(2),
        _ => None,
    }
}

fn symmetric_hard_positive(a: Role, b: Role) -> bool {
    if a.is_first_encoding() && b.is_first_encoding() {
        return true;
    }
    if let (Some(ca), Some(cb)) = (segment_class(a), segment_class(b)) {
        if ca == cb {
            return true;
        }
    }
    const EXTRAS: [(Role, Role); 4] = [
        (Role::P, Role::FP),
        (Role::F, Role::PF),
        (Role::PP, Role::FP),
        (Role::FF, Role::PF),
    ];
    EXTRAS.iter().any(|&(x, y)| (a, b) == (x, y) || (a, b) == (y, x))
}

fn symmetric_hard_negative(a: Role, b: Role) -> bool {
    let qualifies = |x: Role, y: Role| {
        matches!(x.span(), Span::Past | Span::Future) && (y.is_first_encoding() || y == x)
    };
    qualifies(a, b) || qualifies(b, a)
}

fn truthful(role: Role) -> bool {
    let (p, f) = assertions(role);
    !matches!(p, Assert::Sample(_)) && !matches!(f, Assert::Sample(_))
}

/// b's belief entails a: everything a asserts is asserted True by b.
fn conditional_containment(a: Role, b: Role) -> bool {
    if !truthful(a) {
        return false;
    }
    let (ap, af) = assertions(a);
    let (bp, bf) = assertions(b);
    let covered = |x: Assert, y: Assert| x == Assert::None || y == Assert::True;
    covered(ap, bp) && covered(af, bf)
}

/// Label the ordered role pair. In conditional mode the label reads as the
/// direction P(a|b): hard positives are exactly the containments whose
/// target probability is 1. In symmetric mode the result is symmetric in
/// (a, b). O pairs are always soft negatives.
pub fn relationship(a: Role, b: Role, mode: Mode) -> PairLabel {
    if a == Role::O || b == Role::O {
        return PairLabel::SoftNegative;
    }
    let negative = conflicting(a, b);
    match mode {
        Mode::Symmetric => {
            if negative {
                if symmetric_hard_negative(a, b) {
                    PairLabel::HardNegative
                } else {
                    PairLabel::SoftNegative
                }
            } else if symmetric_hard_positive(a, b) {
                PairLabel::HardPositive
            } else {
                PairLabel::SoftPositive
            }
        }
        Mode::Conditional => {
            if negative {
                PairLabel::HardNegative
            } else if conditional_containment(a, b) {
                PairLabel::HardPositive
            } else {
                PairLabel::SoftPositive
            }
        }
    }
}

/// Render the full 16×16 matrix as CSV (rows = anchor a, cols = b).
pub fn label_matrix_csv(mode: Mode) -> String {
    let mut out = String::from("role");
    for b in ALL_ROLES {
        out.push(',');
        out.push_str(b.name());
    }
    out.push('\n');
    for a in ALL_ROLES {
        out.push_str(a.name());
        for b in ALL_ROLES {
            out.push(',');
            out.push_str(relationship(a, b, mode).short());
        }
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// instances and triplets
// ---------------------------------------------------------------------------

/// One concrete distribution in a step: a role plus, for re-encoded roles,
/// the index of the latent draw it was built from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RoleInstance {
    pub role: Role,
    pub draw: Option<usize>,
}

impl RoleInstance {
    pub fn plain(role: Role) -> Self {
        RoleInstance { role, draw: None }
    }

    pub fn sampled(role: Role, draw: usize) -> Self {
        RoleInstance { role, draw: Some(draw) }
    }
}

/// Pair label at instance level; None when the pair is excluded because a
/// negative shares the exact latent draw (the two contents are one coherent
/// sampled trajectory, not independent disagreeing ones).
pub fn instance_label(a: &RoleInstance, b: &RoleInstance, mode: Mode) -> Option<PairLabel> {
    let label = relationship(a.role, b.role, mode);
    if !label.is_positive() {
        if let (Some(sa), Some(sb)) = (a.role.source(), b.role.source()) {
            if sa == sb && a.draw.is_some() && a.draw == b.draw {
                return None;
            }
        }
    }
    Some(label)
}

#[derive(Clone, Copy, Debug)]
pub struct Triplet {
    pub anchor: usize,
    pub positive: usize,
    pub negative: usize,
    pub hard_positive: bool,
    pub hard_negative: bool,
}

/// Draw triplets for every eligible anchor. Hard pools are preferred with
/// probability ratio/(ratio+1) when both hard and soft candidates exist;
/// positive and negative pools are drawn independently. O instances never
/// anchor. Anchors with an empty positive or negative pool are skipped.
pub fn sample_triplets(
    instances: &[RoleInstance],
    mode: Mode,
    per_anchor: usize,
    hard_ratio: f64,
    rng: &mut impl Rng,
) -> Vec<Triplet> {
    let hard_prob = hard_ratio / (hard_ratio + 1.0);
    let mut out = Vec::new();
    for (ai, a) in instances.iter().enumerate() {
        if a.role == Role::O {
            continue;
        }
        let mut hard_pos = Vec::new();
        let mut soft_pos = Vec::new();
        let mut hard_neg = Vec::new();
        let mut soft_neg = Vec::new();
        for (bi, b) in instances.iter().enumerate() {
            if bi == ai {
                continue;
            }
            match instance_label(a, b, mode) {
                Some(PairLabel::HardPositive) => hard_pos.push(bi),
                Some(PairLabel::SoftPositive) => soft_pos.push(bi),
                Some(PairLabel::HardNegative) => hard_neg.push(bi),
                Some(PairLabel::SoftNegative) => soft_neg.push(bi),
                None => {}
            }
        }
        if (hard_pos.is_empty() && soft_pos.is_empty())
            || (hard_neg.is_empty() && soft_neg.is_empty())
        {
            continue;
        }
        let pick = |hard: &[usize], soft: &[usize], rng: &mut dyn rand::RngCore| {
            let use_hard = if hard.is_empty() {
                false
            } else if soft.is_empty() {
                true
            } else {
                rng.random_bool(hard_prob)
            };
            let pool = if use_hard { hard } else { soft };
            (pool[rng.random_range(0..pool.len())], use_hard)
        };
        for _ in 0..per_anchor {
            let (positive, hp) = pick(&hard_pos, &soft_pos, rng);
            let (negative, hn) = pick(&hard_neg, &soft_neg, rng);
            out.push(Triplet {
                anchor: ai,
                positive,
                negative,
                hard_positive: hp,
                hard_negative: hn,
            });
        }
    }
    out
}

/// The full per-trajectory instance set for one step: P, F, C, I once,
/// every re-encoded role once per draw, plus one O per batch peer.
pub fn step_instances(draws: usize, peers: usize) -> Vec<RoleInstance> {
    let mut out = vec![
        RoleInstance::plain(Role::P),
        RoleInstance::plain(Role::F),
        RoleInstance::plain(Role::C),
        RoleInstance::plain(Role::I),
    ];
    for role in ALL_ROLES {
        if role.source().is_some() {
            for d in 0..draws {
                out.push(RoleInstance::sampled(role, d));
            }
        }
    }
    for _ in 0..peers {
        out.push(RoleInstance::plain(Role::O));
    }
    out
}

// ---------------------------------------------------------------------------
// role construction
// ---------------------------------------------------------------------------

/// Minimum frames per half-window: the sparse subset rule keeps ⌈len/3⌉
/// points, so 6 frames guarantee at least 2 per segment.
pub const MIN_HALF_FRAMES: usize = 6;

/// The three observed segments of one step. The future window starts at the
/// frame right after the past window ends; the combination covers both spans
/// with a freshly drawn point subset.
#[derive(Clone, Debug)]
pub struct RoleSegments {
    pub past: Segment,
    pub future: Segment,
    pub comb: Segment,
}

pub fn sample_role_segments(
    traj: &Trajectory,
    window_frames: usize,
    rng: &mut ChaCha12Rng,
) -> Result<RoleSegments> {
    let t = traj.len();
    if t < 2 * MIN_HALF_FRAMES {
        return Err(TrajError::Data(format!(
            "trajectory {} too short for past+future windows: {t} frames",
            traj.id
        )));
    }
    let len = window_frames.clamp(2 * MIN_HALF_FRAMES, t);
    let start = rng.random_range(0..=t - len);
    let split = rng.random_range(MIN_HALF_FRAMES..=len - MIN_HALF_FRAMES);
    let past = segment_from_window(traj, start, split, rng)?;
    let future = segment_from_window(traj, start + split, len - split, rng)?;
    let comb = segment_from_window(traj, start, len, rng)?;
    Ok(RoleSegments { past, future, comb })
}

/// One labeled instance with its observation (None for I, which exists only
/// in latent space) and encoded distribution.
#[derive(Clone, Debug)]
pub struct RoleEntry {
    pub instance: RoleInstance,
    pub segment: Option<Segment>,
    pub dist: Distribution,
}

/// All per-trajectory role entries for a step, aligned index-for-index with
/// `step_instances(draws, 0)`.
#[derive(Clone, Debug)]
pub struct RoleMap {
    pub entries: Vec<RoleEntry>,
}

impl RoleMap {
    pub fn get(&self, role: Role, draw: Option<usize>) -> Option<&RoleEntry> {
        self.entries
            .iter()
            .find(|e| e.instance.role == role && e.instance.draw == draw)
    }
}

const SOURCE_ORDER: [Source; 4] = [Source::P, Source::F, Source::C, Source::I];

fn source_dist<'a>(firsts: &'a [Distribution], i_dist: &'a Distribution, s: Source) -> &'a Distribution {
    match s {
        Source::P => &firsts[0],
        Source::F => &firsts[1],
        Source::C => &firsts[2],
        Source::I => i_dist,
    }
}

/// Build the complete role set for one trajectory against a model snapshot:
/// encode the three observed segments, intersect P and F into I, then for
/// every re-encoded role decode each of the source's latent draws at the
/// time-source segment's own times and encode the result.
pub fn sample_roles(
    traj: &Trajectory,
    model: &TrajModel,
    draws: usize,
    window_frames: usize,
    rng: &mut ChaCha12Rng,
) -> Result<RoleMap> {
    if draws == 0 {
        return Err(TrajError::Config("sample_roles: draws must be positive".into()));
    }
    let segs = sample_role_segments(traj, window_frames, rng)?;
    let firsts = model.encode_many(&[&segs.past, &segs.future, &segs.comb])?;
    let i_dist = firsts[0].intersect(&firsts[1])?;

    let mut z: Vec<Vec<Vec<f64>>> = Vec::with_capacity(4);
    for s in SOURCE_ORDER {
        let d = source_dist(&firsts, &i_dist, s);
        z.push((0..draws).map(|_| d.sample(rng)).collect());
    }
    let z_for = |s: Source, d: usize| -> &[f64] {
        &z[SOURCE_ORDER.iter().position(|&x| x == s).unwrap()][d]
    };
    let time_seg = |r: Role| -> &Segment {
        match r {
            Role::P => &segs.past,
            Role::F => &segs.future,
            _ => &segs.comb,
        }
    };

    // decode every (role, draw) in one pass, then re-encode in one pass
    let mut jobs: Vec<(&[f64], &[f64])> = Vec::new();
    let mut job_meta: Vec<(Role, usize)> = Vec::new();
    for role in ALL_ROLES {
        if let Provenance::ReEncoding { source, times } = role.provenance() {
            for d in 0..draws {
                jobs.push((z_for(source, d), &time_seg(times).times));
                job_meta.push((role, d));
            }
        }
    }
    let decoded = model.decode_many(&jobs)?;
    let mut re_segments = Vec::with_capacity(decoded.len());
    for ((role, _), points) in job_meta.iter().zip(decoded) {
        let times_role = match role.provenance() {
            Provenance::ReEncoding { times, .. } => times,
            _ => unreachable!(),
        };
        let src = time_seg(times_role);
        let vis = vec![vec![true; model.k / 2]; points.len()];
        re_segments.push(Segment::new(
            src.times.clone(),
            points,
            vis,
            Some(traj.id.clone()),
            src.span,
        )?);
    }
    let re_dists = model.encode_many(&re_segments.iter().collect::<Vec<_>>())?;

    let mut entries = vec![
        RoleEntry {
            instance: RoleInstance::plain(Role::P),
            segment: Some(segs.past),
            dist: firsts[0].clone(),
        },
        RoleEntry {
            instance: RoleInstance::plain(Role::F),
            segment: Some(segs.future),
            dist: firsts[1].clone(),
        },
        RoleEntry {
            instance: RoleInstance::plain(Role::C),
            segment: Some(segs.comb),
            dist: firsts[2].clone(),
        },
        RoleEntry { instance: RoleInstance::plain(Role::I), segment: None, dist: i_dist },
    ];
    for (((role, d), seg), dist) in job_meta.into_iter().zip(re_segments).zip(re_dists) {
        entries.push(RoleEntry {
            instance: RoleInstance::sampled(role, d),
            segment: Some(seg),
            dist,
        });
    }
    Ok(RoleMap { entries })
}
