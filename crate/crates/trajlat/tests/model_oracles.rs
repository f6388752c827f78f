//! End-to-end gradient fidelity on the tiny model configuration.
//!
//! Every parameter of the encoder and decoder participates in one composite
//! scalar that exercises the full differentiable surface: encoding, the
//! latent algebra (intersection/product, conditional probability, distances,
//! divergences), reparameterized sampling and decoding.

use diffcore::check::check_gradients;
use diffcore::{DiffError, Graph, NodeId, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use trajlat::data::Segment;
use trajlat::latent::{
    g_box_conditional, g_box_intersection, g_box_sample, g_box_symmetric_distance,
    g_gaussian_kl, g_gaussian_product, g_gaussian_sample, g_gaussian_w2_squared, DistNodes,
    Family, SymmetricBoxDistance,
};
use trajlat::model::{DecoderConfig, EncoderConfig, TrajModel};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-3;

fn lift<T>(r: trajlat::Result<T>) -> Result<T, DiffError> {
    r.map_err(|e| DiffError::Invalid(e.to_string()))
}

fn tiny_model(family: Family) -> TrajModel {
    let enc = EncoderConfig {
        layers: 2,
        heads: 2,
        hidden: 16,
        latent: 8,
        fourier_bands: 3,
        ffn: 16,
        max_points: 32,
    };
    let dec = DecoderConfig { blocks: 4, hidden: 16 };
    let mut rng = ChaCha12Rng::seed_from_u64(23);
    TrajModel::new(enc, dec, 4, family, 0.05, &mut rng).unwrap()
}

fn seg(times: Vec<f64>, phase: f64) -> Segment {
    let points = times
        .iter()
        .map(|&t| {
            vec![
                50.0 + 20.0 * (t + phase).sin(),
                50.0 + 10.0 * t.cos(),
                30.0 + 5.0 * t,
                70.0 - 4.0 * (t * 1.3 + phase).cos(),
            ]
        })
        .collect();
    let vis = vec![vec![true, true]; times.len()];
    let span = (times[0], *times.last().unwrap());
    Segment::new(times, points, vis, None, span).unwrap()
}

/// Deterministic weights spreading the (M, K) decode rows into a scalar.
fn row_weights(g: &mut Graph, rows: NodeId, m: usize, k: usize) -> Result<NodeId, DiffError> {
    let w: Vec<f64> = (0..m * k).map(|i| 0.01 * ((i % 7) as f64 - 3.0)).collect();
    let wt = g.constant(Tensor::matrix(m, k, w)?)?;
    let prod = g.mul(rows, wt)?;
    g.sum_all(prod)
}

#[test]
fn end_to_end_gradients_box() {
    let model = tiny_model(Family::Box);
    let s1 = seg(vec![0.0, 0.3, 0.62, 1.0], 0.0);
    let s2 = seg(vec![1.04, 1.3, 1.64, 2.0, 2.36], 0.7);
    let u: Vec<f64> = (0..8).map(|i| 0.1 + 0.08 * i as f64).collect();
    let times = [0.5, 1.5, 3.1];

    let inputs = model.params.tensors().unwrap();
    let build = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId, DiffError> {
        let p = lift(model.params.bind_with(ids.to_vec()))?;
        let enc = lift(model.encode_batch(g, &p, &[&s1, &s2]))?;
        let (b1, b2) = match (enc[0], enc[1]) {
            (DistNodes::Box(a), DistNodes::Box(b)) => (a, b),
            _ => unreachable!(),
        };
        let inter = lift(g_box_intersection(g, &b1, &b2))?;
        let cond = lift(g_box_conditional(g, &b1, &b2))?;
        let dist = lift(g_box_symmetric_distance(g, &b1, &b2, SymmetricBoxDistance::Jaccard))?;
        let z = lift(g_box_sample(g, &inter, &u))?;
        let rows = lift(model.decode_rows(g, &p, z, &times))?;
        let dec_term = row_weights(g, rows, times.len(), 4)?;
        let t = g.add(cond, dist)?;
        g.add(t, dec_term)
    };
    let report = check_gradients(build, &inputs, STEP).unwrap();
    assert!(
        report.max_rel_err < TOL,
        "box end-to-end: rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn end_to_end_gradients_gaussian() {
    let model = tiny_model(Family::Gaussian);
    let s1 = seg(vec![0.0, 0.42, 0.8, 1.2], 0.3);
    let s2 = seg(vec![1.24, 1.66, 2.0], 1.1);
    let eps: Vec<f64> = (0..8).map(|i| 0.3 * ((i as f64) - 3.5) / 3.5).collect();
    let times = [0.25, 1.9];

    let inputs = model.params.tensors().unwrap();
    let build = |g: &mut Graph, ids: &[NodeId]| -> Result<NodeId, DiffError> {
        let p = lift(model.params.bind_with(ids.to_vec()))?;
        let enc = lift(model.encode_batch(g, &p, &[&s1, &s2]))?;
        let (d1, d2) = match (enc[0], enc[1]) {
            (DistNodes::Gaussian(a), DistNodes::Gaussian(b)) => (a, b),
            _ => unreachable!(),
        };
        let prod = lift(g_gaussian_product(g, &d1, &d2))?;
        let kl = lift(g_gaussian_kl(g, &d1, &d2))?;
        let w2 = lift(g_gaussian_w2_squared(g, &d1, &d2))?;
        let z = lift(g_gaussian_sample(g, &prod, &eps))?;
        let rows = lift(model.decode_rows(g, &p, z, &times))?;
        let dec_term = row_weights(g, rows, times.len(), 4)?;
        let t = g.add(kl, w2)?;
        g.add(t, dec_term)
    };
    let report = check_gradients(build, &inputs, STEP).unwrap();
    assert!(
        report.max_rel_err < TOL,
        "gaussian end-to-end: rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}
