//! Finite-difference verification for every differentiable op.
//!
//! Each op gets 100 seeded random inputs; the loss is a fixed random linear
//! functional of the op output so that row-structured ops (softmax, layer
//! norm) cannot hide errors behind symmetric reductions. Inputs are kept
//! away from kinks and singularities (relu at 0, sqrt at 0, log at 0) —
//! subgradient choices there are pinned by dedicated unit tests instead.

use diffcore::check::{check_gradients, CheckReport};
use diffcore::{Graph, NodeId, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;
const ROUNDS: usize = 100;

fn rng_for(op: &str, round: usize) -> ChaCha12Rng {
    let mut seed = [0u8; 32];
    for (i, b) in op.bytes().enumerate().take(24) {
        seed[i] = b;
    }
    seed[24..32].copy_from_slice(&(round as u64).to_le_bytes());
    ChaCha12Rng::from_seed(seed)
}

fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Keep values away from zero so relu/sqrt/div stay off their kinks.
fn rand_tensor_off_zero(rng: &mut ChaCha12Rng, shape: &[usize], scale: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let mag = rng.random_range(0.2..scale);
            if rng.random_bool(0.5) {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn rand_shape2(rng: &mut ChaCha12Rng) -> Vec<usize> {
    vec![rng.random_range(1..5usize), rng.random_range(1..6usize)]
}

/// Loss = sum(w ⊙ y) with fixed random w, rebuilt identically on each eval.
fn weighted_loss(
    g: &mut Graph,
    y: NodeId,
    weights: &Tensor,
) -> Result<NodeId, diffcore::DiffError> {
    let w = g.constant(weights.clone())?;
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

fn assert_ok(op: &str, round: usize, report: CheckReport) {
    assert!(
        report.max_rel_err < TOL,
        "{op} round {round}: max rel err {} at {:?}",
        report.max_rel_err,
        report.worst
    );
}

fn check_unary(op: &str, lo: f64, hi: f64, apply: fn(&mut Graph, NodeId) -> Result<NodeId, diffcore::DiffError>) {
    for round in 0..ROUNDS {
        let mut rng = rng_for(op, round);
        let shape = rand_shape2(&mut rng);
        let x = rand_tensor(&mut rng, &shape, lo, hi);
        let w = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let report = check_gradients(
            |g, ids| {
                let y = apply(g, ids[0])?;
                weighted_loss(g, y, &w)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert_ok(op, round, report);
    }
}

#[test]
fn grad_exp() {
    check_unary("exp", -2.0, 2.0, |g, a| g.exp(a));
}

#[test]
fn grad_log() {
    check_unary("log", 0.2, 4.0, |g, a| g.log(a));
}

#[test]
fn grad_softplus() {
    check_unary("softplus", -4.0, 4.0, |g, a| g.softplus(a));
}

#[test]
fn grad_log_softplus() {
    check_unary("log_softplus", -4.0, 4.0, |g, a| g.log_softplus(a));
    // far-negative branch: gradient approaches 1 exactly
    check_unary("log_softplus_neg", -80.0, -40.0, |g, a| g.log_softplus(a));
}

#[test]
fn grad_sigmoid() {
    check_unary("sigmoid", -4.0, 4.0, |g, a| g.sigmoid(a));
}

#[test]
fn grad_tanh() {
    check_unary("tanh", -3.0, 3.0, |g, a| g.tanh(a));
}

#[test]
fn grad_sin() {
    check_unary("sin", -3.0, 3.0, |g, a| g.sin(a));
}

#[test]
fn grad_cos() {
    check_unary("cos", -3.0, 3.0, |g, a| g.cos(a));
}

#[test]
fn grad_sqrt() {
    check_unary("sqrt", 0.3, 4.0, |g, a| g.sqrt(a));
}

#[test]
fn grad_square() {
    check_unary("square", -3.0, 3.0, |g, a| g.square(a));
}

#[test]
fn grad_relu_off_kink() {
    for round in 0..ROUNDS {
        let mut rng = rng_for("relu", round);
        let shape = rand_shape2(&mut rng);
        let x = rand_tensor_off_zero(&mut rng, &shape, 3.0);
        let w = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let report = check_gradients(
            |g, ids| {
                let y = g.relu(ids[0])?;
                weighted_loss(g, y, &w)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert_ok("relu", round, report);
    }
}

#[test]
fn grad_scalar_ops() {
    check_unary("add_scalar", -2.0, 2.0, |g, a| g.add_scalar(a, 0.7));
    check_unary("mul_scalar", -2.0, 2.0, |g, a| g.mul_scalar(a, -1.3));
}

fn check_binary(
    op: &str,
    shapes: fn(&mut ChaCha12Rng) -> (Vec<usize>, Vec<usize>),
    apply: fn(&mut Graph, NodeId, NodeId) -> Result<NodeId, diffcore::DiffError>,
    b_off_zero: bool,
) {
    for round in 0..ROUNDS {
        let mut rng = rng_for(op, round);
        let (sa, sb) = shapes(&mut rng);
        let a = rand_tensor(&mut rng, &sa, -2.0, 2.0);
        let b = if b_off_zero {
            rand_tensor_off_zero(&mut rng, &sb, 2.0)
        } else {
            rand_tensor(&mut rng, &sb, -2.0, 2.0)
        };
        let out_shape = diffcore::broadcast_shape(a.shape(), b.shape()).unwrap();
        let w = rand_tensor(&mut rng, &out_shape, -1.0, 1.0);
        let report = check_gradients(
            |g, ids| {
                let y = apply(g, ids[0], ids[1])?;
                weighted_loss(g, y, &w)
            },
            &[a.clone(), b.clone()],
            STEP,
        )
        .unwrap();
        assert_ok(op, round, report);
    }
}

fn same_shapes(rng: &mut ChaCha12Rng) -> (Vec<usize>, Vec<usize>) {
    let s = rand_shape2(rng);
    (s.clone(), s)
}

fn bias_shapes(rng: &mut ChaCha12Rng) -> (Vec<usize>, Vec<usize>) {
    let s = rand_shape2(rng);
    let b = vec![s[1]];
    (s, b)
}

fn col_shapes(rng: &mut ChaCha12Rng) -> (Vec<usize>, Vec<usize>) {
    let s = rand_shape2(rng);
    let b = vec![s[0], 1];
    (s, b)
}

#[test]
fn grad_add_sub() {
    check_binary("add", same_shapes, |g, a, b| g.add(a, b), false);
    check_binary("sub", same_shapes, |g, a, b| g.sub(a, b), false);
    check_binary("add_bias", bias_shapes, |g, a, b| g.add(a, b), false);
}

#[test]
fn grad_mul() {
    check_binary("mul", same_shapes, |g, a, b| g.mul(a, b), false);
    check_binary("mul_bias", bias_shapes, |g, a, b| g.mul(a, b), false);
    check_binary("mul_col", col_shapes, |g, a, b| g.mul(a, b), false);
}

#[test]
fn grad_div() {
    check_binary("div", same_shapes, |g, a, b| g.div(a, b), true);
    check_binary("div_col", col_shapes, |g, a, b| g.div(a, b), true);
}

#[test]
fn grad_matmul() {
    for round in 0..ROUNDS {
        let mut rng = rng_for("matmul", round);
        let (m, k, n) = (
            rng.random_range(1..4usize),
            rng.random_range(1..5usize),
            rng.random_range(1..4usize),
        );
        let a = rand_tensor(&mut rng, &[m, k], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[k, n], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[m, n], -1.0, 1.0);
        let report = check_gradients(
            |g, ids| {
                let y = g.matmul(ids[0], ids[1])?;
                weighted_loss(g, y, &w)
            },
            &[a.clone(), b.clone()],
            STEP,
        )
        .unwrap();
        assert_ok("matmul", round, report);
    }
}

#[test]
fn grad_transpose_reshape() {
    for round in 0..ROUNDS {
        let mut rng = rng_for("transpose", round);
        let shape = rand_shape2(&mut rng);
        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[shape[1], shape[0]], -1.0, 1.0);
        let report = check_gradients(
            |g, ids| {
                let y = g.transpose(ids[0])?;
                weighted_loss(g, y, &w)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert_ok("transpose", round, report);
    }
    for round in 0..ROUNDS {
        let mut rng = rng_for("reshape", round);
        let shape = rand_shape2(&mut rng);
        let flat = shape.iter().product::<usize>();
        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[flat], -1.0, 1.0);
        let report = check_gradients(
            |g, ids| {
                let y = g.reshape(ids[0], &[flat])?;
                weighted_loss(g, y, &w)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert_ok("reshape", round, report);
    }
}

fn check_reduction(
    op: &str,
    apply: fn(&mut Graph, NodeId, usize, bool) -> Result<NodeId, diffcore::DiffError>,
) {
    for round in 0..ROUNDS {
        let mut rng = rng_for(op, round);
        let shape = rand_shape2(&mut rng);
        let axis = rng.random_range(0..2usize);
        let keep = rng.random_bool(0.5);
        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let mut out_shape = shape.clone();
        if keep {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
            if out_shape.is_empty() {
                out_shape.push(1);
            }
        }
        let w = rand_tensor(&mut rng, &out_shape, -1.0, 1.0);
        let report = check_gradients(
            |g, ids| {
                let y = apply(g, ids[0], axis, keep)?;
                weighted_loss(g, y, &w)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert_ok(op, round, report);
    }
}

#[test]
fn grad_sum_mean_axis() {
    check_reduction("sum_axis", |g, a, ax, k| g.sum_axis(a, ax, k));
    check_reduction("mean_axis", |g, a, ax, k| g.mean_axis(a, ax, k));
}

#[test]
fn grad_max_min_axis() {
    // random values collide with probability zero; ties are pinned in unit tests
    check_reduction("max_axis", |g, a, ax, k| g.max_axis(a, ax, k));
    check_reduction("min_axis", |g, a, ax, k| g.min_axis(a, ax, k));
}

#[test]
fn grad_sum_mean_all() {
    check_unary("sum_all", -2.0, 2.0, |g, a| g.sum_all(a));
    check_unary("mean_all", -2.0, 2.0, |g, a| g.mean_all(a));
}

#[test]
fn grad_concat_slice() {
    for round in 0..ROUNDS {
        let mut rng = rng_for("concat", round);
        let rows = rng.random_range(1..4usize);
        let (c1, c2) = (rng.random_range(1..4usize), rng.random_range(1..4usize));
        let a = rand_tensor(&mut rng, &[rows, c1], -2.0, 2.0);
        let b = rand_tensor(&mut rng, &[rows, c2], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[rows, c1 + c2], -1.0, 1.0);
        let report = check_gradients(
            |g, ids| {
                let y = g.concat(&[ids[0], ids[1]], 1)?;
                weighted_loss(g, y, &w)
            },
            &[a.clone(), b.clone()],
            STEP,
        )
        .unwrap();
        assert_ok("concat", round, report);
    }
    for round in 0..ROUNDS {
        let mut rng = rng_for("slice", round);
        let rows = rng.random_range(2..5usize);
        let cols = rng.random_range(2..6usize);
        let start = rng.random_range(0..cols - 1);
        let end = rng.random_range(start + 1..=cols);
        let x = rand_tensor(&mut rng, &[rows, cols], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[rows, end - start], -1.0, 1.0);
        let report = check_gradients(
            |g, ids| {
                let y = g.slice(ids[0], 1, start, end)?;
                weighted_loss(g, y, &w)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert_ok("slice", round, report);
    }
}

#[test]
fn grad_broadcast_to() {
    for round in 0..ROUNDS {
        let mut rng = rng_for("broadcast_to", round);
        let cols = rng.random_range(1..5usize);
        let rows = rng.random_range(1..5usize);
        let x = rand_tensor(&mut rng, &[cols], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[rows, cols], -1.0, 1.0);
        let report = check_gradients(
            |g, ids| {
                let y = g.broadcast_to(ids[0], &[rows, cols])?;
                weighted_loss(g, y, &w)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert_ok("broadcast_to", round, report);
    }
}

#[test]
fn grad_softmax() {
    check_unary("softmax", -3.0, 3.0, |g, a| g.softmax(a));
}

#[test]
fn grad_layer_norm() {
    // rows of width ≥ 2 so the variance is generically nonzero
    for round in 0..ROUNDS {
        let mut rng = rng_for("layer_norm", round);
        let shape = vec![rng.random_range(1..4usize), rng.random_range(2..6usize)];
        let x = rand_tensor(&mut rng, &shape, -2.0, 2.0);
        let w = rand_tensor(&mut rng, &shape, -1.0, 1.0);
        let report = check_gradients(
            |g, ids| {
                let y = g.layer_norm(ids[0], 1e-5)?;
                weighted_loss(g, y, &w)
            },
            &[x],
            STEP,
        )
        .unwrap();
        assert_ok("layer_norm", round, report);
    }
}

#[test]
fn grad_embedding() {
    for round in 0..ROUNDS {
        let mut rng = rng_for("embedding", round);
        let rows = rng.random_range(2..5usize);
        let cols = rng.random_range(1..4usize);
        let n = rng.random_range(1..6usize);
        let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..rows)).collect();
        let table = rand_tensor(&mut rng, &[rows, cols], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[n, cols], -1.0, 1.0);
        let report = check_gradients(
            |g, ids| {
                let y = g.embedding(ids[0], &indices)?;
                weighted_loss(g, y, &w)
            },
            &[table],
            STEP,
        )
        .unwrap();
        assert_ok("embedding", round, report);
    }
}

#[test]
fn grad_composite_attention_like_block() {
    // matmul -> scale -> softmax -> matmul -> layer_norm, checked end to end
    for round in 0..20 {
        let mut rng = rng_for("composite", round);
        let t = rng.random_range(2..4usize);
        let d = rng.random_range(2..4usize);
        let q = rand_tensor(&mut rng, &[t, d], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[t, d], -1.0, 1.0);
        let v = rand_tensor(&mut rng, &[t, d], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[t, d], -1.0, 1.0);
        let scale = 1.0 / (d as f64).sqrt();
        let report = check_gradients(
            |g, ids| {
                let kt = g.transpose(ids[1])?;
                let scores = g.matmul(ids[0], kt)?;
                let scaled = g.mul_scalar(scores, scale)?;
                let attn = g.softmax(scaled)?;
                let mixed = g.matmul(attn, ids[2])?;
                let normed = g.layer_norm(mixed, 1e-5)?;
                weighted_loss(g, normed, &w)
            },
            &[q, k, v],
            STEP,
        )
        .unwrap();
        assert_ok("composite", round, report);
    }
}
