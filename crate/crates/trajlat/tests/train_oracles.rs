//! Training-loop oracles: schedule/step determinism, gradient fidelity of the
//! full slot loss, descent on a tiny run, and checkpoint round-trips.

use std::fs;

use diffcore::check::{check_gradients, DEFAULT_STEP};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use trajlat::data::{generate, GeneratorKind, GeneratorSpec, Trajectory};
use trajlat::latent::Family;
use trajlat::model::{DecoderConfig, EncoderConfig, TrajModel};
use trajlat::pairs::Mode;
use trajlat::train::{
    build_slot_loss, draw_slot_sample, load_checkpoint, plan_slot, run, save_checkpoint,
    stream_rng, train_step, LossConfig, OptimConfig, TrainConfig, TrainState,
};
use trajlat::TrajError;

fn tiny_model(family: Family, seed: u64) -> TrajModel {
    let enc = EncoderConfig {
        layers: 1,
        heads: 2,
        hidden: 8,
        latent: 4,
        fourier_bands: 2,
        ffn: 8,
        max_points: 16,
    };
    let dec = DecoderConfig { blocks: 1, hidden: 8 };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    TrajModel::new(enc, dec, 4, family, 0.05, &mut rng).unwrap()
}

fn tiny_data(count: usize) -> Vec<Trajectory> {
    let spec = GeneratorSpec {
        kind: GeneratorKind::LissajousWalker,
        joints: 2,
        duration: 2.0,
        fps: 25.0,
        noise_std: 0.05,
        flip_prob: 0.0,
    };
    generate(&spec, count, 77).unwrap()
}

fn tiny_cfg() -> TrainConfig {
    TrainConfig {
        batch: 2,
        window_frames: 14,
        loss: LossConfig { samples: 2, triplets_per_anchor: 2, ..LossConfig::default() },
        ..TrainConfig::default()
    }
}

#[test]
fn train_step_deterministic_and_clipped() {
    let data = tiny_data(5);
    let cfg = tiny_cfg();
    let mut a = TrainState::new(tiny_model(Family::Box, 3), 42, "h");
    let mut b = TrainState::new(tiny_model(Family::Box, 3), 42, "h");
    for _ in 0..3 {
        let ma = train_step(&mut a, &data, &cfg).unwrap();
        let mb = train_step(&mut b, &data, &cfg).unwrap();
        assert_eq!(ma, mb, "same seed must give identical metrics");
        assert!(ma.loss_enc.is_finite() && ma.loss_enc >= 0.0);
        assert!(ma.loss_dec.is_finite() && ma.loss_dec > 0.0);
        assert!(ma.grad_norm <= cfg.optim.clip_norm);
    }
    for (pa, pb) in a.model.params.params().iter().zip(b.model.params.params()) {
        assert_eq!(pa.data, pb.data, "{} diverged", pa.name);
    }
    // a different master seed changes the trace
    let mut c = TrainState::new(tiny_model(Family::Box, 3), 43, "h");
    let mc = train_step(&mut c, &data, &cfg).unwrap();
    let mut d = TrainState::new(tiny_model(Family::Box, 3), 42, "h");
    let md = train_step(&mut d, &data, &cfg).unwrap();
    assert_ne!(mc.loss_enc.to_bits(), md.loss_enc.to_bits());
}

#[test]
fn train_step_gaussian_symmetric() {
    let data = tiny_data(4);
    let mut cfg = tiny_cfg();
    cfg.loss.mode = Mode::Symmetric;
    let mut s = TrainState::new(tiny_model(Family::Gaussian, 9), 1, "h");
    let m = train_step(&mut s, &data, &cfg).unwrap();
    assert!(m.loss_enc.is_finite() && m.loss_dec.is_finite());

    // conditional mode with gaussians is a config error
    cfg.loss.mode = Mode::Conditional;
    let mut s = TrainState::new(tiny_model(Family::Gaussian, 9), 1, "h");
    match train_step(&mut s, &data, &cfg) {
        Err(TrajError::Config(_)) => {}
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn batch_larger_than_dataset_errors() {
    let data = tiny_data(1);
    let cfg = tiny_cfg();
    let mut s = TrainState::new(tiny_model(Family::Box, 3), 42, "h");
    assert!(matches!(train_step(&mut s, &data, &cfg), Err(TrajError::Data(_))));
}

/// Finite-difference check of the complete slot loss — encoder, intersection,
/// reparameterized reconstruction, re-encoding, triplet hinges — with respect
/// to every parameter.
#[test]
fn full_loss_gradients_match_finite_differences() {
    let data = tiny_data(3);
    let model = tiny_model(Family::Box, 11);
    let loss = LossConfig { samples: 1, triplets_per_anchor: 1, ..LossConfig::default() };

    let slots: Vec<_> = (0..2)
        .map(|slot| {
            let mut rng = stream_rng(5, 0, 1, slot as u64);
            draw_slot_sample(&model, &data[slot], 14, loss.samples, &mut rng).unwrap()
        })
        .collect();
    let mut rng = stream_rng(5, 0, 2, 0);
    let plan = plan_slot(&model, &loss, &slots, 0, &mut rng).unwrap();
    assert!(!plan.triplets.is_empty());

    let inputs = model.params.tensors().unwrap();
    let report = check_gradients(
        |g, ids| {
            let p = model
                .params
                .bind_with(ids.to_vec())
                .map_err(|e| diffcore::DiffError::Invalid(e.to_string()))?;
            let nodes = build_slot_loss(g, &p, &model, &loss, &plan, 1.0 / 6.0)
                .map_err(|e| diffcore::DiffError::Invalid(e.to_string()))?;
            Ok(nodes.loss)
        },
        &inputs,
        DEFAULT_STEP,
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn tiny_run_descends_on_reconstruction() {
    let data = tiny_data(6);
    let mut cfg = tiny_cfg();
    // compressed schedule so a short run moves
    cfg.optim.warmup = 5;
    cfg.optim.period = 100;
    cfg.optim.lr_max = 3e-3;
    cfg.optim.lr_min = 1e-4;
    cfg.optim.clip_norm = 1.0;
    let mut state = TrainState::new(tiny_model(Family::Box, 21), 4, "h");
    let mut first = None;
    let mut tail = Vec::new();
    run(&mut state, &data, &cfg, 40, |_, m| {
        if m.step == 0 {
            first = Some(m.loss_dec);
        }
        if m.step >= 35 {
            tail.push(m.loss_dec);
        }
        Ok(())
    })
    .unwrap();
    let first = first.unwrap();
    let late = tail.iter().sum::<f64>() / tail.len() as f64;
    assert!(
        late < first,
        "reconstruction did not descend: step 0 {first}, late mean {late}"
    );
    assert_eq!(state.step, 40);
}

#[test]
fn checkpoint_roundtrip_is_bitwise() {
    let data = tiny_data(4);
    let cfg = tiny_cfg();
    let mut state = TrainState::new(tiny_model(Family::Box, 8), 99, "abc123");
    for _ in 0..2 {
        train_step(&mut state, &data, &cfg).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&state, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    let restored = TrainState::restore(tiny_model(Family::Box, 1), loaded, Some("abc123")).unwrap();

    assert_eq!(restored.step, state.step);
    assert_eq!(restored.master_seed, state.master_seed);
    assert_eq!(restored.opt.t, state.opt.t);
    for (a, b) in state.model.params.params().iter().zip(restored.model.params.params()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.shape, b.shape);
        for (x, y) in a.data.iter().zip(&b.data) {
            assert_eq!(x.to_bits(), y.to_bits(), "{}", a.name);
        }
    }
    for (x, y) in state.opt.m.iter().zip(&restored.opt.m) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
    for (x, y) in state.opt.v.iter().zip(&restored.opt.v) {
        assert_eq!(x.to_bits(), y.to_bits());
    }
}

#[test]
fn resume_matches_straight_run() {
    let data = tiny_data(5);
    let cfg = tiny_cfg();

    let mut straight = TrainState::new(tiny_model(Family::Box, 8), 7, "h");
    let mut straight_metrics = Vec::new();
    run(&mut straight, &data, &cfg, 8, |_, m| {
        straight_metrics.push(*m);
        Ok(())
    })
    .unwrap();

    let mut head = TrainState::new(tiny_model(Family::Box, 8), 7, "h");
    run(&mut head, &data, &cfg, 4, |_, _| Ok(())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&head, dir.path()).unwrap();

    let loaded = load_checkpoint(dir.path()).unwrap();
    let mut resumed = TrainState::restore(tiny_model(Family::Box, 123), loaded, Some("h")).unwrap();
    assert_eq!(resumed.step, 4);
    let mut resumed_metrics = Vec::new();
    run(&mut resumed, &data, &cfg, 8, |_, m| {
        resumed_metrics.push(*m);
        Ok(())
    })
    .unwrap();

    assert_eq!(resumed_metrics.len(), 4);
    for (a, b) in straight_metrics[4..].iter().zip(&resumed_metrics) {
        assert_eq!(a.step, b.step);
        assert!((a.loss_enc - b.loss_enc).abs() < 1e-10);
        assert!((a.loss_dec - b.loss_dec).abs() < 1e-10);
        assert!((a.grad_norm - b.grad_norm).abs() < 1e-10);
        assert_eq!(a.lr, b.lr);
    }
    for (a, b) in straight.model.params.params().iter().zip(resumed.model.params.params()) {
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-10, "{} drifted after resume", a.name);
        }
    }
}

#[test]
fn corrupt_or_mismatched_checkpoints_are_rejected() {
    let data = tiny_data(4);
    let cfg = tiny_cfg();
    let mut state = TrainState::new(tiny_model(Family::Box, 8), 1, "hash-a");
    train_step(&mut state, &data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&state, dir.path()).unwrap();

    // config hash mismatch on restore
    let loaded = load_checkpoint(dir.path()).unwrap();
    match TrainState::restore(tiny_model(Family::Box, 1), loaded, Some("hash-b")) {
        Err(TrajError::Checkpoint(msg)) => assert!(msg.contains("config hash")),
        other => panic!("expected checkpoint error, got {:?}", other.map(|_| ())),
    }

    // version mismatch
    let manifest_path = dir.path().join("manifest.json");
    let manifest = fs::read_to_string(&manifest_path).unwrap();
    fs::write(&manifest_path, manifest.replace("\"version\": 1", "\"version\": 2")).unwrap();
    match load_checkpoint(dir.path()) {
        Err(TrajError::Checkpoint(msg)) => assert!(msg.contains("version")),
        other => panic!("expected version error, got {:?}", other.map(|_| ())),
    }
    fs::write(&manifest_path, manifest).unwrap();

    // truncated archive → checksum error, and restoring is impossible so no
    // state is touched
    let bin_path = dir.path().join("tensors.bin");
    let bytes = fs::read(&bin_path).unwrap();
    fs::write(&bin_path, &bytes[..bytes.len() - 8]).unwrap();
    match load_checkpoint(dir.path()) {
        Err(TrajError::Checkpoint(msg)) => assert!(msg.contains("checksum")),
        other => panic!("expected checksum error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn re_encoding_ablation_shrinks_instance_set() {
    let data = tiny_data(4);
    let model = tiny_model(Family::Box, 2);
    let loss = LossConfig { re_encoding_enabled: false, ..LossConfig::default() };
    let slots: Vec<_> = (0..2)
        .map(|slot| {
            let mut rng = stream_rng(1, 0, 1, slot as u64);
            draw_slot_sample(&model, &data[slot], 14, loss.samples, &mut rng).unwrap()
        })
        .collect();
    let mut rng = stream_rng(1, 0, 2, 0);
    let plan = plan_slot(&model, &loss, &slots, 0, &mut rng).unwrap();
    assert!(plan.re_segments.is_empty());
    assert_eq!(plan.instances.len(), 5); // P, F, C, I + one peer
    assert!(!plan.triplets.is_empty(), "peers alone must still yield negatives");

    // and training still steps
    let cfg = TrainConfig { batch: 2, window_frames: 14, loss, ..TrainConfig::default() };
    let mut s = TrainState::new(tiny_model(Family::Box, 2), 5, "h");
    let m = train_step(&mut s, &data, &cfg).unwrap();
    assert!(m.loss_enc.is_finite());
}
