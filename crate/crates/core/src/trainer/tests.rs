use super::*;
use crate::dataset::{generate_synthetic, SyntheticConfig};

fn tiny() -> (TrainConfig, CrossModalDataset) {
    let ds = generate_synthetic(&SyntheticConfig {
        num_classes: 6,
        per_class_per_modality: 6,
        d_in: 8,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 8,
        hidden: 16,
        embed_dim: 8,
        semantic_dim: 4,
        num_unseen: 2,
        teacher_epochs: 1,
        eval_ks: vec![5],
        enable_t_hcr: true,
        ..TrainConfig::default()
    };
    (cfg, ds)
}

#[test]
fn run_produces_history_and_reports() {
    let (cfg, ds) = tiny();
    let out = run_training(&cfg, &ds).unwrap();
    assert_eq!(out.log.len(), 2);
    assert_eq!(out.checkpoint.state.epoch, 2);
    for m in &out.log {
        assert!(m.total.is_finite() && m.cls > 0.0 && m.se > 0.0 && m.s_hcr > 0.0 && m.t_hcr > 0.0);
        assert!(m.inter.is_finite());
    }
    // 2 unseen classes x 6 sketches
    assert_eq!(out.real.num_queries(), 12);
    assert!((0.0..=1.0).contains(&out.real.map_all));
    assert!((0.0..=1.0).contains(&out.binary.map_all));
}

#[test]
fn disabled_terms_report_zero() {
    let (mut cfg, ds) = tiny();
    cfg.enable_in = false;
    cfg.enable_s_hcr = false;
    cfg.enable_t_hcr = false;
    cfg.enable_se = false;
    let out = run_training(&cfg, &ds).unwrap();
    let m = out.log[0];
    assert_eq!((m.se, m.inter, m.s_hcr, m.t_hcr), (0.0, 0.0, 0.0, 0.0));
    assert_eq!(m.total, m.cls);
}

#[test]
fn training_is_bitwise_deterministic() {
    let (cfg, ds) = tiny();
    let a = run_training(&cfg, &ds).unwrap();
    let b = run_training(&cfg, &ds).unwrap();
    assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    assert_eq!(a.real.to_json(), b.real.to_json());
}

#[test]
fn different_seed_changes_weights() {
    let (cfg, ds) = tiny();
    let a = run_training(&cfg, &ds).unwrap();
    let b = run_training(&TrainConfig { seed: 2, ..cfg }, &ds).unwrap();
    assert_ne!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
}

#[test]
fn keys_move_and_stay_unit() {
    let (cfg, ds) = tiny();
    let mut st = init_state(&cfg, &ds).unwrap();
    let before = st.dictionary.keys().clone();
    train_epoch(&mut st, &ds, &cfg).unwrap();
    let keys = st.dictionary.keys();
    assert_ne!(keys, &before);
    for i in 0..keys.rows() {
        let n: f64 = keys.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
    }
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let (cfg, ds) = tiny();
    let out = run_training(&cfg, &ds).unwrap();
    let bytes = out.checkpoint.to_bytes();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, out.checkpoint);
    assert_eq!(back.to_bytes(), bytes);
    let (r, _) = evaluate_zero_shot(&back.state.model, &ds, &back.state.split, &cfg.eval_ks).unwrap();
    assert_eq!(r.to_json(), out.real.to_json());
}

#[test]
fn checkpoint_rejects_corruption() {
    let (cfg, ds) = tiny();
    let bytes = run_training(&cfg, &ds).unwrap().checkpoint.to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]), Err(OanError::Format { .. })));
    let mut v = bytes.clone();
    v[5] = b'9';
    assert!(matches!(Checkpoint::from_bytes(&v), Err(OanError::Version { .. })));
    let mut v = bytes.clone();
    v.push(0);
    assert!(matches!(Checkpoint::from_bytes(&v), Err(OanError::Format { .. })));
    assert!(matches!(Checkpoint::from_bytes(b"nope"), Err(OanError::Format { offset: 0, .. })));
}

#[test]
fn semantic_labels_in_range_and_seeded() {
    let (_, ds) = tiny();
    let a = semantic_labels(&ds, 4, 9);
    assert_eq!(a.len(), 6);
    assert!(a.iter().all(|&l| l < 4));
    assert_eq!(a, semantic_labels(&ds, 4, 9));
}

#[test]
fn invalid_config_is_rejected() {
    let (cfg, ds) = tiny();
    let bad = TrainConfig { batch_size: 1, ..cfg };
    assert!(matches!(run_training(&bad, &ds), Err(OanError::Config(_))));
}

#[test]
fn nan_input_surfaces_numeric_error() {
    let (cfg, ds) = tiny();
    let mut st = init_state(&cfg, &ds).unwrap();
    let ids = ds.select(&st.split.seen()[..1], None);
    let mut inst = ds.instances().to_vec();
    inst[ids[0]].features[0] = f64::NAN;
    let bad = CrossModalDataset::new(inst, ds.num_classes()).unwrap();
    let before = st.model.clone();
    let r = train_step(&mut st, &bad, &cfg, &ids[..2]);
    assert!(matches!(r, Err(OanError::Numeric(_))), "{r:?}");
    assert_eq!(st.model, before);
}
