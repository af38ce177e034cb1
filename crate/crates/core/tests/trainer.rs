use asxai::data::synthetic::toy_dataset;
use asxai::data::Dataset;
use asxai::losses::orthogonality_per_class;
use asxai::proto_model::{cosine, stack_images, ModelConfig, ProtoModel, HEAD_MAX, HEAD_MIN};
use asxai::trainer::{project_basis_vectors, train, Stage, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model(data: &Dataset, per_class: usize, seed: u64) -> ProtoModel {
    let cfg = ModelConfig {
        addon_channels: 16,
        per_class,
        ..Default::default()
    };
    ProtoModel::new(&cfg, data.classes.clone(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn fast_cfg() -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 4,
        fc_epochs: 10,
        seed: 5,
        ..Default::default()
    }
}

/// All patches of every image, in (image id, row, col) order.
fn all_patches(model: &ProtoModel, data: &Dataset) -> Vec<Vec<Vec<f64>>> {
    (0..data.len())
        .map(|i| {
            let batch = stack_images(&[data.tensor(i)]).unwrap();
            let f = model.extract_features(&batch).unwrap();
            let m = f.patch_matrix(0);
            m.outer_iter().map(|r| r.to_vec()).collect()
        })
        .collect()
}

#[test]
fn warmup_runs_n1_epochs_with_frozen_backbone() {
    let data = toy_dataset(2, 100, 7).unwrap();
    let mut model = small_model(&data, 8, 1);
    let before = model.backbone.checksum();
    let cfg = TrainConfig { learning_rate: 1e-2, seed: 3, ..Default::default() };
    let mut t = Trainer::new(&data, cfg).unwrap();
    t.warmup_stage(&mut model).unwrap();
    let recs: Vec<_> = t.log().stage_records(Stage::Warmup).cloned().collect();
    assert_eq!(recs.len(), 2);
    assert_eq!(model.backbone.checksum(), before);
    assert!(recs[1].total <= recs[0].total, "{} > {}", recs[1].total, recs[0].total);
}

#[test]
fn joint_stage_logs_every_term_and_reduces_orthogonality() {
    let data = toy_dataset(2, 12, 2).unwrap();
    let mut model = small_model(&data, 4, 2);
    let mut t = Trainer::new(&data, fast_cfg()).unwrap();
    t.warmup_stage(&mut model).unwrap();
    t.joint_stage(&mut model).unwrap();
    let recs: Vec<_> = t.log().stage_records(Stage::Joint).cloned().collect();
    assert_eq!(recs.len(), 10);
    for r in &recs {
        for v in [r.ce, r.l_orth, r.l_ss, r.l_sep, r.l_agg, r.total] {
            assert!(v.is_finite());
        }
    }
    assert!(recs[9].l_orth < recs[0].l_orth);
}

#[test]
fn non_finite_loss_aborts() {
    let data = toy_dataset(2, 4, 3).unwrap();
    let mut model = small_model(&data, 2, 3);
    model.bank.vectors[[0, 0, 0]] = f64::NAN;
    let mut t = Trainer::new(&data, fast_cfg()).unwrap();
    let err = t.joint_stage(&mut model).unwrap_err();
    assert_eq!(err.kind(), "divergence");
}

#[test]
fn empty_dataset_is_rejected() {
    let data = Dataset::new(vec!["a".into(), "b".into()], vec![]).unwrap();
    let err = Trainer::new(&data, TrainConfig::default()).err().unwrap();
    assert_eq!(err.kind(), "validation");
}

#[test]
fn invalid_config_is_rejected() {
    let data = toy_dataset(2, 2, 1).unwrap();
    for cfg in [
        TrainConfig { warmup_epochs: 0, ..Default::default() },
        TrainConfig { joint_epochs: 0, ..Default::default() },
        TrainConfig { learning_rate: 0.0, ..Default::default() },
    ] {
        assert!(Trainer::new(&data, cfg).is_err());
    }
}

#[test]
fn projection_matches_exhaustive_argmax() {
    let data = toy_dataset(2, 2, 11).unwrap();
    let mut model = small_model(&data, 3, 4);
    let original = model.bank.clone();
    let patches = all_patches(&model, &data);
    let records = project_basis_vectors(&mut model, &data).unwrap();
    assert_eq!(records.len(), 6);
    for c in 0..2 {
        for j in 0..3 {
            let a = original.vectors.index_axis(ndarray::Axis(0), c).row(j).to_owned();
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for (i, img) in patches.iter().enumerate() {
                if data.samples[i].label != c {
                    continue;
                }
                for (pos, p) in img.iter().enumerate() {
                    let s = cosine(ndarray::ArrayView1::from(p.as_slice()), a.view());
                    if s > best.0 {
                        best = (s, data.samples[i].id, pos);
                    }
                }
            }
            let rec = records.iter().find(|r| r.class == c && r.index == j).unwrap();
            assert_eq!((rec.image_id, rec.row * 7 + rec.col), (best.1, best.2));
            let got = model.bank.vectors.index_axis(ndarray::Axis(0), c).row(j).to_owned();
            let expect = &patches[best.1][best.2];
            let err = got.iter().zip(expect).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6);
            assert_eq!(data.samples[rec.image_id].label, c);
        }
    }
}

#[test]
fn projection_is_idempotent_and_records_round_trip() {
    let data = toy_dataset(2, 3, 12).unwrap();
    let mut model = small_model(&data, 3, 6);
    let records = project_basis_vectors(&mut model, &data).unwrap();
    let once = model.bank.clone();
    project_basis_vectors(&mut model, &data).unwrap();
    assert_eq!(model.bank, once);
    let patches = all_patches(&model, &data);
    for r in &records {
        let v = once.vectors.index_axis(ndarray::Axis(0), r.class).row(r.index).to_owned();
        let p = &patches[r.image_id][r.row * 7 + r.col];
        for (x, y) in v.iter().zip(p) {
            assert!((x - y).abs() < 1e-6);
        }
        assert!((cosine(v.view(), ndarray::ArrayView1::from(p.as_slice())) - 1.0).abs() < 1e-9);
    }
}

#[test]
fn projection_requires_images_of_every_class() {
    let full = toy_dataset(2, 2, 1).unwrap();
    let only_first = Dataset {
        classes: full.classes.clone(),
        samples: full.samples.iter().filter(|s| s.label == 0).cloned().collect(),
    };
    let mut model = small_model(&full, 2, 1);
    let err = project_basis_vectors(&mut model, &only_first).unwrap_err();
    assert_eq!(err.kind(), "validation");
}

#[test]
fn fc_stage_touches_only_the_head() {
    let data = toy_dataset(2, 8, 4).unwrap();
    let mut model = small_model(&data, 3, 7);
    let (bb, ad, bank, head) = (
        model.backbone.checksum(),
        model.addon.checksum(),
        model.bank_checksum(),
        model.head_checksum(),
    );
    let mut t = Trainer::new(&data, TrainConfig { fc_epochs: 25, ..fast_cfg() }).unwrap();
    t.fc_convex_stage(&mut model).unwrap();
    assert_eq!(model.backbone.checksum(), bb);
    assert_eq!(model.addon.checksum(), ad);
    assert_eq!(model.bank_checksum(), bank);
    assert_ne!(model.head_checksum(), head);
    assert!(model.head.weights.iter().all(|&w| (HEAD_MIN..=HEAD_MAX).contains(&w)));
    let ce: Vec<f64> = t.log().stage_records(Stage::Fc).map(|r| r.ce).collect();
    assert_eq!(ce.len(), 25);
    for w in ce.windows(2) {
        assert!(w[1] <= w[0], "{ce:?}");
    }
}

#[test]
fn warmup_and_joint_leave_backbone_and_head_alone() {
    let data = toy_dataset(2, 4, 9).unwrap();
    let mut model = small_model(&data, 2, 9);
    let (bb, head) = (model.backbone.checksum(), model.head_checksum());
    let mut t = Trainer::new(&data, fast_cfg()).unwrap();
    t.warmup_stage(&mut model).unwrap();
    t.joint_stage(&mut model).unwrap();
    assert_eq!(model.backbone.checksum(), bb);
    assert_eq!(model.head_checksum(), head);
}

#[test]
fn unfrozen_backbone_is_updated_in_joint_stage() {
    let data = toy_dataset(2, 2, 9).unwrap();
    let mut model = small_model(&data, 2, 9);
    let bb = model.backbone.checksum();
    let cfg = TrainConfig { freeze_backbone: false, joint_epochs: 1, ..fast_cfg() };
    let mut t = Trainer::new(&data, cfg).unwrap();
    t.warmup_stage(&mut model).unwrap();
    assert_eq!(model.backbone.checksum(), bb);
    t.joint_stage(&mut model).unwrap();
    assert_ne!(model.backbone.checksum(), bb);
}

#[test]
fn training_is_deterministic_and_ends_projected() {
    let data = toy_dataset(2, 6, 21).unwrap();
    let cfg = TrainConfig { max_cycles: 2, ..fast_cfg() };
    let run = || {
        let mut model = small_model(&data, 2, 21);
        let log = train(&mut model, &data, &cfg).unwrap();
        (model, log)
    };
    let (m1, l1) = run();
    let (m2, l2) = run();
    assert_eq!(l1, l2);
    assert_eq!(l1.to_jsonl().unwrap(), l2.to_jsonl().unwrap());
    assert_eq!(m1.bank, m2.bank);
    assert!(l1.cycles >= 1 && l1.cycles <= 2);

    let patches = all_patches(&m1, &data);
    for r in &l1.provenance {
        let v = m1.bank.vectors.index_axis(ndarray::Axis(0), r.class).row(r.index).to_owned();
        let p = &patches[r.image_id][r.row * 7 + r.col];
        assert!(v.iter().zip(p).all(|(x, y)| (x - y).abs() < 1e-6));
    }
    assert!(orthogonality_per_class(&m1.bank).iter().all(|v| v.is_finite()));
}

#[test]
fn log_lines_have_the_documented_fields() {
    let data = toy_dataset(2, 2, 1).unwrap();
    let mut model = small_model(&data, 2, 1);
    let mut t = Trainer::new(&data, fast_cfg()).unwrap();
    t.warmup_stage(&mut model).unwrap();
    let text = t.log().to_jsonl().unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
    for key in ["stage", "epoch", "ce", "l_orth", "l_ss", "l_sep", "l_agg", "total", "accuracy"] {
        assert!(first.get(key).is_some(), "missing {key}");
    }
    assert_eq!(first["stage"], "warmup");
}
