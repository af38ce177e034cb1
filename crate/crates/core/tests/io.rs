mod common;

use asxai::checkpoint::{load_checkpoint, verify_dir, META_FILE};
use asxai::config::RunConfig;
use asxai::data::{augment, ingest_dataset, resize_to_input, AugmentConfig, Dataset};
use asxai::data::synthetic::{toy_image, write_toy_dataset};
use asxai::pipeline;

#[test]
fn ingests_folders_and_skips_corrupt_files() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_dataset(dir.path(), 2, 3, 1).unwrap();
    let first = std::fs::read_dir(dir.path()).unwrap().next().unwrap().unwrap().path();
    std::fs::write(first.join("broken.png"), b"not an image").unwrap();
    let aug = AugmentConfig::default();
    let m = ingest_dataset(dir.path(), &aug).unwrap();
    assert_eq!(m.classes.len(), 2);
    assert_eq!(m.num_images(), 6);
    assert_eq!(m.skipped.len(), 1);
    assert!(m.skipped[0].path.ends_with("broken.png"));
    assert_eq!(m.hash(), ingest_dataset(dir.path(), &aug).unwrap().hash());
    let data = Dataset::load(&m, &aug, 0).unwrap();
    assert_eq!(data.class_counts(), vec![3, 3]);
    assert_eq!(data.tensor(0).dim(), (3, 224, 224));
}

#[test]
fn ingests_a_csv_manifest() {
    let dir = tempfile::tempdir().unwrap();
    for (i, c) in [0, 1, 1].iter().enumerate() {
        toy_image(*c, 2, i as u64).save(dir.path().join(format!("{i}.png"))).unwrap();
    }
    std::fs::write(dir.path().join("manifest.csv"), "path,label\n0.png,cat\n1.png,dog\n2.png,dog\n").unwrap();
    let m = ingest_dataset(dir.path(), &AugmentConfig::default()).unwrap();
    let names: Vec<&str> = m.classes.iter().map(|c| c.name.as_str()).collect();
    assert_eq!(names, vec!["cat", "dog"]);
    assert_eq!(m.num_images(), 3);
}

#[test]
fn augmentation_is_seeded_and_sized() {
    let img = toy_image(1, 2, 4);
    let off = AugmentConfig::default();
    assert_eq!(augment(&img, &off, 1), resize_to_input(&img));
    let on = AugmentConfig {
        enabled: true,
        ..AugmentConfig::default()
    };
    let a = augment(&img, &on, 5);
    assert_eq!(a.dimensions(), (224, 224));
    assert_eq!(a, augment(&img, &on, 5));
    assert_ne!(a, augment(&img, &on, 6));
}

#[test]
fn config_hash_ignores_format_and_key_order() {
    let a = RunConfig::from_toml("seed = 3\n[data.toy]\nclasses = 2\nper_class = 4\n").unwrap();
    let b = RunConfig::from_json(r#"{"data": {"toy": {"per_class": 4, "classes": 2}}, "seed": 3}"#).unwrap();
    assert_eq!(a.hash(), b.hash());
    let c = RunConfig::from_toml("seed = 4\n[data.toy]\nclasses = 2\nper_class = 4\n").unwrap();
    assert_ne!(a.hash(), c.hash());
    assert!(RunConfig::from_toml("seed = 3\nbogus = 1\n").is_err());
    let back = RunConfig::from_toml(&a.to_toml().unwrap()).unwrap();
    assert_eq!(back.hash(), a.hash());
}

#[test]
fn checkpoint_round_trips_and_verifies() {
    let out = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml(
        "seed = 2\n[data.toy]\nclasses = 2\nper_class = 20\n[model]\naddon_channels = 8\nper_class = 3\n\
         [train]\nlearning_rate = 0.01\nmax_cycles = 1\njoint_epochs = 1\nfc_epochs = 2\nbatch_size = 8\n",
    )
    .unwrap();
    pipeline::run_train(&cfg, out.path()).unwrap();
    let ckpt = load_checkpoint(out.path()).unwrap();
    assert_eq!(ckpt.config_hash, cfg.hash());
    assert_eq!(ckpt.provenance.len(), 6);
    assert!(ckpt.concepts.is_some());
    for (a, p) in ckpt.provenance.iter().enumerate() {
        assert_eq!(p.class, a / 3);
    }
    assert!(verify_dir(out.path()).unwrap().is_clean());

    let meta = out.path().join(META_FILE);
    let text = std::fs::read_to_string(&meta).unwrap();
    std::fs::write(&meta, text.replace("\"cycles\"", "\"cycles\" ")).unwrap();
    let report = verify_dir(out.path()).unwrap();
    assert_eq!(report.modified, vec![META_FILE.to_string()]);
    assert!(!report.is_clean());
}
