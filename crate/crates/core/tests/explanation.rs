mod common;

use std::collections::BTreeMap;

use asxai::explanation::*;
use asxai::proto_model::ClassifierHead;
use common::*;
use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn fits_a_normal_sample() {
    let mut r = rng(61);
    let n = Normal::new(5.0, 2.0).unwrap();
    let v: Vec<f64> = (0..20_000).map(|_| n.sample(&mut r)).collect();
    let d = fit_concept_distribution(&v).unwrap();
    assert!((d.mean - 5.0).abs() < 0.05);
    assert!((d.std - 2.0).abs() < 0.05);
    assert!(fit_concept_distribution(&[1.0; 30]).is_err());
    assert!(fit_concept_distribution(&v[..10]).is_err());
}

#[test]
fn semantic_probability_is_monotone() {
    let d = ConceptDistribution {
        mean: 0.2,
        std: 0.3,
        a_min: -0.5,
        a_max: 0.9,
    };
    let mut prev = -1.0;
    for i in 0..=200 {
        let a = -0.7 + 1.8 * i as f64 / 200.0;
        let p = semantic_probability(a, &d);
        assert!((0.0..=1.0).contains(&p));
        assert!(p >= prev);
        prev = p;
    }
    assert_eq!(semantic_probability(f64::NAN, &d), 0.0);
}

#[test]
fn deltas_treat_missing_concepts_as_zero() {
    let a: BTreeMap<String, f64> = [("x".to_string(), 0.4)].into();
    let b: BTreeMap<String, f64> = [("y".to_string(), 0.1)].into();
    let d = compute_deltas(&[a, b]).unwrap();
    assert_eq!(d.delta_pcs["x"], 0.4);
    assert_eq!(d.delta_pcs["y"], -0.1);
    assert_eq!(d.delta_max_pcs, 0.4);
    assert_eq!(d.pcs_max, 0.4);
    assert!(compute_deltas(&[BTreeMap::new()]).is_err());
}

#[test]
fn phrases_follow_descending_pcs() {
    let pcs: BTreeMap<String, f64> = [("a".to_string(), 0.2), ("b".to_string(), 0.9), ("c".to_string(), 0.5)].into();
    let d = compute_deltas(&[pcs.clone(), BTreeMap::new()]).unwrap();
    let e = generate_explanation("P", "O", &pcs, &d, &Templates::default());
    let order: Vec<&str> = e.phrases.iter().map(|p| p.concept.as_str()).collect();
    assert_eq!(order, vec!["b", "c", "a"]);
    for p in &e.phrases {
        assert_eq!(p.semanteme, semanteme_band(p.delta_pcs));
        assert_eq!(p.position, position_word(d.pcs_max));
    }
    assert_eq!(e.assessment, assessment_band(d.delta_max_pcs));
}

#[test]
fn templates_round_trip_through_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.json");
    let t = Templates::default();
    t.save(&path).unwrap();
    assert_eq!(Templates::load(&path).unwrap(), t);
}

#[test]
fn global_similarity_is_head_times_pooled() {
    let mut r = rng(62);
    let head = ClassifierHead {
        weights: Array2::from_shape_vec((3, 6), uniform_vec(&mut r, 18, -0.5, 1.0)).unwrap(),
    };
    let pooled = Array1::from(uniform_vec(&mut r, 6, -1.0, 1.0));
    let g = global_similarity_histogram(pooled.view(), &head).unwrap();
    for c in 0..3 {
        let want: f64 = (0..6).map(|k| head.weights[[c, k]] * pooled[k]).sum();
        assert!((g[c] - want).abs() < 1e-12);
    }
    assert!(global_similarity_histogram(Array1::zeros(5).view(), &head).is_err());
    let act = concept_activation(pooled.view(), &head, 1, &[0, 4]);
    assert!((act - (head.weights[[1, 0]] * pooled[0] + head.weights[[1, 4]] * pooled[4]) / 2.0).abs() < 1e-12);
}

#[test]
fn hsv_similarity_of_identical_regions_is_one() {
    let mut r = rng(63);
    let img = RgbImage::from_fn(24, 24, |_, _| Rgb([r.random(), r.random(), r.random()]));
    assert!((hsv_similarity(&img, &img).unwrap() - 1.0).abs() < 1e-9);
    let inverted = RgbImage::from_fn(24, 24, |x, y| {
        let Rgb([a, b, c]) = *img.get_pixel(x, y);
        Rgb([255 - a, 255 - b, 255 - c])
    });
    assert!(hsv_similarity(&img, &inverted).unwrap() < 0.5);
    assert!(hsv_similarity(&img, &RgbImage::new(8, 8)).is_err());
}
