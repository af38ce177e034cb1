mod common;

use std::collections::BTreeMap;

use asxai::data::synthetic::toy_dataset;
use asxai::proto_model::{ModelConfig, ProtoModel};
use asxai::rank_sensitivity::*;
use asxai::trainer::project_basis_vectors;
use common::*;
use ndarray::Array2;

#[test]
fn singular_values_match_jacobi_on_gram_matrix() {
    let mut r = rng(31);
    for _ in 0..40 {
        let m = Array2::from_shape_vec((7, 7), uniform_vec(&mut r, 49, -1.0, 1.0)).unwrap();
        let gram: Vec<Vec<f64>> = (0..7)
            .map(|i| (0..7).map(|j| (0..7).map(|t| m[[t, i]] * m[[t, j]]).sum()).collect())
            .collect();
        let (vals, _) = jacobi_eigen(&gram);
        let sv = singular_values(m.view()).unwrap();
        for (s, v) in sv.iter().zip(&vals) {
            assert!((s - v.max(0.0).sqrt()).abs() < 1e-9, "{s} vs {}", v.sqrt());
        }
    }
}

#[test]
fn decomposition_reconstructs() {
    let mut r = rng(32);
    let m = Array2::from_shape_vec((7, 7), uniform_vec(&mut r, 49, -1.0, 1.0)).unwrap();
    let d = decompose(m.view()).unwrap();
    let err = (&d.reconstruct() - &m).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(err < 1e-10);
    assert!(d.sigma.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn zero_map_has_rank_zero() {
    assert_eq!(feature_map_rank(Array2::<f64>::zeros((7, 7)).view(), RANK_TOLERANCE).unwrap(), 0);
}

#[test]
fn average_rank_and_scores_follow_planted_groups() {
    let a = ConceptAssignment {
        concepts: vec!["low".into(), "high".into()],
        filters: [(0, "low"), (1, "low"), (2, "high"), (3, "high")]
            .into_iter()
            .map(|(f, c)| (f, c.to_string()))
            .collect(),
        redundant: vec![],
    };
    let mut r = rng(33);
    let ranks: Vec<usize> = [1, 2, 6, 7]
        .iter()
        .map(|&k| {
            let m = planted_rank(&mut r, 7, 7, k);
            feature_map_rank(Array2::from_shape_fn((7, 7), |(i, j)| m[i][j]).view(), RANK_TOLERANCE).unwrap()
        })
        .collect();
    assert_eq!(ranks, vec![1, 2, 6, 7]);
    let avg = concept_average_rank(&ranks, &a).unwrap();
    assert_eq!(avg["low"], 1.5);
    assert_eq!(avg["high"], 6.5);
    let scores = sensitivity_scores(&avg).unwrap();
    assert!(scores["high"] > scores["low"]);
    let w = pcs_weights(&scores);
    assert!(w.values().all(|v| v.is_finite()));
}

#[test]
fn kmeans_separates_planted_directions() {
    let mut r = rng(34);
    let centers = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut points = Vec::new();
    let mut truth = Vec::new();
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..10 {
            let noise = uniform_vec(&mut r, 3, -0.05, 0.05);
            points.push(center.iter().zip(&noise).map(|(a, b)| a + b).collect::<Vec<f64>>());
            truth.push(c);
        }
    }
    let got = spherical_kmeans(&points, 3, 9).unwrap();
    let mut map = BTreeMap::new();
    for (g, t) in got.iter().zip(&truth) {
        assert_eq!(*map.entry(*g).or_insert(*t), *t, "cluster {g} mixes planted groups");
    }
    assert_eq!(got, spherical_kmeans(&points, 3, 9).unwrap());
}

#[test]
fn assignment_needs_projected_bank_and_honours_names() {
    let data = toy_dataset(2, 6, 3).unwrap();
    let cfg = ModelConfig {
        addon_channels: 8,
        per_class: 3,
        ..ModelConfig::default()
    };
    let mut model = ProtoModel::new(&cfg, data.classes.clone(), &mut rng(4)).unwrap();
    assert!(assign_concepts(&model.bank, &[], 2, 0, &[], None).is_err());
    let prov = project_basis_vectors(&mut model, &data).unwrap();
    let names: BTreeMap<String, String> = [("concept_0".to_string(), "stripes".to_string())].into();
    let a = assign_concepts(&model.bank, &prov, 2, 0, &[5], Some(&names)).unwrap();
    assert!(a.concepts.contains(&"stripes".to_string()));
    assert!(!a.filters.contains_key(&5));
    assert_eq!(a.filters.len(), 5);
    assert!(assign_concepts(&model.bank, &prov, 7, 0, &[], None).is_err());
}
