use asxai::explanation::{assessment_band, semantic_probability, Assessment, ConceptDistribution};
use asxai::feature_viz::tv_norm;
use asxai::losses::orthogonality_loss_grad;
use asxai::proto_model::BasisBank;
use asxai::rank_sensitivity::{feature_map_rank, RANK_TOLERANCE};
use ndarray::{Array2, Array3};
use proptest::prelude::*;

proptest! {
    #[test]
    fn rank_never_exceeds_min_side(v in prop::collection::vec(-5.0f64..5.0, 35)) {
        let m = Array2::from_shape_vec((5, 7), v).unwrap();
        prop_assert!(feature_map_rank(m.view(), RANK_TOLERANCE).unwrap() <= 5);
    }

    #[test]
    fn semantic_probability_stays_in_unit_interval(mean in -2.0f64..2.0, std in 0.05f64..3.0, a in -10.0f64..10.0) {
        let d = ConceptDistribution { mean, std, a_min: mean - std, a_max: mean + 2.0 * std };
        let p = semantic_probability(a, &d);
        prop_assert!((0.0..=1.0).contains(&p));
    }

    #[test]
    fn assessment_band_is_monotone(a in -1.0f64..2.0, b in -1.0f64..2.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(assessment_band(lo) <= assessment_band(hi));
        prop_assert_eq!(assessment_band(hi.max(0.5)), Assessment::Sure);
    }

    #[test]
    fn orthogonality_is_non_negative(v in prop::collection::vec(-1.0f64..1.0, 24)) {
        let bank = BasisBank::new(Array3::from_shape_vec((2, 3, 4), v).unwrap(), vec!["a".into(), "b".into()]).unwrap();
        prop_assert!(orthogonality_loss_grad(&bank).0 >= 0.0);
    }

    #[test]
    fn tv_is_shift_invariant(v in prop::collection::vec(-1.0f64..1.0, 18), c in -3.0f64..3.0) {
        let z = Array3::from_shape_vec((2, 3, 3), v).unwrap();
        prop_assert!((tv_norm(&z) - tv_norm(&(&z + c))).abs() < 1e-12);
    }
}
