//! Property tests for the weighting invariants: transform monotonicity and
//! endpoint exactness, threshold equivalence between the weight and distance
//! scales, truncation idempotence, Mahalanobis affine invariance and
//! similarity-density invariance to categorical ordering.

use ipdborrow::data::{CovariateSchema, SubjectRecord};
use ipdborrow::weighting::{
    apply_truncation, fit_mahalanobis_reference, fit_similarity_model, similarity_density,
    transform_scores, ScoreOrientation, SubjectKey, TransformContext,
};
use proptest::prelude::*;

fn keyed(scores: &[f64]) -> Vec<(SubjectKey, f64)> {
    scores
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            (
                SubjectKey {
                    study_id: "s".to_string(),
                    index: i,
                },
                s,
            )
        })
        .collect()
}

proptest! {
    #[test]
    fn distance_weights_are_antitone(scores in prop::collection::vec(0.0f64..100.0, 2..40)) {
        let (assignments, context) =
            transform_scores(&keyed(&scores), ScoreOrientation::DistanceLike).unwrap();
        let distinct = context.pooled_max > context.pooled_min;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] < scores[j] {
                    if distinct {
                        prop_assert!(assignments[i].weight > assignments[j].weight);
                    } else {
                        prop_assert!(assignments[i].weight >= assignments[j].weight);
                    }
                }
            }
        }
    }

    #[test]
    fn similarity_weights_are_monotone(scores in prop::collection::vec(0.0f64..5.0, 2..40)) {
        let (assignments, context) =
            transform_scores(&keyed(&scores), ScoreOrientation::SimilarityLike).unwrap();
        let distinct = context.pooled_max > context.pooled_min;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if scores[i] < scores[j] && distinct {
                    prop_assert!(assignments[i].weight < assignments[j].weight);
                }
            }
        }
    }

    #[test]
    fn pooled_extrema_map_to_exact_endpoints(
        scores in prop::collection::vec(-50.0f64..50.0, 2..60)
    ) {
        let (assignments, context) =
            transform_scores(&keyed(&scores), ScoreOrientation::DistanceLike).unwrap();
        if context.pooled_max > context.pooled_min {
            for a in &assignments {
                if a.raw_score == context.pooled_min {
                    prop_assert_eq!(a.weight, 1.0);
                }
                if a.raw_score == context.pooled_max {
                    prop_assert_eq!(a.weight, 0.0);
                }
            }
        }
    }

    #[test]
    fn weight_threshold_equals_distance_threshold(
        scores in prop::collection::vec(0.0f64..100.0, 3..60),
        omega0 in 0.01f64..0.99,
    ) {
        // Selecting on weights above omega0 is the same set as selecting on
        // distances below G^-1(1 - omega0).
        let (assignments, context) =
            transform_scores(&keyed(&scores), ScoreOrientation::DistanceLike).unwrap();
        let delta0 = context.g_inverse(1.0 - omega0);
        let by_weight: Vec<usize> = assignments
            .iter()
            .filter(|a| a.weight > omega0)
            .map(|a| a.subject.index)
            .collect();
        let by_distance: Vec<usize> = assignments
            .iter()
            .filter(|a| a.raw_score < delta0)
            .map(|a| a.subject.index)
            .collect();
        prop_assert_eq!(by_weight, by_distance);
    }

    #[test]
    fn truncation_is_idempotent(
        scores in prop::collection::vec(0.0f64..10.0, 2..40),
        rho in 0.0f64..1.0,
    ) {
        let (mut assignments, _) =
            transform_scores(&keyed(&scores), ScoreOrientation::DistanceLike).unwrap();
        apply_truncation(&mut assignments, rho);
        let once = assignments.clone();
        apply_truncation(&mut assignments, rho);
        prop_assert_eq!(&assignments, &once);
        for a in &assignments {
            prop_assert!(a.truncated_weight == 0.0 || a.truncated_weight > rho);
            if a.weight > rho {
                prop_assert_eq!(a.truncated_weight, a.weight);
            }
        }
    }
}

fn continuous_record(study: &str, values: &[f64]) -> SubjectRecord {
    SubjectRecord {
        study_id: study.to_string(),
        arm: 0,
        outcome: 0.0,
        continuous_covariates: values.to_vec(),
        categorical_covariates: vec![],
        event: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn mahalanobis_distance_is_affine_invariant(
        raw in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 8..20),
        map in prop::collection::vec(-0.2f64..0.2, 9),
        shift in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let dim = 3;
        let schema = CovariateSchema::continuous_only(&["a", "b", "c"])
            .with_outcome_in_similarity(false);
        let records: Vec<SubjectRecord> = raw
            .iter()
            .map(|v| continuous_record("cur", v))
            .collect();
        let reference = match fit_mahalanobis_reference(&records, &schema, 0.0) {
            Ok(r) => r,
            Err(_) => return Ok(()), // degenerate draw, skip
        };

        // Well-conditioned affine map: identity plus a small perturbation.
        let apply = |v: &[f64]| -> Vec<f64> {
            (0..dim)
                .map(|i| {
                    let mut acc = v[i] + shift[i];
                    for j in 0..dim {
                        acc += map[i * dim + j] * v[j];
                    }
                    acc
                })
                .collect()
        };
        let mapped_records: Vec<SubjectRecord> = raw
            .iter()
            .map(|v| continuous_record("cur", &apply(v)))
            .collect();
        let mapped_reference = match fit_mahalanobis_reference(&mapped_records, &schema, 0.0) {
            Ok(r) => r,
            Err(_) => return Ok(()),
        };
        for v in &raw {
            let d = reference.distance(v).unwrap();
            let d_mapped = mapped_reference.distance(&apply(v)).unwrap();
            prop_assert!(
                (d - d_mapped).abs() <= 1e-8 * d.abs().max(1.0),
                "distance {} vs {} after affine map",
                d,
                d_mapped
            );
        }
    }

    #[test]
    fn similarity_density_ignores_categorical_ordering(
        xs in prop::collection::vec(-2.0f64..2.0, 24),
        g1 in prop::collection::vec(0usize..2, 24),
        g2 in prop::collection::vec(0usize..3, 24),
        probe in 0usize..24,
    ) {
        let levels1 = vec!["a".to_string(), "b".to_string()];
        let levels2 = vec!["u".to_string(), "v".to_string(), "w".to_string()];
        let schema = CovariateSchema::new(
            vec!["x".to_string()],
            vec!["g1".to_string(), "g2".to_string()],
            vec![levels1.clone(), levels2.clone()],
        )
        .unwrap()
        .with_outcome_in_similarity(false);
        let swapped = CovariateSchema::new(
            vec!["x".to_string()],
            vec!["g2".to_string(), "g1".to_string()],
            vec![levels2.clone(), levels1.clone()],
        )
        .unwrap()
        .with_outcome_in_similarity(false);

        let record = |i: usize, order_swapped: bool| -> SubjectRecord {
            let c1 = levels1[g1[i]].clone();
            let c2 = levels2[g2[i]].clone();
            SubjectRecord {
                study_id: "cur".to_string(),
                arm: 0,
                outcome: 0.0,
                continuous_covariates: vec![xs[i]],
                categorical_covariates: if order_swapped {
                    vec![c2, c1]
                } else {
                    vec![c1, c2]
                },
                event: None,
            }
        };
        let records: Vec<SubjectRecord> = (0..24).map(|i| record(i, false)).collect();
        let records_swapped: Vec<SubjectRecord> = (0..24).map(|i| record(i, true)).collect();
        let model = fit_similarity_model(&records, &schema, 1e-8, 3).unwrap();
        let model_swapped =
            fit_similarity_model(&records_swapped, &swapped, 1e-8, 3).unwrap();
        let d = similarity_density(&record(probe, false), &model, &schema).unwrap();
        let d_swapped =
            similarity_density(&record(probe, true), &model_swapped, &swapped).unwrap();
        prop_assert!(
            (d - d_swapped).abs() <= 1e-12 * d.abs().max(1e-300),
            "{} vs {}",
            d,
            d_swapped
        );
    }
}

#[test]
fn transform_context_inverse_is_consistent() {
    let context = TransformContext {
        pooled_min: 2.0,
        pooled_max: 10.0,
    };
    for u in [0.0, 0.25, 0.9, 1.0] {
        let score = context.g_inverse(u);
        assert!((context.g(score) - u).abs() < 1e-12);
    }
}
