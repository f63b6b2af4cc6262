use conmamba::probe::{confusion_matrix, silhouette_score, MetricsReport};
use conmamba::tensor::Tensor;
use proptest::prelude::*;

fn pairs(k: usize) -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    prop::collection::vec((0..k, 0..k), 1..60).prop_map(|v| v.into_iter().unzip())
}

/// Macro-F1 from the definitions, counting directly from the label lists.
fn brute_macro_f1(truth: &[usize], pred: &[usize], k: usize) -> f64 {
    let mut total = 0.0;
    for c in 0..k {
        let tp = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p == c).count() as f64;
        let fp = truth.iter().zip(pred).filter(|&(&t, &p)| t != c && p == c).count() as f64;
        let fneg = truth.iter().zip(pred).filter(|&(&t, &p)| t == c && p != c).count() as f64;
        let precision = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let recall = if tp + fneg == 0.0 { 0.0 } else { tp / (tp + fneg) };
        total += if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    }
    total / k as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn macro_f1_matches_brute_force((truth, pred) in pairs(4)) {
        let r = MetricsReport::from_confusion(confusion_matrix(&truth, &pred, 4).unwrap()).unwrap();
        prop_assert!((r.macro_f1 - brute_macro_f1(&truth, &pred, 4)).abs() < 1e-12);
        let acc = truth.iter().zip(&pred).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64;
        prop_assert!((r.accuracy - acc).abs() < 1e-12);
        prop_assert!(r.macro_f1 >= 0.0 && r.macro_f1 <= 1.0);
    }

    #[test]
    fn relabeling_classes_changes_nothing(
        (truth, pred) in pairs(3),
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
    ) {
        let a = MetricsReport::from_confusion(confusion_matrix(&truth, &pred, 3).unwrap()).unwrap();
        let t2: Vec<usize> = truth.iter().map(|&c| perm[c]).collect();
        let p2: Vec<usize> = pred.iter().map(|&c| perm[c]).collect();
        let b = MetricsReport::from_confusion(confusion_matrix(&t2, &p2, 3).unwrap()).unwrap();
        prop_assert!((a.accuracy - b.accuracy).abs() < 1e-12);
        prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
        prop_assert!((a.macro_precision - b.macro_precision).abs() < 1e-12);
        prop_assert!((a.macro_recall - b.macro_recall).abs() < 1e-12);
    }

    #[test]
    fn silhouette_is_scale_invariant_and_bounded(
        pts in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 6..20),
        scale in 0.1f64..10.0,
    ) {
        let labels: Vec<usize> = (0..pts.len()).map(|i| i % 3).collect();
        let a: Vec<Tensor> = pts.iter().map(|p| Tensor::vector(p.clone())).collect();
        let b: Vec<Tensor> = pts.iter().map(|p| Tensor::vector(p.iter().map(|v| v * scale).collect())).collect();
        let sa = silhouette_score(&a, &labels).unwrap();
        let sb = silhouette_score(&b, &labels).unwrap();
        prop_assert!((-1.0..=1.0).contains(&sa));
        prop_assert!((sa - sb).abs() < 1e-9);
    }
}

#[test]
fn fixed_matrix_hand_values() {
    let r = MetricsReport::from_confusion(vec![vec![5, 0], vec![2, 3]]).unwrap();
    assert!((r.accuracy - 0.8).abs() < 1e-12);
    assert!((r.macro_f1 - 0.7917).abs() < 1e-4);
    assert!((r.per_class[0].precision - 5.0 / 7.0).abs() < 1e-12);
    assert!((r.per_class[1].recall - 0.6).abs() < 1e-12);
}

#[test]
fn never_predicted_class_scores_zero_not_nan() {
    let r = MetricsReport::from_confusion(vec![vec![3, 0], vec![2, 0]]).unwrap();
    assert!(r.macro_f1.is_finite());
    assert_eq!(r.per_class[1].f1, 0.0);
}

#[test]
fn well_separated_clusters_score_near_one() {
    let pts: Vec<Tensor> = (0..10)
        .map(|i| Tensor::vector(vec![(i % 2) as f64 * 100.0 + (i as f64) * 1e-3, 0.0]))
        .collect();
    let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
    assert!(silhouette_score(&pts, &labels).unwrap() > 0.99);
}
