use conmamba::autodiff::Tape;
use conmamba::losses::{inter_loss, intra_loss, optimal_total, total_loss, ContrastiveBatch};
use conmamba::tensor::Tensor;
use proptest::prelude::*;

fn rows(b: usize, p: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![-1.0f64..-0.05, 0.05f64..1.0], b * p)
}

/// Intra and inter losses of raw rows after L2 normalization.
fn losses(z1: &[f64], z2: &[f64], b: usize, labels: &[usize], tau: f64, m: f64) -> (f64, f64, bool) {
    let p = z1.len() / b;
    let mut t = Tape::new();
    let a = t.constant(Tensor::matrix(b, p, z1.to_vec()).unwrap());
    let c = t.constant(Tensor::matrix(b, p, z2.to_vec()).unwrap());
    let z1 = t.l2_normalize(a).unwrap();
    let z2 = t.l2_normalize(c).unwrap();
    let batch = ContrastiveBatch { z1, z2, labels, temperature: tau, margin: m };
    let li = intra_loss(&mut t, &batch).unwrap();
    let le = inter_loss(&mut t, &batch).unwrap();
    (t.value(li).item().unwrap(), t.value(le.value).item().unwrap(), le.degenerate)
}

fn permute(v: &[f64], p: usize, perm: &[usize]) -> Vec<f64> {
    perm.iter().flat_map(|&i| v[i * p..(i + 1) * p].iter().copied()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn losses_are_non_negative(z1 in rows(4, 3), z2 in rows(4, 3), tau in 0.05f64..2.0, m in 0.0f64..2.0) {
        let (li, le, _) = losses(&z1, &z2, 4, &[0, 1, 0, 1], tau, m);
        prop_assert!(li >= 0.0);
        prop_assert!(le >= 0.0);
    }

    #[test]
    fn intra_is_invariant_to_batch_order(
        z1 in rows(5, 3),
        z2 in rows(5, 3),
        perm in Just((0..5).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let labels = [0, 1, 2, 0, 1];
        let (li, le, _) = losses(&z1, &z2, 5, &labels, 0.5, 0.5);
        let plabels: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let (pi, pe, _) = losses(&permute(&z1, 3, &perm), &permute(&z2, 3, &perm), 5, &plabels, 0.5, 0.5);
        prop_assert!((li - pi).abs() < 1e-12);
        prop_assert!((le - pe).abs() < 1e-12);
    }

    #[test]
    fn single_class_batch_is_degenerate(z1 in rows(3, 2), z2 in rows(3, 2)) {
        let (_, le, degenerate) = losses(&z1, &z2, 3, &[1, 1, 1], 0.5, 0.5);
        prop_assert!(degenerate);
        prop_assert_eq!(le, 0.0);
    }

    #[test]
    fn total_at_sigma_squared_equals_loss_is_analytic(li in 1e-3f64..10.0, le in 1e-3f64..10.0) {
        let mut t = Tape::new();
        let a = t.constant(Tensor::scalar(li));
        let b = t.constant(Tensor::scalar(le));
        let s1 = t.leaf(Tensor::scalar(0.5 * li.ln()));
        let s2 = t.leaf(Tensor::scalar(0.5 * le.ln()));
        let total = total_loss(&mut t, a, b, s1, s2).unwrap();
        prop_assert!((t.value(total).item().unwrap() - optimal_total(li, le)).abs() < 1e-12);
        let g = t.backward(total).unwrap();
        prop_assert!(g.get(s1).unwrap().item().unwrap().abs() < 1e-12);
        prop_assert!(g.get(s2).unwrap().item().unwrap().abs() < 1e-12);
    }

    // stationary point is a minimum along each log σ
    #[test]
    fn total_is_minimal_at_stationary_point(li in 0.01f64..10.0, le in 0.01f64..10.0, ds in -1.0f64..1.0) {
        let eval = |s1: f64, s2: f64| {
            let mut t = Tape::new();
            let a = t.constant(Tensor::scalar(li));
            let b = t.constant(Tensor::scalar(le));
            let v1 = t.constant(Tensor::scalar(s1));
            let v2 = t.constant(Tensor::scalar(s2));
            let total = total_loss(&mut t, a, b, v1, v2).unwrap();
            t.value(total).item().unwrap()
        };
        let (s1, s2) = (0.5 * li.ln(), 0.5 * le.ln());
        prop_assert!(eval(s1 + ds, s2) >= eval(s1, s2) - 1e-12);
        prop_assert!(eval(s1, s2 + ds) >= eval(s1, s2) - 1e-12);
    }
}

#[test]
fn one_pair_batch_is_rejected() {
    let mut t = Tape::new();
    let a = t.constant(Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap());
    let batch = ContrastiveBatch { z1: a, z2: a, labels: &[0], temperature: 0.5, margin: 0.5 };
    assert!(intra_loss(&mut t, &batch).is_err());
}
