use msis_core::eval::auc;
use proptest::prelude::*;

fn pairwise(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate().filter(|(i, _)| labels[*i]) {
        let _ = i;
        for (_, &sj) in scores.iter().enumerate().filter(|(j, _)| !labels[*j]) {
            pairs += 1.0;
            wins += if si > sj {
                1.0
            } else if si == sj {
                0.5
            } else {
                0.0
            };
        }
    }
    wins / pairs
}

fn both_classes() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..200)
        .prop_flat_map(|n| {
            (
                prop::collection::vec((0u8..12).prop_map(|v| f64::from(v) / 4.0 - 1.0), n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("needs both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
}

proptest! {
    #[test]
    fn matches_pairwise_counting((scores, labels) in both_classes()) {
        let a = auc(&scores, &labels).unwrap();
        prop_assert!((a - pairwise(&scores, &labels)).abs() <= 1e-12);
    }

    #[test]
    fn invariant_under_monotone_transforms((scores, labels) in both_classes()) {
        let a = auc(&scores, &labels).unwrap();
        let cubed: Vec<f64> = scores.iter().map(|s| s.powi(3) * 5.0 + 2.0).collect();
        let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-3.0 * s).exp())).collect();
        prop_assert!((auc(&cubed, &labels).unwrap() - a).abs() <= 1e-12);
        prop_assert!((auc(&squashed, &labels).unwrap() - a).abs() <= 1e-12);
    }

    #[test]
    fn flipping_labels_complements((scores, labels) in both_classes()) {
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        let sum = auc(&scores, &labels).unwrap() + auc(&scores, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() <= 1e-12);
    }
}
