use cdfs_gad::training::{pseudo_label, self_train_supervision, PseudoLabelSets};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn ceil_count(beta: f64, n: usize) -> usize {
    // smallest k with k >= beta * n, found by counting up
    (0..=n).find(|&k| k as f64 >= beta * n as f64 - 1e-9).unwrap()
}

/// Sort a copy by (score desc, node asc) and slice both ends.
fn oracle(scores: &[f64], eligible: &[usize], beta1: f64, beta2: f64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<(f64, usize)> = eligible.iter().map(|&i| (scores[i], i)).collect();
    order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let n = order.len();
    let k1 = ceil_count(beta1, n);
    let k2 = ceil_count(beta2, n).min(n - k1);
    let mut top: Vec<usize> = order[..k1].iter().map(|p| p.1).collect();
    let mut bottom: Vec<usize> = order[n - k2..].iter().map(|p| p.1).collect();
    top.sort_unstable();
    bottom.sort_unstable();
    (top, bottom)
}

#[test]
fn hundred_scores_give_two_and_twenty_five() {
    let scores: Vec<f64> = (0..100).map(|i| f64::from(i) / 100.0).collect();
    let eligible: Vec<usize> = (0..100).collect();
    let sets = pseudo_label(&scores, &eligible, 0.02, 0.25).unwrap();
    assert_eq!(sets.anomalous, vec![98, 99]);
    assert_eq!(sets.normal, (0..25).collect::<Vec<_>>());
}

#[test]
fn equal_scores_pick_the_lowest_index() {
    let scores = vec![0.5; 10];
    let eligible: Vec<usize> = (0..10).collect();
    let sets = pseudo_label(&scores, &eligible, 0.1, 0.2).unwrap();
    assert_eq!(sets.anomalous, vec![0]);
    assert_eq!(sets.normal, vec![8, 9]);
}

#[test]
fn overlapping_fractions_are_rejected() {
    let err = pseudo_label(&[0.1, 0.2], &[0, 1], 0.6, 0.5).unwrap_err();
    assert!(err.is_io());
    assert!(pseudo_label(&[0.1], &[], 0.1, 0.1).is_err());
    assert!(pseudo_label(&[0.1], &[3], 0.1, 0.1).is_err());
}

#[test]
fn ten_thousand_random_vectors_match_the_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..10_000 {
        let n = rng.random_range(1..60);
        // coarse grid makes ties common
        let scores: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..8u8)) / 8.0).collect();
        let eligible: Vec<usize> = (0..n).filter(|_| rng.random::<f64>() < 0.7).collect();
        if eligible.is_empty() {
            continue;
        }
        let beta1 = rng.random_range(0.0..0.5);
        let beta2 = rng.random_range(0.0..(1.0 - beta1));
        let sets = pseudo_label(&scores, &eligible, beta1, beta2).unwrap();
        let (top, bottom) = oracle(&scores, &eligible, beta1, beta2);
        assert_eq!((&sets.anomalous, &sets.normal), (&top, &bottom), "case {case}");
        let m = eligible.len();
        assert_eq!(sets.anomalous.len(), ceil_count(beta1, m), "case {case}");
        if ceil_count(beta1, m) + ceil_count(beta2, m) <= m {
            assert_eq!(sets.normal.len(), ceil_count(beta2, m), "case {case}");
        }
        assert!(sets.anomalous.iter().all(|i| !sets.normal.contains(i)));
    }
}

#[test]
fn supervision_marks_shots_as_anomalies() {
    let pseudo = PseudoLabelSets { anomalous: vec![4, 9], normal: vec![1, 2] };
    let sup = self_train_supervision(&pseudo, &[7]);
    assert_eq!(sup, vec![(1, 0), (2, 0), (4, 1), (7, 1), (9, 1)]);
}

proptest! {
    #[test]
    fn sets_are_disjoint_sized_and_eligible(
        scores in prop::collection::vec(-5.0f64..5.0, 1..80),
        keep in prop::collection::vec(any::<bool>(), 80),
        beta1 in 0.0f64..0.3,
        beta2 in 0.0f64..0.7,
    ) {
        let eligible: Vec<usize> = (0..scores.len()).filter(|&i| keep[i]).collect();
        prop_assume!(!eligible.is_empty());
        let sets = pseudo_label(&scores, &eligible, beta1, beta2).unwrap();
        prop_assert!(sets.anomalous.iter().all(|i| !sets.normal.contains(i)));
        prop_assert!(sets.anomalous.iter().chain(&sets.normal).all(|i| eligible.contains(i)));
        prop_assert_eq!(sets.anomalous.len(), ceil_count(beta1, eligible.len()));
        let n = eligible.len();
        prop_assert_eq!(sets.normal.len(), ceil_count(beta2, n).min(n - ceil_count(beta1, n)));
        let lowest_anomalous = sets.anomalous.iter().map(|&i| scores[i]).fold(f64::INFINITY, f64::min);
        let highest_normal = sets.normal.iter().map(|&i| scores[i]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(sets.anomalous.is_empty() || sets.normal.is_empty() || lowest_anomalous >= highest_normal);
    }
}
