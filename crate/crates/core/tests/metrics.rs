use fedepa::metrics::{ConfusionMatrix, Metrics};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matrix() -> impl Strategy<Value = Vec<Vec<u64>>> {
    (1usize..6).prop_flat_map(|c| {
        prop::collection::vec(prop::collection::vec(0u64..20, c), c)
            .prop_filter("needs a sample", |rows| rows.iter().flatten().any(|&v| v > 0))
    })
}

fn metrics(rows: &[Vec<u64>]) -> Metrics {
    Metrics::from_confusion(&ConfusionMatrix::from_rows(rows).unwrap()).unwrap()
}

proptest! {
    #[test]
    fn scores_are_fractions(rows in matrix()) {
        let m = metrics(&rows);
        for v in [m.oa, m.ba, m.f1] {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn relabeling_classes_changes_nothing(rows in matrix(), shift in 0usize..6) {
        let c = rows.len();
        let perm: Vec<usize> = (0..c).map(|i| (i + shift) % c).collect();
        let mut permuted = vec![vec![0; c]; c];
        for i in 0..c {
            for j in 0..c {
                permuted[perm[i]][perm[j]] = rows[i][j];
            }
        }
        let (a, b) = (metrics(&rows), metrics(&permuted));
        prop_assert!((a.oa - b.oa).abs() <= 1e-12);
        prop_assert!((a.ba - b.ba).abs() <= 1e-12);
        prop_assert!((a.f1 - b.f1).abs() <= 1e-12);
    }

    #[test]
    fn perfect_scores_exactly_when_diagonal(rows in matrix()) {
        let diagonal = rows.iter().enumerate().all(|(i, r)| r.iter().enumerate().all(|(j, &v)| i == j || v == 0));
        let m = metrics(&rows);
        prop_assert_eq!(m.oa == 1.0, diagonal);
        prop_assert_eq!(m.ba == 1.0, diagonal);
        prop_assert_eq!(m.f1 == 1.0, diagonal);
    }

    #[test]
    fn predictions_and_rows_agree(truth in prop::collection::vec(0usize..4, 1..60), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred: Vec<usize> = truth.iter().map(|_| rng.gen_range(0..4)).collect();
        let cm = ConfusionMatrix::from_predictions(&truth, &pred, 4).unwrap();
        let rows: Vec<Vec<u64>> = (0..4).map(|i| (0..4).map(|j| cm.get(i, j)).collect()).collect();
        prop_assert_eq!(cm.total(), truth.len() as u64);
        let hits = truth.iter().zip(&pred).filter(|(t, p)| t == p).count();
        prop_assert_eq!(metrics(&rows).oa, hits as f64 / truth.len() as f64);
    }
}

#[test]
fn random_guessing_scores_one_over_classes() {
    let classes = 5;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let truth: Vec<usize> = (0..50_000).map(|_| rng.gen_range(0..classes)).collect();
    let pred: Vec<usize> = (0..50_000).map(|_| rng.gen_range(0..classes)).collect();
    let m = Metrics::from_confusion(&ConfusionMatrix::from_predictions(&truth, &pred, classes).unwrap()).unwrap();
    for v in [m.oa, m.ba, m.f1] {
        assert!((v - 0.2).abs() < 0.01, "{v}");
    }
}

#[test]
fn out_of_range_labels_are_rejected() {
    assert!(ConfusionMatrix::from_predictions(&[0, 3], &[0, 1], 3).is_err());
    assert!(ConfusionMatrix::from_predictions(&[0, 1], &[0], 3).is_err());
}
