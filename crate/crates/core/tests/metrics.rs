mod common;

use common::pair_count_auc;
use muse_core::metrics::*;
use muse_core::MuseError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tied_instance(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=200);
    let levels = rng.random_range(1..=12);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
    labels[0] = 0;
    labels[1] = 1;
    let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
    (scores, labels)
}

#[test]
fn matches_pair_counting_on_tied_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let (s, y) = tied_instance(&mut rng);
        let fast = roc_auc(&s, &y).unwrap();
        assert!((fast - pair_count_auc(&s, &y)).abs() <= 1e-12);
    }
}

#[test]
fn logloss_matches_direct_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p: Vec<f64> = (0..500).map(|_| rng.random_range(0.01..0.99)).collect();
    let y: Vec<u8> = (0..500).map(|_| rng.random_range(0..2)).collect();
    let direct = -p
        .iter()
        .zip(&y)
        .map(|(&p, &y)| y as f64 * p.ln() + (1.0 - y as f64) * (1.0 - p).ln())
        .sum::<f64>()
        / 500.0;
    assert!((logloss(&p, &y).unwrap() - direct).abs() < 1e-12);
}

#[test]
fn errors() {
    assert!(matches!(roc_auc(&[0.5], &[0]), Err(MuseError::SingleClass)));
    assert!(roc_auc(&[0.5, 0.2], &[0]).is_err());
    assert!(logloss(&[], &[]).is_err());
}

proptest! {
    #[test]
    fn label_flip_complements(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, y) = tied_instance(&mut rng);
        let flipped: Vec<u8> = y.iter().map(|v| 1 - v).collect();
        prop_assert_eq!(roc_auc(&s, &y).unwrap(), 1.0 - roc_auc(&s, &flipped).unwrap());
    }

    #[test]
    fn monotone_transform_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (s, y) = tied_instance(&mut rng);
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(roc_auc(&s, &y).unwrap(), roc_auc(&t, &y).unwrap());
    }
}
