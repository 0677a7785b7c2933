use diffvad::data::make_batches;
use diffvad::eval::roc_auc;
use diffvad::numeric::{Rng, Stream};
use diffvad::scoring::{batch_threshold, BatchDecision};
use proptest::prelude::*;

fn losses() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..100.0, 2..64)
}

fn labelled() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    prop::collection::vec((-50.0f64..50.0, 0u8..2), 2..80).prop_filter_map("both classes", |v| {
        let (s, l): (Vec<f64>, Vec<u8>) = v.into_iter().unzip();
        (l.contains(&0) && l.contains(&1)).then_some((s, l))
    })
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn flags_invariant_under_positive_affine(l in losses(), a in 0.5f64..4.0, b in -10.0f64..10.0, k in 0.0f64..2.0) {
        let base = BatchDecision::from_losses(l.clone(), k).unwrap();
        let moved: Vec<f64> = l.iter().map(|x| a * x + b).collect();
        let (mu, sd, th) = batch_threshold(&moved, k).unwrap();
        prop_assert!((mu - (a * base.mu_p + b)).abs() <= 1e-9 * (1.0 + mu.abs()));
        prop_assert!((sd - a * base.sigma_p).abs() <= 1e-9 * (1.0 + sd));
        // compare away from the boundary, where rounding could flip a tie
        for (x, f) in moved.iter().zip(&base.flags) {
            if (x - th).abs() > 1e-7 * (1.0 + th.abs()) {
                prop_assert_eq!(*x > th, *f);
            }
        }
    }

    #[test]
    fn flagged_count_shrinks_with_k(l in losses(), k in 0.0f64..2.0, dk in 0.0f64..2.0) {
        let lo = BatchDecision::from_losses(l.clone(), k).unwrap().flagged();
        let hi = BatchDecision::from_losses(l, k + dk).unwrap().flagged();
        prop_assert!(hi <= lo);
    }

    #[test]
    fn auc_invariant_under_monotone_map((s, l) in labelled()) {
        let a = roc_auc(&s, &l).unwrap();
        let mapped: Vec<f64> = s.iter().map(|x| (x / 8.0).exp()).collect();
        prop_assert!((roc_auc(&mapped, &l).unwrap() - a).abs() < 1e-12);
        let flipped: Vec<u8> = l.iter().map(|v| 1 - v).collect();
        prop_assert!((roc_auc(&s, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn batches_partition_the_index_range(n in 0usize..500, bs in 1usize..64, seed in any::<u64>(), shuffle in any::<bool>()) {
        let mut rng = Rng::stream(seed, Stream::Shuffle);
        let batches = make_batches(n, bs, shuffle.then_some(&mut rng));
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        prop_assert!(batches.iter().all(|b| !b.is_empty() && b.len() <= bs));
        let mut all: Vec<usize> = batches.concat();
        if !shuffle {
            prop_assert!(all.windows(2).all(|w| w[0] < w[1]));
        }
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
    }
}
