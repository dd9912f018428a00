mod oracles;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wisteria_core::evalmetrics::{ari, auprc, auroc, ece, macro_f1, recall_at_k};

const INSTANCES: usize = 200;

fn rng(tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(0x5eed ^ tag)
}

#[test]
fn auroc_matches_pair_counting() {
    let mut r = rng(1);
    for _ in 0..INSTANCES {
        let n = r.random_range(2..=12);
        let s = oracles::scores(&mut r, n);
        let l = oracles::both_labels(&mut r, n);
        assert_eq!(auroc(&s, &l).unwrap(), oracles::auroc(&s, &l), "{s:?} {l:?}");
    }
    let s = [0.1, 0.4, 0.35, 0.8];
    let l = [false, false, true, true];
    assert_eq!(auroc(&s, &l).unwrap(), oracles::auroc(&s, &l));
}

#[test]
fn auprc_matches_brute_force() {
    let mut r = rng(2);
    for _ in 0..INSTANCES {
        let n = r.random_range(1..=12);
        let s = oracles::scores(&mut r, n);
        let mut l: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        l[r.random_range(0..n)] = true;
        let (a, b) = (auprc(&s, &l).unwrap(), oracles::average_precision(&s, &l));
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn macro_f1_matches_confusion_count() {
    let mut r = rng(3);
    for _ in 0..INSTANCES {
        let n = r.random_range(1..=12);
        let c = r.random_range(2..=5);
        let p = oracles::classes(&mut r, n, c);
        let t = oracles::classes(&mut r, n, c);
        let (a, b) = (macro_f1(&p, &t, c).unwrap(), oracles::macro_f1(&p, &t, c));
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn ece_matches_binning() {
    let mut r = rng(4);
    for _ in 0..INSTANCES {
        let n = r.random_range(1..=12);
        let bins = r.random_range(1..=12);
        let p = oracles::confidences(&mut r, n);
        let l: Vec<bool> = (0..n).map(|_| r.random_bool(0.6)).collect();
        let (a, b) = (ece(&p, &l, bins).unwrap(), oracles::ece(&p, &l, bins));
        assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    }
}

#[test]
fn ari_matches_pair_counting() {
    let mut r = rng(5);
    for _ in 0..INSTANCES {
        let n = r.random_range(2..=12);
        let (ca, cb) = (r.random_range(1..=4), r.random_range(1..=4));
        let a = oracles::classes(&mut r, n, ca);
        let b = oracles::classes(&mut r, n, cb);
        assert_eq!(ari(&a, &b).unwrap(), oracles::ari(&a, &b), "{a:?} {b:?}");
    }
}

#[test]
fn recall_matches_exhaustive_search() {
    let mut r = rng(6);
    for _ in 0..INSTANCES {
        let n = r.random_range(2..=12);
        let k = r.random_range(1..n);
        let e = oracles::points(&mut r, n, 2);
        let c = oracles::classes(&mut r, n, 3);
        assert_eq!(recall_at_k(&e, &c, k).unwrap(), oracles::recall_at_k(&e, &c, k));
    }
}

fn distinct_scores(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::sample::subsequence((0..1000).collect::<Vec<i32>>(), n)
        .prop_shuffle()
        .prop_map(|v| v.into_iter().map(|i| i as f64 / 1000.0).collect())
}

fn labeled(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (distinct_scores(n), proptest::collection::vec(any::<bool>(), n))
        .prop_filter("both classes", |(_, l)| l.iter().any(|&v| v) && l.iter().any(|&v| !v))
}

proptest! {
    #[test]
    fn auroc_complement((s, l) in (2usize..30).prop_flat_map(labeled)) {
        let flipped: Vec<bool> = l.iter().map(|v| !v).collect();
        let sum = auroc(&s, &l).unwrap() + auroc(&s, &flipped).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auroc_monotone_invariant((s, l) in (2usize..30).prop_flat_map(labeled)) {
        let t: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
        prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&t, &l).unwrap());
    }

    #[test]
    fn ari_relabel_invariant(
        a in proptest::collection::vec(0usize..4, 2..20),
        seed in any::<u64>(),
    ) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let b = oracles::classes(&mut r, a.len(), 3);
        let perm = [2usize, 0, 3, 1];
        let relabeled: Vec<usize> = a.iter().map(|&x| perm[x] + 10).collect();
        prop_assert_eq!(ari(&a, &b).unwrap(), ari(&relabeled, &b).unwrap());
    }

    #[test]
    fn ece_zero_when_bins_are_calibrated(counts in proptest::collection::vec(1usize..6, 1..10)) {
        // Bin b holds 10 points at confidence (b+1)/10 of which exactly
        // b+1 are correct, so every bin's accuracy equals its confidence.
        let mut p = Vec::new();
        let mut l = Vec::new();
        for (b, &reps) in counts.iter().enumerate() {
            for _ in 0..reps {
                for i in 0..10 {
                    p.push((b + 1) as f64 / 10.0);
                    l.push(i <= b);
                }
            }
        }
        prop_assert!(ece(&p, &l, 10).unwrap() < 1e-12);
    }
}
