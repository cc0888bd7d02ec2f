//! Randomized invariants.

use proptest::prelude::*;
use relctx::data::{generate_task, subsample, SplitCounts, TaskSpec};
use relctx::explanations::{corrupt_set, replacement_count, CorruptionSpec, ExpToken, Explanation, ExplanationSet};
use relctx::harness::mean_std;
use relctx::numerics::{checkpoint, Graph, ParamStore, Tensor};
use relctx::training::score;

fn explanation() -> impl Strategy<Value = Explanation> {
    (prop::collection::vec(10usize..60, 1..12), any::<prop::sample::Index>(), any::<prop::sample::Index>()).prop_map(
        |(words, i1, i2)| {
            let mut tokens: Vec<ExpToken> = words.into_iter().map(ExpToken::Word).collect();
            tokens.insert(i1.index(tokens.len() + 1), ExpToken::O1);
            tokens.insert(i2.index(tokens.len() + 1), ExpToken::O2);
            Explanation::new(tokens).unwrap()
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn corruption_changes_exactly_round_pk_words(
        set in prop::collection::vec(explanation(), 1..5),
        p in 0.0f64..=1.0,
        seed in any::<u64>(),
    ) {
        let set = ExplanationSet::new(set);
        let pool: Vec<usize> = (10..60).collect();
        let c = corrupt_set(&set, &CorruptionSpec::new(p, seed).unwrap(), &pool).unwrap();
        for ((orig, new), replaced) in set.iter().zip(c.set.iter()).zip(&c.replaced) {
            let k = orig.word_count();
            prop_assert_eq!(replaced.len(), replacement_count(p, k));
            prop_assert!(replacement_count(p, k) <= k);
            let changed: Vec<usize> = orig.tokens().iter().zip(new.tokens()).enumerate()
                .filter(|(_, (a, b))| a != b).map(|(i, _)| i).collect();
            prop_assert_eq!(&changed, replaced);
            for (a, b) in orig.tokens().iter().zip(new.tokens()) {
                if !matches!(a, ExpToken::Word(_)) {
                    prop_assert_eq!(a, b);
                }
            }
        }
        let again = corrupt_set(&set, &CorruptionSpec::new(p, seed).unwrap(), &pool).unwrap();
        prop_assert_eq!(again, c);
    }

    #[test]
    fn metrics_stay_in_range_and_f1_is_the_harmonic_mean(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..80),
        nil in prop::option::of(0usize..4),
    ) {
        let (gold, pred): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = score(&gold, &pred, nil).unwrap();
        for v in [m.precision, m.recall, m.f1, m.accuracy] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        let expected = if m.precision + m.recall == 0.0 { 0.0 } else { 2.0 * m.precision * m.recall / (m.precision + m.recall) };
        prop_assert!((m.f1 - expected).abs() < 1e-12);
        let mut rg = gold.clone();
        let mut rp = pred.clone();
        rg.reverse();
        rp.reverse();
        prop_assert_eq!(score(&rg, &rp, nil).unwrap(), m);
    }

    #[test]
    fn sample_std_is_shift_invariant(xs in prop::collection::vec(-10.0f64..10.0, 2..20), shift in -100.0f64..100.0) {
        let (m, s) = mean_std(&xs).unwrap();
        let shifted: Vec<f64> = xs.iter().map(|x| x + shift).collect();
        let (m2, s2) = mean_std(&shifted).unwrap();
        prop_assert!((m2 - m - shift).abs() < 1e-9);
        prop_assert!((s2.unwrap() - s.unwrap()).abs() < 1e-9);
        prop_assert!(s.unwrap() >= 0.0);
    }

    #[test]
    fn checkpoint_text_preserves_every_bit(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::vector(values.clone()), true).unwrap();
        store.insert("q", Tensor::matrix(1, 1, vec![values[0]]).unwrap(), false).unwrap();
        let back = checkpoint::from_json(&checkpoint::to_json(&store).unwrap()).unwrap();
        prop_assert_eq!(back.digest(""), store.digest(""));
        prop_assert!(!back.get("q").unwrap().trainable);
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let data: Vec<f64> = (0..rows * cols).map(|i| (((i as u64).wrapping_mul(seed | 1) % 97) as f64 - 48.0) / 4.0).collect();
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::matrix(rows, cols, data).unwrap());
        let s = g.softmax(x);
        for r in 0..rows {
            let row = g.value(s).row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn subsample_keeps_rounded_class_counts(fraction in 0.2f64..=1.0, seed in any::<u64>()) {
        let spec = TaskSpec { counts: SplitCounts { train: 400, val: 20, test: 20 }, ..Default::default() };
        let (ds, _) = generate_task(&spec).unwrap();
        let sub = subsample(&ds, fraction, seed).unwrap();
        for label in 0..ds.n_labels() {
            let n = ds.train.iter().filter(|x| x.label == label).count();
            let k = sub.train.iter().filter(|x| x.label == label).count();
            prop_assert_eq!(k, ((fraction * n as f64) + 0.5).floor() as usize);
        }
        prop_assert!(sub.train.iter().all(|x| ds.train.contains(x)));
        prop_assert_eq!(&sub.val, &ds.val);
        prop_assert_eq!(subsample(&ds, fraction, seed).unwrap(), sub);
    }
}
