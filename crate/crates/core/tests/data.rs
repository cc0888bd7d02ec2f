//! Dataset generation, JSONL I/O and subsampling, plus an independent
//! bag-of-words logistic-regression oracle for the learnability ceiling.

use std::fs;

use relctx::data::{generate_task, load_jsonl, save_jsonl, subsample, Dataset, Example, SplitCounts, TaskSpec};
use relctx::Error;

#[test]
fn jsonl_reserializes_bitwise() {
    let spec = TaskSpec { counts: SplitCounts { train: 200, val: 50, test: 50 }, ..Default::default() };
    let (ds, _) = generate_task(&spec).unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    save_jsonl(&ds, a.path()).unwrap();
    let back = load_jsonl(a.path()).unwrap();
    assert_eq!(back, ds);
    save_jsonl(&back, b.path()).unwrap();
    for f in ["train.jsonl", "val.jsonl", "test.jsonl", "labels.txt", "vocab.txt"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn missing_label_reports_its_line() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("train.jsonl"),
        concat!(
            r#"{"tokens":["a","b","c"],"e1":[0,1],"e2":[2,3],"label":"x"}"#,
            "\n",
            r#"{"tokens":["a","b","c"],"e1":[0,1],"e2":[2,3]}"#,
            "\n"
        ),
    )
    .unwrap();
    match load_jsonl(dir.path()) {
        Err(Error::Parse { line, msg, .. }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("label"), "{msg}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn span_out_of_range_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("train.jsonl"), r#"{"tokens":["a","b"],"e1":[0,1],"e2":[1,5],"label":"x"}"#).unwrap();
    assert!(matches!(load_jsonl(dir.path()), Err(Error::Validation(_))));
}

#[test]
fn honeymoon_sentence_loads_as_one_example() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("train.jsonl"),
        r#"{"tokens":["Robert","and","Julie","had","a","terrible","honeymoon"],"e1":[0,1],"e2":[2,3],"label":"spouse"}"#,
    )
    .unwrap();
    let ds = load_jsonl(dir.path()).unwrap();
    assert_eq!(ds.train.len(), 1);
    let x = &ds.train[0];
    assert_eq!(ds.vocab.decode(x.entity1()), "Robert");
    assert_eq!(ds.vocab.decode(x.entity2()), "Julie");
    assert_eq!(ds.labels, vec!["spouse".to_string()]);
    assert_eq!(ds.nil_label, None);
}

#[test]
fn label_distribution_tracks_the_spec() {
    let spec = TaskSpec { counts: SplitCounts { train: 10_000, val: 0, test: 0 }, ..Default::default() };
    let (ds, _) = generate_task(&spec).unwrap();
    let mut counts = vec![0usize; ds.n_labels()];
    for x in &ds.train {
        counts[x.label] += 1;
    }
    let n = ds.train.len() as f64;
    let positive = (1.0 - spec.nil_fraction) / (spec.n_relations - 1) as f64;
    for (label, &c) in counts.iter().enumerate() {
        let expected = if label == 0 { spec.nil_fraction } else { positive };
        let observed = c as f64 / n;
        assert!((observed - expected).abs() <= 0.05, "label {label}: {observed:.4} vs {expected:.4}");
    }
}

#[test]
fn five_percent_of_22055_keeps_1102_or_1103() {
    let spec = TaskSpec { counts: SplitCounts { train: 22_055, val: 10, test: 10 }, ..Default::default() };
    let (ds, _) = generate_task(&spec).unwrap();
    let sub = subsample(&ds, 0.05, 3).unwrap();
    assert!((1102..=1103).contains(&sub.train.len()), "{}", sub.train.len());
    assert_eq!(sub.val, ds.val);
    assert_eq!(sub.test, ds.test);
}

fn bag_of_words(ds: &Dataset, x: &Example) -> Vec<f64> {
    let mut f = vec![0.0; ds.vocab.len() + 1];
    for &t in &x.tokens {
        f[t] = 1.0;
    }
    f[ds.vocab.len()] = 1.0;
    f
}

/// Multinomial logistic regression on binary bag-of-words features, trained
/// by full-batch gradient descent. Shares no code with the library's models.
fn logistic_oracle(ds: &Dataset, steps: usize, lr: f64) -> f64 {
    let (k, f) = (ds.n_labels(), ds.vocab.len() + 1);
    let xs: Vec<Vec<f64>> = ds.train.iter().map(|x| bag_of_words(ds, x)).collect();
    let mut w = vec![0.0; k * f];
    let scores = |w: &[f64], x: &[f64]| -> Vec<f64> {
        (0..k).map(|c| x.iter().zip(&w[c * f..(c + 1) * f]).map(|(a, b)| a * b).sum()).collect()
    };
    for _ in 0..steps {
        let mut grad = vec![0.0; k * f];
        for (x, ex) in xs.iter().zip(&ds.train) {
            let s = scores(&w, x);
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..k {
                let p = e[c] / z - if c == ex.label { 1.0 } else { 0.0 };
                for (j, &xj) in x.iter().enumerate() {
                    if xj != 0.0 {
                        grad[c * f + j] += p * xj;
                    }
                }
            }
        }
        let n = xs.len() as f64;
        for (wi, gi) in w.iter_mut().zip(&grad) {
            *wi -= lr * gi / n;
        }
    }
    let correct = ds
        .val
        .iter()
        .filter(|x| {
            let s = scores(&w, &bag_of_words(ds, x));
            let best = (0..k).fold(0, |b, c| if s[c] > s[b] { c } else { b });
            best == x.label
        })
        .count();
    correct as f64 / ds.val.len() as f64
}

#[test]
fn bag_of_words_oracle_clears_the_ceiling() {
    let (ds, _) = generate_task(&TaskSpec::default()).unwrap();
    let acc = logistic_oracle(&ds, 300, 2.0);
    println!("bag-of-words logistic oracle: val accuracy {acc:.4}");
    assert!(acc >= 0.95, "oracle accuracy {acc}");
}
