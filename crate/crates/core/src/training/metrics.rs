use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Micro precision/recall/F1 over non-nil labels, plus accuracy over everything.
///
/// A prediction counts as positive when it is not `nil`; it is a true positive
/// when it also equals the gold label. With two labels this is the F1 of the
/// non-nil class. Without a nil label every prediction is positive and all
/// four numbers equal the accuracy.
pub fn score(gold: &[usize], pred: &[usize], nil: Option<usize>) -> Result<Metrics> {
    if gold.is_empty() {
        return Err(Error::Validation("cannot score an empty split".into()));
    }
    if gold.len() != pred.len() {
        return Err(Error::contract(format!("{} gold labels but {} predictions", gold.len(), pred.len())));
    }
    let is_pos = |l: usize| Some(l) != nil;
    let (mut tp, mut pred_pos, mut gold_pos, mut correct) = (0usize, 0usize, 0usize, 0usize);
    for (&g, &p) in gold.iter().zip(pred) {
        correct += usize::from(g == p);
        pred_pos += usize::from(is_pos(p));
        gold_pos += usize::from(is_pos(g));
        tp += usize::from(g == p && is_pos(p));
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let precision = ratio(tp, pred_pos);
    let recall = ratio(tp, gold_pos);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    Ok(Metrics { precision, recall, f1, accuracy: ratio(correct, gold.len()) })
}

/// Row-wise argmax; the first maximum wins.
pub fn argmax_rows(data: &[f64], cols: usize) -> Vec<usize> {
    data.chunks(cols)
        .map(|r| r.iter().enumerate().fold(0, |best, (j, &v)| if v > r[best] { j } else { best }))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let m = score(&y, &y, Some(0)).unwrap();
        assert_eq!((m.precision, m.recall, m.f1, m.accuracy), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn nil_only_predictor() {
        let gold = [0, 1, 2, 0, 3, 0];
        let m = score(&gold, &[0; 6], Some(0)).unwrap();
        assert_eq!(m.f1, 0.0);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn hand_computed_confusion() {
        // gold / pred over ten examples, nil = 0
        let gold = [1, 1, 1, 2, 2, 0, 0, 0, 3, 3];
        let pred = [1, 1, 0, 2, 1, 0, 2, 0, 3, 0];
        // tp = 4, predicted positives = 6, gold positives = 7
        let m = score(&gold, &pred, Some(0)).unwrap();
        assert!((m.precision - 4.0 / 6.0).abs() < 1e-15);
        assert!((m.recall - 4.0 / 7.0).abs() < 1e-15);
        assert!((m.f1 - 8.0 / 13.0).abs() < 1e-15);
        assert!((m.accuracy - 0.6).abs() < 1e-15);
    }

    #[test]
    fn binary_is_positive_class_f1() {
        let gold = [1, 1, 0, 0, 1];
        let pred = [1, 0, 1, 0, 1];
        let m = score(&gold, &pred, Some(0)).unwrap();
        assert!((m.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((m.recall - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn empty_split_is_rejected() {
        assert!(matches!(score(&[], &[], Some(0)), Err(Error::Validation(_))));
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax_rows(&[1.0, 3.0, 3.0, -1.0, -2.0, -3.0], 3), vec![1, 0]);
    }
}
