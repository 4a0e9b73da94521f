//! Exact-match span F1 and the paired randomization test.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng;

use crate::corpus::{extract_spans_lenient, Span};
use crate::error::{Error, Result};
use crate::numerics::stream_rng;

/// Minimum number of resampling iterations accepted by [`randomization_test`].
pub const MIN_ITERATIONS: usize = 1000;

/// Span counts for one entity type or the whole corpus.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SpanCounts {
    pub true_positive: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl SpanCounts {
    pub fn precision(&self) -> f64 {
        ratio(self.true_positive, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_positive, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: SpanCounts) {
        self.true_positive += other.true_positive;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Micro-averaged precision, recall and F1 with a per-type breakdown.
#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub true_positive: usize,
    pub predicted_count: usize,
    pub gold_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_type: BTreeMap<String, SpanCounts>,
}

impl F1Report {
    fn from_counts(total: SpanCounts, per_type: BTreeMap<String, SpanCounts>) -> Self {
        F1Report {
            true_positive: total.true_positive,
            predicted_count: total.predicted,
            gold_count: total.gold,
            precision: total.precision(),
            recall: total.recall(),
            f1: total.f1(),
            per_type,
        }
    }

    /// `precision recall f1 tp pred gold`, then one `TYPE precision recall f1` line per type.
    pub fn render(&self) -> String {
        let mut out = format!(
            "{:.4} {:.4} {:.4} {} {} {}\n",
            self.precision, self.recall, self.f1, self.true_positive, self.predicted_count, self.gold_count
        );
        for (ty, c) in &self.per_type {
            writeln!(out, "{ty} {:.4} {:.4} {:.4}", c.precision(), c.recall(), c.f1()).unwrap();
        }
        out
    }
}

fn sentence_counts<S: AsRef<str>, T: AsRef<str>>(
    gold: &[S],
    pred: &[T],
    per_type: &mut BTreeMap<String, SpanCounts>,
) -> SpanCounts {
    let g: BTreeSet<Span> = extract_spans_lenient(gold).into_iter().collect();
    let p: BTreeSet<Span> = extract_spans_lenient(pred).into_iter().collect();
    let mut total = SpanCounts::default();
    for s in &g {
        per_type.entry(s.entity_type.clone()).or_default().gold += 1;
        total.gold += 1;
    }
    for s in &p {
        let e = per_type.entry(s.entity_type.clone()).or_default();
        e.predicted += 1;
        total.predicted += 1;
        if g.contains(s) {
            e.true_positive += 1;
            total.true_positive += 1;
        }
    }
    total
}

fn check_aligned<S: AsRef<str>, T: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<T>]) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Usage(format!(
            "{} gold sentences but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Usage(format!(
                "sentence {i}: {} gold labels but {} predicted",
                g.len(),
                p.len()
            )));
        }
    }
    Ok(())
}

/// Exact-match span F1 over aligned gold and predicted label sequences.
///
/// Malformed BIOES fragments in either side contribute only their well-formed spans.
pub fn span_f1<S: AsRef<str>, T: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<T>]) -> Result<F1Report> {
    check_aligned(gold, pred)?;
    let mut per_type = BTreeMap::new();
    let mut total = SpanCounts::default();
    for (g, p) in gold.iter().zip(pred) {
        total.add(sentence_counts(g, p, &mut per_type));
    }
    Ok(F1Report::from_counts(total, per_type))
}

/// Per-sentence F1, the pairing unit for [`randomization_test`].
///
/// A sentence with no gold and no predicted spans scores 1.
pub fn per_sentence_f1<S: AsRef<str>, T: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<T>]) -> Result<Vec<f64>> {
    check_aligned(gold, pred)?;
    let mut scratch = BTreeMap::new();
    Ok(gold
        .iter()
        .zip(pred)
        .map(|(g, p)| {
            let c = sentence_counts(g, p, &mut scratch);
            if c.gold == 0 && c.predicted == 0 {
                1.0
            } else {
                c.f1()
            }
        })
        .collect())
}

fn mean_diff(a: &[f64], b: &[f64], flips: Option<&[bool]>) -> f64 {
    let mut sum = 0.0;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        sum += if flips.is_some_and(|f| f[i]) { -d } else { d };
    }
    (sum / a.len() as f64).abs()
}

/// Approximate randomization test for paired scores.
///
/// Each iteration swaps every pair with probability ½; the p-value is
/// `(1 + #{|mean diff| ≥ observed}) / (1 + iterations)`.
pub fn randomization_test(a: &[f64], b: &[f64], iterations: usize, seed: u64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!(
            "paired lists differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() < 2 {
        return Err(Error::Usage("randomization test needs at least 2 pairs".into()));
    }
    if iterations < MIN_ITERATIONS {
        return Err(Error::Usage(format!(
            "randomization test needs at least {MIN_ITERATIONS} iterations, got {iterations}"
        )));
    }
    let observed = mean_diff(a, b, None);
    let mut rng = stream_rng(seed, "randomization");
    let mut flips = vec![false; a.len()];
    let mut hits = 0usize;
    for _ in 0..iterations {
        for f in flips.iter_mut() {
            *f = rng.gen_bool(0.5);
        }
        if mean_diff(a, b, Some(&flips)) >= observed - 1e-12 {
            hits += 1;
        }
    }
    Ok((1 + hits) as f64 / (1 + iterations) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(rows: &[&str]) -> Vec<Vec<String>> {
        rows.iter()
            .map(|r| r.split_whitespace().map(String::from).collect())
            .collect()
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let gold = seqs(&["B-PER E-PER O S-LOC", "O O", "S-ORG"]);
        let r = span_f1(&gold, &gold).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
        let none = seqs(&["O O O O", "O O", "O"]);
        let r = span_f1(&gold, &none).unwrap();
        assert_eq!((r.true_positive, r.precision, r.recall, r.f1), (0, 0.0, 0.0, 0.0));
        assert_eq!(r.gold_count, 3);
    }

    #[test]
    fn half_right() {
        let gold = seqs(&["S-A O S-B O S-A O S-B"]);
        let pred = seqs(&["S-A O S-A O S-A O O"]);
        let mut pred = pred;
        pred[0][6] = "S-A".into();
        let r = span_f1(&gold, &pred).unwrap();
        assert_eq!((r.true_positive, r.predicted_count, r.gold_count), (2, 4, 4));
        assert_eq!((r.precision, r.recall, r.f1), (0.5, 0.5, 0.5));
        assert_eq!(r.render().lines().next().unwrap(), "0.5000 0.5000 0.5000 2 4 4");
    }

    #[test]
    fn malformed_fragments_are_lenient() {
        let gold = seqs(&["B-A E-A O S-B"]);
        let pred = seqs(&["B-A E-A I-B S-B"]);
        let r = span_f1(&gold, &pred).unwrap();
        assert_eq!((r.true_positive, r.predicted_count), (2, 2));
    }

    #[test]
    fn misaligned_is_usage_error() {
        let gold = seqs(&["O O"]);
        assert!(matches!(span_f1(&gold, &seqs(&["O"])), Err(Error::Usage(_))));
        assert!(matches!(span_f1(&gold, &seqs(&["O O", "O"])), Err(Error::Usage(_))));
    }

    #[test]
    fn micro_equals_summed_counts() {
        let gold = seqs(&["S-A O", "B-B E-B", "S-A S-A"]);
        let pred = seqs(&["S-A O", "S-B S-B", "S-A O"]);
        let r = span_f1(&gold, &pred).unwrap();
        let per: (usize, usize, usize) = r.per_type.values().fold((0, 0, 0), |acc, c| {
            (acc.0 + c.true_positive, acc.1 + c.predicted, acc.2 + c.gold)
        });
        assert_eq!(per, (r.true_positive, r.predicted_count, r.gold_count));
        let mut reversed_g = gold.clone();
        let mut reversed_p = pred.clone();
        reversed_g.reverse();
        reversed_p.reverse();
        assert_eq!(span_f1(&reversed_g, &reversed_p).unwrap(), r);
    }

    #[test]
    fn per_sentence_scores() {
        let gold = seqs(&["O O", "S-A O", "S-A"]);
        let pred = seqs(&["O O", "S-A O", "O"]);
        assert_eq!(per_sentence_f1(&gold, &pred).unwrap(), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn randomization_identical_and_shifted() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin()).collect();
        assert_eq!(randomization_test(&a, &a, 2000, 3).unwrap(), 1.0);
        let b: Vec<f64> = a.iter().map(|x| x + 5.0).collect();
        let p = randomization_test(&b, &a, 10_000, 3).unwrap();
        assert!(p < 0.001, "{p}");
        assert_eq!(p, 1.0 / 10_001.0);
        assert_eq!(p, randomization_test(&a, &b, 10_000, 3).unwrap());
    }

    #[test]
    fn randomization_two_pairs_matches_enumeration() {
        // differences 1 and 3: |mean| over the 4 sign patterns is 2, 1, 1, 2, observed 2
        let a = [1.0, 3.0];
        let b = [0.0, 0.0];
        let p = randomization_test(&a, &b, 20_000, 11).unwrap();
        assert!((p - 0.5).abs() < 0.02, "{p}");
        assert!(p >= 1.0 / 20_001.0);
    }

    #[test]
    fn randomization_preconditions() {
        assert!(randomization_test(&[1.0, 2.0], &[1.0], 1000, 0).is_err());
        assert!(randomization_test(&[1.0], &[1.0], 1000, 0).is_err());
        assert!(randomization_test(&[1.0, 2.0], &[1.0, 2.0], 999, 0).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn p_value_in_range_and_symmetric(
                pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..20),
                seed in any::<u64>(),
            ) {
                let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                let p = randomization_test(&a, &b, 1000, seed).unwrap();
                prop_assert!(p > 0.0 && p <= 1.0);
                prop_assert_eq!(p, randomization_test(&b, &a, 1000, seed).unwrap());
            }
        }
    }
}
