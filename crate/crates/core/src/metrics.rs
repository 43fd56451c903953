//! Rouge-L over token sequences.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tinylm::GenerationTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Longest common subsequence length in O(|a|·|b|) time and
/// O(min(|a|, |b|)) space.
pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut row = vec![0usize; short.len() + 1];
    for x in long {
        let mut diag = 0;
        for (j, y) in short.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[short.len()]
}

pub fn rouge_l<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    let lcs = lcs_len(candidate, reference) as f64;
    let ratio = |den: usize| if den == 0 { 0.0 } else { lcs / den as f64 };
    let precision = ratio(candidate.len());
    let recall = ratio(reference.len());
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    RougeScore {
        precision,
        recall,
        f1,
    }
}

/// Rouge-L F1 of `output` against `reference`; both must share a prompt.
pub fn fidelity(output: &GenerationTrace, reference: &GenerationTrace) -> Result<f64> {
    if output.prompt != reference.prompt {
        return Err(Error::Input(
            "fidelity needs traces generated from the same prompt".into(),
        ));
    }
    Ok(rouge_l(output.text_tokens(), reference.text_tokens()).f1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn words(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn hand_computed_lcs() {
        assert_eq!(lcs_len(&words("a b c d"), &words("a c d e")), 3);
        assert_eq!(lcs_len(&[1, 2, 3], &[1, 2, 3]), 3);
        assert_eq!(lcs_len(&[1, 2, 3], &[4, 5]), 0);
        assert_eq!(lcs_len::<u32>(&[], &[1]), 0);
    }

    #[test]
    fn rouge_examples() {
        let s = rouge_l(&words("a b c d"), &words("a c d e"));
        assert_eq!((s.precision, s.recall, s.f1), (0.75, 0.75, 0.75));
        let same = rouge_l(&[7, 8], &[7, 8]);
        assert_eq!((same.precision, same.recall, same.f1), (1.0, 1.0, 1.0));
        let empty = rouge_l::<u32>(&[], &[1, 2]);
        assert_eq!((empty.precision, empty.recall, empty.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn precision_and_recall_differ_on_unequal_lengths() {
        let s = rouge_l(&[1, 2], &[1, 2, 3, 4]);
        assert_eq!(s.precision, 1.0);
        assert_eq!(s.recall, 0.5);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn lcs_is_symmetric_and_bounded(
            a in prop::collection::vec(0u8..4, 0..20),
            b in prop::collection::vec(0u8..4, 0..20),
        ) {
            let l = lcs_len(&a, &b);
            prop_assert_eq!(l, lcs_len(&b, &a));
            prop_assert!(l <= a.len().min(b.len()));
        }

        #[test]
        fn relabeling_tokens_preserves_scores(
            a in prop::collection::vec(0u8..6, 0..15),
            b in prop::collection::vec(0u8..6, 0..15),
        ) {
            let relabel = |v: &[u8]| v.iter().map(|t| (t * 7 + 3) % 11).collect::<Vec<_>>();
            prop_assert_eq!(rouge_l(&a, &b), rouge_l(&relabel(&a), &relabel(&b)));
        }
    }
}
