use std::collections::HashMap;

use super::{Prf, TokenSeq};

/// ROUGE-N with clipped n-gram counts.
///
/// `n` must be at least 1; `n = 0` is treated as a degenerate input and
/// scores zero.
pub fn rouge_n(candidate: &TokenSeq, reference: &TokenSeq, n: usize) -> Prf {
    if n == 0 {
        return Prf::zero();
    }
    let cand = ngram_counts(&candidate.tokens, n);
    let refs = ngram_counts(&reference.tokens, n);
    let cand_total = candidate.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    let matches: usize = cand
        .iter()
        .map(|(gram, &c)| refs.get(gram).map_or(0, |&r| c.min(r)))
        .sum();
    Prf::from_counts(matches, cand_total, ref_total)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// ROUGE-L from the longest common subsequence length.
pub fn rouge_l(candidate: &TokenSeq, reference: &TokenSeq) -> Prf {
    let l = lcs_len(&candidate.tokens, &reference.tokens);
    Prf::from_counts(l, candidate.len(), reference.len())
}

pub fn lcs_len<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> TokenSeq {
        TokenSeq::new(s)
    }

    #[test]
    fn identity() {
        for n in 1..=2 {
            assert_eq!(rouge_n(&t("the cat sat"), &t("the cat sat"), n).f1, 1.0);
        }
        assert_eq!(rouge_l(&t("the cat sat"), &t("the cat sat")).f1, 1.0);
    }

    #[test]
    fn unigram_hand_count() {
        let s = rouge_n(&t("the cat sat"), &t("the cat"), 1);
        assert!((s.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 1.0);
        assert!((s.f1 - 0.8).abs() < 1e-12);
    }

    #[test]
    fn bigram_hand_count() {
        let s = rouge_n(&t("the cat sat on mat"), &t("the cat sat"), 2);
        assert_eq!(s.precision, 0.5);
        assert_eq!(s.recall, 1.0);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn clipping() {
        let s = rouge_n(&t("the the the"), &t("the cat"), 1);
        assert!((s.precision - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.recall, 0.5);
    }

    #[test]
    fn lcs_transposition() {
        let s = rouge_l(&t("a b c d"), &t("a c b d"));
        assert_eq!((s.precision, s.recall, s.f1), (0.75, 0.75, 0.75));
        assert_eq!(rouge_l(&t("a b"), &t("c d")).f1, 0.0);
    }

    #[test]
    fn degenerate_inputs_score_zero() {
        assert_eq!(rouge_n(&t(""), &t("a"), 1), Prf::zero());
        assert_eq!(rouge_n(&t("a"), &t("a"), 2), Prf::zero());
        assert_eq!(rouge_n(&t("a"), &t("a"), 0), Prf::zero());
        assert_eq!(rouge_l(&t(""), &t("")), Prf::zero());
    }
}
