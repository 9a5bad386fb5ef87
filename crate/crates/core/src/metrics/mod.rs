//! Summary-quality metrics: ROUGE-1/2/L, a METEOR-style aligner and
//! lexicon-based concept F1, plus per-section and cross-section aggregation.
//!
//! Scores are stored in `[0, 1]`; tables multiply by 100 at emission.

mod concepts;
mod meteor;
pub mod porter;
mod rouge;
mod tokens;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::par::Exec;

pub use concepts::{concept_f1, extract_concepts, set_prf, ConceptEntry, ConceptLexicon};
pub use meteor::{align, meteor_lite, Alignment};
pub use rouge::{lcs_len, rouge_l, rouge_n};
pub use tokens::{normalize, TokenSeq};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("cannot aggregate an empty list of score cards")]
    EmptyAggregate,
    #[error("weights length {weights} does not match {cards} score cards")]
    WeightMismatch { weights: usize, cards: usize },
    #[error("weights must be non-negative and sum to a positive value")]
    BadWeights,
    #[error("lexicon: {0}")]
    Lexicon(String),
    #[error("unknown metric {0:?} (expected R1, R2, RL, M or U-f)")]
    UnknownMetric(String),
}

/// Precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn zero() -> Self {
        Self::default()
    }

    /// Ratios from a match count; an empty denominator yields 0 for that
    /// ratio, and F1 is 0 whenever `P + R = 0`.
    pub fn from_counts(matches: usize, cand_total: usize, ref_total: usize) -> Self {
        let ratio = |den: usize| if den == 0 { 0.0 } else { matches as f64 / den as f64 };
        Self::from_pr(ratio(cand_total), ratio(ref_total))
    }

    pub fn from_pr(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// Metric columns as they appear in score tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MetricName {
    R1,
    R2,
    RL,
    M,
    #[serde(rename = "U-f")]
    Uf,
}

impl MetricName {
    pub const ALL: [MetricName; 5] = [
        MetricName::R1,
        MetricName::R2,
        MetricName::RL,
        MetricName::M,
        MetricName::Uf,
    ];

    pub fn label(self) -> &'static str {
        match self {
            MetricName::R1 => "R1",
            MetricName::R2 => "R2",
            MetricName::RL => "RL",
            MetricName::M => "M",
            MetricName::Uf => "U-f",
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for MetricName {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricName::ALL
            .into_iter()
            .find(|m| m.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| MetricsError::UnknownMetric(s.to_string()))
    }
}

/// Per-example or aggregated scores.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreCard {
    pub rouge1: Prf,
    pub rouge2: Prf,
    #[serde(rename = "rougeL")]
    pub rouge_l: Prf,
    /// METEOR keeps its score in `f1`.
    pub meteor: Prf,
    pub concept_f1: Prf,
    pub n_examples: usize,
}

impl ScoreCard {
    /// The headline value of a metric column (F1, or the METEOR score).
    pub fn get(&self, metric: MetricName) -> f64 {
        match metric {
            MetricName::R1 => self.rouge1.f1,
            MetricName::R2 => self.rouge2.f1,
            MetricName::RL => self.rouge_l.f1,
            MetricName::M => self.meteor.f1,
            MetricName::Uf => self.concept_f1.f1,
        }
    }

    fn parts(&self) -> [Prf; 5] {
        [self.rouge1, self.rouge2, self.rouge_l, self.meteor, self.concept_f1]
    }

    fn from_parts(p: [Prf; 5], n_examples: usize) -> Self {
        Self {
            rouge1: p[0],
            rouge2: p[1],
            rouge_l: p[2],
            meteor: p[3],
            concept_f1: p[4],
            n_examples,
        }
    }
}

/// Scores one candidate/reference pair.
#[derive(Debug, Clone)]
pub struct MetricSuite {
    pub lexicon: ConceptLexicon,
}

impl MetricSuite {
    pub fn new(lexicon: ConceptLexicon) -> Self {
        Self { lexicon }
    }

    pub fn score(&self, candidate: &str, reference: &str) -> ScoreCard {
        let c = TokenSeq::new(candidate);
        let r = TokenSeq::new(reference);
        ScoreCard {
            rouge1: rouge_n(&c, &r, 1),
            rouge2: rouge_n(&c, &r, 2),
            rouge_l: rouge_l(&c, &r),
            meteor: meteor_lite(&c, &r),
            concept_f1: concept_f1(&c, &r, &self.lexicon),
            n_examples: 1,
        }
    }

    /// Scores `(candidate, reference)` pairs, preserving order.
    pub fn score_batch<S: AsRef<str> + Sync>(&self, pairs: &[(S, S)], exec: Exec) -> Vec<ScoreCard> {
        exec.map(pairs, |(c, r)| self.score(c.as_ref(), r.as_ref()))
    }
}

/// Averages score cards component-wise.
///
/// Without weights this is the plain mean used within a section. With
/// weights (example counts) it is the weighted mean used for the
/// cross-section "Overall" row. `n_examples` of the result is the sum of
/// the inputs'.
pub fn aggregate(cards: &[ScoreCard], weights: Option<&[f64]>) -> Result<ScoreCard, MetricsError> {
    if cards.is_empty() {
        return Err(MetricsError::EmptyAggregate);
    }
    let uniform;
    let w = match weights {
        Some(w) => {
            if w.len() != cards.len() {
                return Err(MetricsError::WeightMismatch {
                    weights: w.len(),
                    cards: cards.len(),
                });
            }
            w
        }
        None => {
            uniform = vec![1.0; cards.len()];
            &uniform
        }
    };
    let total: f64 = w.iter().sum();
    if w.iter().any(|x| *x < 0.0 || !x.is_finite()) || total <= 0.0 {
        return Err(MetricsError::BadWeights);
    }
    let mut acc = [Prf::zero(); 5];
    for (card, &wi) in cards.iter().zip(w) {
        for (a, p) in acc.iter_mut().zip(card.parts()) {
            a.precision += wi * p.precision;
            a.recall += wi * p.recall;
            a.f1 += wi * p.f1;
        }
    }
    for a in &mut acc {
        a.precision /= total;
        a.recall /= total;
        a.f1 /= total;
    }
    let n = cards.iter().map(|c| c.n_examples).sum();
    Ok(ScoreCard::from_parts(acc, n))
}

/// Cross-section aggregate weighted by each card's `n_examples`.
pub fn aggregate_by_examples(cards: &[ScoreCard]) -> Result<ScoreCard, MetricsError> {
    let w: Vec<f64> = cards.iter().map(|c| c.n_examples as f64).collect();
    aggregate(cards, Some(&w))
}

/// Round half away from zero to `decimals` places.
///
/// A relative nudge absorbs binary representation error so that values
/// such as `4.42` computed as `4.41999…` round as written.
pub fn round_half_up(value: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    let scaled = value.abs() * scale;
    let nudged = scaled + scaled * 1e-12 + 1e-12;
    value.signum() * (nudged + 0.5).floor() / scale
}

/// Table presentation of a `[0,1]` score: ×100, two decimals.
pub fn format_points(value: f64) -> String {
    format!("{:.2}", round_half_up(value * 100.0, 2) + 0.0)
}

/// Signed two-decimal delta (`+4.42`, `-2.50`, `+0.00`).
pub fn format_delta(points: f64) -> String {
    let r = round_half_up(points, 2) + 0.0;
    if r < 0.0 {
        format!("{r:.2}")
    } else {
        format!("+{r:.2}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn card_r1(v: f64, n: usize) -> ScoreCard {
        let p = Prf::from_pr(v, v);
        ScoreCard::from_parts([p, p, p, p, p], n)
    }

    #[test]
    fn mean_of_two_cards() {
        let a = aggregate(&[card_r1(0.2, 1), card_r1(0.4, 1)], None).unwrap();
        assert!((a.rouge1.f1 - 0.3).abs() < 1e-12);
        assert_eq!(a.n_examples, 2);
    }

    #[test]
    fn example_weighted_overall() {
        let a = aggregate_by_examples(&[card_r1(0.0, 1), card_r1(0.4, 3)]).unwrap();
        assert!((a.rouge1.f1 - 0.3).abs() < 1e-12);
    }

    #[test]
    fn single_card_is_itself() {
        let c = card_r1(0.37, 4);
        assert_eq!(aggregate(&[c], None).unwrap(), c);
    }

    #[test]
    fn aggregate_errors() {
        assert!(matches!(aggregate(&[], None), Err(MetricsError::EmptyAggregate)));
        assert!(matches!(
            aggregate(&[card_r1(0.1, 1)], Some(&[1.0, 2.0])),
            Err(MetricsError::WeightMismatch { .. })
        ));
        assert!(matches!(
            aggregate(&[card_r1(0.1, 1)], Some(&[0.0])),
            Err(MetricsError::BadWeights)
        ));
    }

    #[test]
    fn rounding_for_tables() {
        assert_eq!(format_points(0.235), "23.50");
        assert_eq!(format_delta((0.2792 - 0.2350) * 100.0), "+4.42");
        assert_eq!(format_delta(-2.5), "-2.50");
        assert_eq!(format_delta(0.0), "+0.00");
        assert_eq!(format_delta(-0.001), "+0.00");
        assert_eq!(round_half_up(1.005, 2), 1.01);
        assert_eq!(round_half_up(-1.005, 2), -1.01);
        assert_eq!(format_points(1.0), "100.00");
    }

    #[test]
    fn metric_names_round_trip() {
        for m in MetricName::ALL {
            assert_eq!(m.label().parse::<MetricName>().unwrap(), m);
        }
        assert!("BLEU".parse::<MetricName>().is_err());
    }

    #[test]
    fn suite_identity_case() {
        let suite = MetricSuite::new(ConceptLexicon::parse("C1\tchest pain").unwrap());
        let s = suite.score("Chest pain x2 days.", "chest pain x2 days");
        assert_eq!((s.rouge1.f1, s.rouge2.f1, s.rouge_l.f1, s.concept_f1.f1), (1.0, 1.0, 1.0, 1.0));
        assert!((s.meteor.f1 - (1.0 - 0.5 / 64.0)).abs() < 1e-12);
    }
}
