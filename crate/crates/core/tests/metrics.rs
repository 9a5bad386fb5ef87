mod support;

use proptest::prelude::*;
use soapopt_core::metrics::{
    aggregate, concept_f1, meteor_lite, rouge_l, rouge_n, ConceptLexicon, MetricSuite, ScoreCard, TokenSeq,
};

fn t(s: &str) -> TokenSeq {
    TokenSeq::new(s)
}

#[test]
fn rouge_matches_brute_force_oracle() {
    let n = support::oracle::run_sweep().unwrap();
    assert!(n >= 10_000, "{n} pairs");
}

#[test]
fn hand_counted_fixtures() {
    let r1 = rouge_n(&t("the cat sat"), &t("the cat"), 1);
    assert!((r1.precision - 2.0 / 3.0).abs() < 1e-9 && r1.recall == 1.0);
    assert!((r1.f1 - 0.8).abs() < 1e-9);
    let r2 = rouge_n(&t("the cat sat on mat"), &t("the cat sat"), 2);
    assert!((r2.precision - 0.5).abs() < 1e-9 && r2.recall == 1.0);
    assert!((r2.f1 - 2.0 / 3.0).abs() < 1e-9);
    assert!((rouge_l(&t("a b c d"), &t("a c b d")).f1 - 0.75).abs() < 1e-9);
    assert!((meteor_lite(&t("a b"), &t("a b")).f1 - 0.9375).abs() < 1e-9);
    assert!((meteor_lite(&t("b a"), &t("a b")).f1 - 0.5).abs() < 1e-9);
    let lex = ConceptLexicon::from_pairs([("C1", "chest pain"), ("C2", "fever"), ("C3", "cough")]).unwrap();
    let c = concept_f1(&t("chest pain and cough"), &t("chest pain with fever"), &lex);
    assert!((c.precision - 0.5).abs() < 1e-9 && (c.recall - 0.5).abs() < 1e-9 && (c.f1 - 0.5).abs() < 1e-9);
}

#[test]
fn weighted_overall() {
    let card = |r1: f64, n: usize| {
        let mut c = ScoreCard::default();
        c.rouge1.f1 = r1;
        c.n_examples = n;
        c
    };
    let overall = aggregate(&[card(0.0, 1), card(0.4, 3)], Some(&[1.0, 3.0])).unwrap();
    assert!((overall.rouge1.f1 - 0.3).abs() < 1e-12);
    assert!(aggregate(&[], None).is_err());
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["chest", "pain", "fever", "no", "cough", "days", "the"]), 0..12)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

fn suite() -> MetricSuite {
    MetricSuite::new(ConceptLexicon::from_pairs([("C1", "chest pain"), ("C2", "fever"), ("C3", "cough")]).unwrap())
}

fn all_values(c: &ScoreCard) -> Vec<f64> {
    [c.rouge1, c.rouge2, c.rouge_l, c.meteor, c.concept_f1]
        .iter()
        .flat_map(|p| [p.precision, p.recall, p.f1])
        .collect()
}

proptest! {
    #[test]
    fn swap_duality(a in words(), b in words(), n in 1usize..4) {
        let (ta, tb) = (TokenSeq::from_tokens(a), TokenSeq::from_tokens(b));
        prop_assert_eq!(rouge_n(&ta, &tb, n).precision, rouge_n(&tb, &ta, n).recall);
        prop_assert_eq!(rouge_l(&ta, &tb).precision, rouge_l(&tb, &ta).recall);
    }

    #[test]
    fn scores_stay_in_unit_range(a in words(), b in words()) {
        let card = suite().score(&a.join(" "), &b.join(" "));
        for v in all_values(&card) {
            prop_assert!((0.0..=1.0).contains(&v), "{v}");
        }
    }

    #[test]
    fn identity_reaches_maximum(a in words().prop_filter("non-empty", |w| !w.is_empty())) {
        let text = a.join(" ");
        let card = suite().score(&text, &text);
        prop_assert_eq!(card.rouge1.f1, 1.0);
        prop_assert_eq!(card.rouge_l.f1, 1.0);
        prop_assert_eq!(card.concept_f1.f1, 1.0);
        if a.len() > 1 {
            prop_assert_eq!(card.rouge2.f1, 1.0);
        }
        let m = a.len() as f64;
        prop_assert!((card.meteor.f1 - (1.0 - 0.5 * (1.0 / m).powi(3))).abs() < 1e-12);
    }

    #[test]
    fn casing_and_punctuation_do_not_matter(a in words(), b in words(), seps in prop::collection::vec(prop::sample::select(vec![" ", ", ", " - ", ". ", ";\n"]), 12)) {
        let plain = suite().score(&a.join(" "), &b.join(" "));
        let noisy: String = a
            .iter()
            .enumerate()
            .map(|(i, w)| format!("{}{}", if i % 2 == 0 { w.to_uppercase() } else { w.clone() }, seps[i % seps.len()]))
            .collect();
        let edited = suite().score(&noisy, &format!("({}).", b.join(" ").to_uppercase()));
        prop_assert_eq!(plain, edited);
    }

    #[test]
    fn meteor_extending_a_chunk_never_hurts(r in words().prop_filter("len", |w| w.len() >= 2), i in 0usize..12, len in 1usize..12) {
        let start = i % r.len();
        let end = (start + len).min(r.len() - 1);
        prop_assume!(end > start);
        let reference = TokenSeq::from_tokens(r.clone());
        let shorter = meteor_lite(&TokenSeq::from_tokens(r[start..end].to_vec()), &reference).f1;
        let longer = meteor_lite(&TokenSeq::from_tokens(r[start..=end].to_vec()), &reference).f1;
        prop_assert!(longer + 1e-12 >= shorter, "{shorter} -> {longer}");
    }
}
