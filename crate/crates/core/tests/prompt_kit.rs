use std::collections::BTreeMap;

use proptest::prelude::*;
use soapopt_core::corpus::SectionId;
use soapopt_core::prompt_kit::{parse_structured, ParseMode, ReplyKind, TemplateSet};

fn kind_and_fields() -> impl Strategy<Value = (ReplyKind, BTreeMap<String, String>)> {
    let text = "[A-Za-z0-9 .,:;'\"{}\\[\\]\\\\/-]{0,30}[A-Za-z0-9]";
    prop_oneof![Just(ReplyKind::Summary), Just(ReplyKind::Gradient), Just(ReplyKind::Update)].prop_flat_map(move |kind| {
        let keys = kind.required_keys();
        prop::collection::vec(text, keys.len()).prop_map(move |vals| {
            (kind, keys.iter().map(|k| k.to_string()).zip(vals).collect::<BTreeMap<_, _>>())
        })
    })
}

/// Prose with no braces at all, so it cannot hide or unbalance a group.
fn prose() -> impl Strategy<Value = String> {
    "[A-Za-z0-9 .,:;!?'`\n-]{0,60}"
}

proptest! {
    #[test]
    fn dictionary_form_round_trips((kind, fields) in kind_and_fields(), strict in any::<bool>()) {
        let mode = if strict { ParseMode::Strict } else { ParseMode::Lenient };
        let dict = serde_json::to_string(&fields).unwrap();
        let reply = parse_structured(&dict, kind, mode).unwrap();
        let again = parse_structured(&reply.to_dict_text(), kind, mode).unwrap();
        prop_assert_eq!(&again.fields, &reply.fields);
        let trimmed: BTreeMap<String, String> = fields.iter().map(|(k, v)| (k.clone(), v.trim().to_string())).collect();
        prop_assert_eq!(reply.fields, trimmed);
    }

    #[test]
    fn dictionary_is_recovered_from_surrounding_prose(
        (kind, fields) in kind_and_fields(),
        before in prose(),
        after in prose(),
        fenced in any::<bool>(),
    ) {
        let dict = serde_json::to_string_pretty(&fields).unwrap();
        let body = if fenced { format!("```json\n{dict}\n```") } else { dict };
        let text = format!("{before}{body}{after}");
        let reply = parse_structured(&text, kind, ParseMode::Lenient).unwrap();
        let trimmed: BTreeMap<String, String> = fields.iter().map(|(k, v)| (k.clone(), v.trim().to_string())).collect();
        prop_assert_eq!(reply.fields, trimmed);
        prop_assert_eq!(reply.raw, text);
    }

    #[test]
    fn rendering_is_pure(instruction in "[a-z].{0,40}", dialogue in "[a-z].{0,80}", suggestions in prop::collection::vec("[a-z].{0,20}", 1..4)) {
        let t = TemplateSet::bundled();
        let s = SectionId::parse("GENHX").unwrap();
        prop_assert_eq!(t.render_forward(&instruction, &s, &dialogue).unwrap(), t.render_forward(&instruction, &s, &dialogue).unwrap());
        let u1 = t.render_update(&instruction, &suggestions).unwrap();
        prop_assert_eq!(&u1, &t.render_update(&instruction, &suggestions).unwrap());
        let mut last = 0;
        for i in 1..=suggestions.len() {
            let at = u1.find(&format!("Suggestions from summary [{i}]:")).unwrap();
            prop_assert!(at >= last);
            last = at;
        }
    }
}
