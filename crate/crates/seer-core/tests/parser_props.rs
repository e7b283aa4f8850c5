//! Generative checks for the tagged-section wire format: round-trip
//! identity, normal-form idempotence, rubric ceilings and fuzz safety.

use proptest::prelude::*;
use seer_core::trace::{
    canonical_view_captions, parse_structured_output, score_format, serialize_structured_output,
    CanonicalAnswer, EvidenceItem, RationaleStep, StructuredOutput,
};
use seer_core::volume::Laterality;

fn free_text() -> impl Strategy<Value = String> {
    // Single-line text, trim-stable, `]` allowed (observations may contain
    // it after the caption bracket closes).
    prop::string::string_regex("[a-zA-Z0-9À-ÿ一-鿿][a-zA-Z0-9À-ÿ一-鿿 ,.;:'\\-\\]]{0,40}")
        .expect("valid regex")
        .prop_map(|s| s.trim().to_string())
        .prop_filter("non-empty after trim", |s| !s.is_empty())
}

fn caption() -> impl Strategy<Value = String> {
    prop::string::string_regex("[a-z][a-z0-9 -]{0,18}[a-z0-9]").expect("valid regex")
}

fn tag() -> impl Strategy<Value = String> {
    prop::string::string_regex("[a-z]{2,12}(-[a-z]{2,12}){0,2}").expect("valid regex")
}

fn laterality() -> impl Strategy<Value = Option<Laterality>> {
    prop_oneof![
        Just(None),
        Just(Some(Laterality::Left)),
        Just(Some(Laterality::Right)),
        Just(Some(Laterality::Bilateral)),
    ]
}

prop_compose! {
    fn structured_output()(
        evidence in prop::collection::vec((caption(), free_text()), 1..4),
        rationale in prop::collection::vec((tag(), free_text()), 1..4),
        target in free_text(),
        lat in laterality(),
        subregion in prop::option::of(free_text()),
    ) -> StructuredOutput {
        StructuredOutput {
            evidence: evidence
                .into_iter()
                .map(|(view_caption, observation)| EvidenceItem { view_caption, observation })
                .collect(),
            rationale: rationale
                .into_iter()
                .map(|(skill_tag, text)| RationaleStep { skill_tag, text })
                .collect(),
            answer: CanonicalAnswer { target_id: target, laterality: lat, subregion },
        }
    }
}

proptest! {
    #[test]
    fn serialize_parse_round_trip(output in structured_output()) {
        let text = serialize_structured_output(&output);
        let (parsed, report) = parse_structured_output(&text);
        prop_assert_eq!(parsed.into_complete().expect("complete"), output);
        prop_assert_eq!(report.compliance, 1.0);
    }

    #[test]
    fn serialization_is_normal_form_idempotent(output in structured_output()) {
        let once = serialize_structured_output(&output);
        let (parsed, _) = parse_structured_output(&once);
        let twice = serialize_structured_output(&parsed.into_complete().expect("complete"));
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn registered_outputs_score_full_compliance(
        output in structured_output(),
        caption_idx in prop::collection::vec(0usize..6, 1..4),
    ) {
        // Pin captions to the canonical registry and register the tags and
        // target; the rubric must then award every quarter.
        let captions = canonical_view_captions();
        let mut output = output;
        for (i, item) in output.evidence.iter_mut().enumerate() {
            item.view_caption = captions[caption_idx[i % caption_idx.len()]].clone();
        }
        let tags: Vec<String> = output.rationale.iter().map(|s| s.skill_tag.clone()).collect();
        let vocab = vec![output.answer.target_id.clone()];
        let report = score_format(&serialize_structured_output(&output), &tags, &vocab);
        prop_assert_eq!(report.compliance, 1.0);
        prop_assert!(report.issues.is_empty());
    }

    #[test]
    fn parser_accepts_arbitrary_bytes(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        let text = String::from_utf8_lossy(&bytes);
        let (_, report) = parse_structured_output(&text);
        prop_assert!((0.0..=1.0).contains(&report.compliance));
        prop_assert_eq!(report.compliance == 1.0, report.issues.is_empty());
    }

    #[test]
    fn parser_accepts_arbitrary_text(text in "\\PC{0,400}") {
        let (_, report) = parse_structured_output(&text);
        prop_assert!((0.0..=1.0).contains(&report.compliance));
    }
}
