use cardforge_core::schema::{
    classify_value, parse_card, serialize_card, serialize_card_pretty, taxonomy, validate_card, Card, CardKind,
    Confidence, Field, FieldProvenance, FieldStatus, SchemaError, ValueClass,
};
use proptest::prelude::*;

fn provenance() -> impl Strategy<Value = FieldProvenance> {
    prop_oneof![
        (0u32..20).prop_map(|round| FieldProvenance::Extraction { round }),
        prop::collection::vec("[a-z]{1,6}/[a-z0-9-]{1,8}", 1..4)
            .prop_map(|source_card_ids| FieldProvenance::PoolTransfer { source_card_ids }),
        Just(FieldProvenance::Imported),
        Just(FieldProvenance::Unset),
    ]
}

fn value() -> impl Strategy<Value = String> {
    "[A-Za-z][A-Za-z0-9 ,.;:()\n\"'/-]{0,60}[A-Za-z0-9.)]"
        .prop_filter("must be ordinary text", |v| classify_value(v) == ValueClass::Text(v))
}

fn status() -> impl Strategy<Value = (FieldStatus, String)> {
    prop_oneof![
        Just((FieldStatus::Missing, String::new())),
        Just((FieldStatus::NotApplicable, String::new())),
        (prop::sample::select(Confidence::ALL.to_vec()), value()).prop_map(|(c, v)| (FieldStatus::Filled(c), v)),
    ]
}

fn card() -> impl Strategy<Value = Card> {
    (
        prop_oneof![Just(CardKind::Model), Just(CardKind::Data)],
        "[a-zA-Z0-9_-]{1,12}(/[a-zA-Z0-9._-]{1,16})?",
        prop::collection::btree_set("[a-z0-9:.-]{1,12}", 0..6),
        prop::collection::vec((status(), provenance()), 12),
    )
        .prop_map(|(kind, id, tags, fields)| {
            let mut card = Card::empty(id, kind);
            card.tags = tags;
            for (key, ((status, value), provenance)) in taxonomy(kind).into_iter().zip(fields) {
                card.set_field(Field {
                    key,
                    value,
                    status,
                    provenance,
                });
            }
            card
        })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 1000, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn serialize_then_parse_is_identity(card in card()) {
        prop_assert!(validate_card(&card).is_ok());
        let text = serialize_card(&card);
        let back = parse_card(&text).unwrap();
        prop_assert_eq!(&back, &card);
        prop_assert_eq!(serialize_card(&back), text);
        prop_assert_eq!(parse_card(&serialize_card_pretty(&card)).unwrap(), card);
    }
}

#[test]
fn off_scale_confidence_is_rejected() {
    let doc = r#"{"id":"m","kind":"model","fields":{"intended_use":{"value":"chat","confidence":0.6}}}"#;
    assert!(matches!(parse_card(doc), Err(SchemaError::InvalidConfidence(c)) if c == 0.6));
}
