mod common;

use common::*;

use cardforge_core::enrich::{
    field_category, incomplete_fields, retrieve_similar, run_icc_mp, synthesize_field, EnrichConfig,
    EnrichError, EnrichOutcome, FieldCategory, Synthesis,
};
use cardforge_core::rng::SplitMix64;
use cardforge_core::schema::{serialize_card, taxonomy, Card, CardKind, Field, FieldKey, FieldProvenance, FieldStatus};

const SYNTH: &str = "Reference values from similar cards";

fn key(name: &str) -> FieldKey {
    FieldKey::new(CardKind::Model, name).unwrap()
}

fn target_missing(names: &[&str]) -> Card {
    let mut card = filled_card("org/target", CardKind::Model, "target", &["pytorch", "text-generation", "llama"]);
    for n in names {
        card.set_field(Field::missing(key(n)));
    }
    card
}

fn similar_pool() -> Vec<cardforge_core::pool::PoolEntry> {
    vec![
        pool_entry(filled_card("org/sim-a", CardKind::Model, "alpha", &["pytorch", "text-generation", "llama"]), 500),
        pool_entry(filled_card("org/sim-b", CardKind::Model, "beta", &["pytorch", "text-generation", "llama"]), 400),
        pool_entry(filled_card("org/far", CardKind::Model, "far", &["jax", "audio"]), 900),
    ]
}

#[test]
fn complete_card_is_returned_unchanged_without_calls() {
    let card = filled_card("org/full", CardKind::Model, "v", &["x"]);
    let (m, gw) = mock(vec![]);
    let out = run_icc_mp(&card, &similar_pool(), &EnrichConfig::default(), &gw).unwrap();
    assert_eq!(serialize_card(&out.card), serialize_card(&card));
    assert!(out.events.is_empty());
    assert!(m.captured().is_empty());
}

#[test]
fn missing_shared_field_is_transferred_from_both_sources() {
    let card = target_missing(&["intended_use"]);
    let (m, gw) = mock(vec![(RERANK, "[0.4, 0.8]"), (SYNTH, "Chat assistants and research.\nCONFIDENCE: 0.5")]);
    let out = run_icc_mp(&card, &similar_pool(), &EnrichConfig::default(), &gw).unwrap();
    let f = out.card.field(key("intended_use")).unwrap();
    assert_eq!(f.value, "Chat assistants and research.");
    assert_eq!(
        f.provenance,
        FieldProvenance::PoolTransfer {
            source_card_ids: vec!["org/sim-b".into(), "org/sim-a".into()]
        }
    );
    assert_eq!(out.events.len(), 1);
    assert_eq!(out.events[0].outcome, EnrichOutcome::Enriched);
    assert_eq!(out.events[0].candidate_ids, vec!["org/sim-b", "org/sim-a"]);
    // The dissimilar card never reaches the reranker.
    assert!(!m.captured().iter().any(|p| p.contains("org/far")));
}

#[test]
fn unique_field_stays_missing() {
    let card = target_missing(&["model_details"]);
    let (m, gw) = mock(vec![(RERANK, "[0.4, 0.8]"), (SYNTH, "copied")]);
    let out = run_icc_mp(&card, &similar_pool(), &EnrichConfig::default(), &gw).unwrap();
    assert_eq!(out.card.field(key("model_details")).unwrap().status, FieldStatus::Missing);
    assert_eq!(out.events[0].outcome, EnrichOutcome::SkippedUnique);
    assert!(m.captured().is_empty());
}

#[test]
fn no_similar_cards_means_no_gateway_call() {
    let mut card = target_missing(&["intended_use"]);
    card.tags = tags(&["something-else"]);
    let (m, gw) = mock(vec![]);
    let out = run_icc_mp(&card, &similar_pool(), &EnrichConfig::default(), &gw).unwrap();
    assert_eq!(out.events[0].outcome, EnrichOutcome::NoCandidates);
    assert!(m.captured().is_empty());
    assert_eq!(out.card, card);
}

#[test]
fn not_applicable_sentinel() {
    let card = target_missing(&["ethical_considerations"]);
    let (_, gw) = mock(vec![(RERANK, "[0.4, 0.8]"), (SYNTH, "NOT_APPLICABLE")]);
    let out = run_icc_mp(&card, &similar_pool(), &EnrichConfig::default(), &gw).unwrap();
    let f = out.card.field(key("ethical_considerations")).unwrap();
    assert_eq!(f.status, FieldStatus::NotApplicable);
    assert!(matches!(f.provenance, FieldProvenance::PoolTransfer { .. }));
}

#[test]
fn synthesis_contract() {
    let card = target_missing(&["intended_use"]);
    let (_, gw) = mock(vec![(SYNTH, "Research use only.")]);
    let s = synthesize_field(&["Research use only.".to_string()], &card, key("intended_use"), &gw).unwrap();
    assert_eq!(
        s,
        Synthesis::Value {
            text: "Research use only.".into(),
            confidence: cardforge_core::Confidence::Medium
        }
    );
    let (m, gw) = mock(vec![]);
    let err = synthesize_field(&["x".to_string()], &card, key("model_details"), &gw).unwrap_err();
    assert_eq!(err, EnrichError::UniqueField("model_details".into()));
    assert!(m.captured().is_empty());
}

#[test]
fn top_k_limits_reranked_survivors() {
    let pool: Vec<_> = (0..15)
        .map(|i| pool_entry(filled_card(&format!("org/s{i:02}"), CardKind::Model, "v", &["a", "b"]), 200))
        .collect();
    let mut card = Card::empty("org/t", CardKind::Model);
    card.tags = tags(&["a", "b"]);
    let scores: Vec<String> = (0..15).map(|i| format!("{}", i as f64 / 10.0)).collect();
    let script = format!("[{}]", scores.join(","));
    let (_, gw) = mock(vec![(RERANK, script.as_str())]);
    let sims = retrieve_similar(&card, &pool, &EnrichConfig::default(), &gw).unwrap();
    let ids: Vec<&str> = sims.iter().map(|s| s.entry.card.id.as_str()).collect();
    let expected: Vec<String> = (5..15).rev().map(|i| format!("org/s{i:02}")).collect();
    assert_eq!(ids, expected);

    let (_, gw) = mock(vec![(RERANK, "[0.1, 0.3, 0.2]")]);
    let sims = retrieve_similar(&card, &pool[..3], &EnrichConfig::default(), &gw).unwrap();
    let ids: Vec<&str> = sims.iter().map(|s| s.entry.card.id.as_str()).collect();
    assert_eq!(ids, vec!["org/s01", "org/s02", "org/s00"]);
    assert!(sims.iter().all(|s| s.overlap > 0.5));
}

#[test]
fn random_missing_patterns_never_touch_filled_or_unique_fields() {
    let pool = similar_pool();
    let mut rng = SplitMix64::new(42);
    for case in 0..200 {
        let kind = if case % 2 == 0 { CardKind::Model } else { CardKind::Data };
        let mut pool_k = pool.clone();
        if kind == CardKind::Data {
            pool_k = vec![
                pool_entry(filled_card("d/a", kind, "alpha", &["pytorch", "text-generation", "llama"]), 500),
                pool_entry(filled_card("d/b", kind, "beta", &["pytorch", "text-generation", "llama"]), 500),
            ];
        }
        let mut card = filled_card("org/target", kind, "target", &["pytorch", "text-generation", "llama"]);
        for k in taxonomy(kind) {
            match rng.next_u64() % 3 {
                0 => {
                    card.set_field(Field::missing(k));
                }
                1 => {
                    card.set_field(Field::not_applicable(k, FieldProvenance::Imported));
                }
                _ => {}
            }
        }
        let (m, gw) = mock(vec![(RERANK, "[0.4, 0.8]"), (SYNTH, "synthesized")]);
        let out = run_icc_mp(&card, &pool_k, &EnrichConfig::default(), &gw).unwrap();
        for (before, after) in card.fields.iter().zip(&out.card.fields) {
            if before.status != FieldStatus::Missing || field_category(before.key) == FieldCategory::Unique {
                assert_eq!(before, after, "case {case}: {:?} changed", before.key);
            }
        }
        if incomplete_fields(&card).is_empty() {
            assert_eq!(serialize_card(&out.card), serialize_card(&card));
            assert!(m.captured().is_empty());
        }
    }
}
