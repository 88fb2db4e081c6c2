mod common;

use common::*;

use cardforge_core::gateway::Gateway;
use cardforge_core::pool::{
    build_pool, pool_from_jsonl, pool_to_jsonl, retained_count, structure_card, HubRecord, PoolConfig, PoolEntry,
    PoolError,
};
use cardforge_core::schema::{taxonomy, Card, CardKind, Confidence, Field, FieldProvenance};
use proptest::prelude::*;

/// Entry whose WCCI is `filled / fields` at full confidence.
fn entry(id: &str, kind: CardKind, filled: usize, downloads: u64) -> PoolEntry {
    let mut card = Card::empty(id, kind);
    for key in taxonomy(kind).into_iter().take(filled) {
        card.set_field(Field::from_text(key, "documented", Confidence::Certain, FieldProvenance::Imported));
    }
    PoolEntry::from_card(card, downloads, 1, None).unwrap()
}

/// Entry with a WCCI set directly, bypassing the card, for ordering tests.
fn scored(id: &str, wcci: f64, downloads: u64) -> PoolEntry {
    PoolEntry {
        wcci,
        ..entry(id, CardKind::Model, 0, downloads)
    }
}

#[test]
fn top_decile_of_distinct_scores() {
    let entries: Vec<PoolEntry> = (0..100).map(|i| scored(&format!("m{i:03}"), (i * 37 % 100) as f64 / 100.0, 500)).collect();
    let cfg = PoolConfig {
        wcci_percentile: None,
        min_downloads: 0,
    };
    let pool = build_pool(&entries, &cfg).unwrap();
    let mut oracle = entries.clone();
    oracle.sort_by(|a, b| b.wcci.partial_cmp(&a.wcci).unwrap());
    let expected: Vec<&str> = oracle[..10].iter().map(|e| e.id()).collect();
    assert_eq!(pool.iter().map(|e| e.id()).collect::<Vec<_>>(), expected);
}

#[test]
fn boundary_tie_goes_to_more_downloads() {
    let mut entries: Vec<PoolEntry> = (0..9).map(|i| scored(&format!("top{i}"), 0.9 + i as f64 / 1000.0, 200)).collect();
    entries.push(scored("tie-low", 0.5, 150));
    entries.push(scored("tie-high", 0.5, 900));
    entries.extend((0..9).map(|i| scored(&format!("rest{i}"), 0.1, 200)));
    let cfg = PoolConfig {
        wcci_percentile: Some(0.5),
        min_downloads: 0,
    };
    let pool = build_pool(&entries, &cfg).unwrap();
    assert_eq!(pool.len(), 10);
    assert!(pool.iter().any(|e| e.id() == "tie-high"));
    assert!(!pool.iter().any(|e| e.id() == "tie-low"));
}

#[test]
fn default_percentiles_per_kind() {
    let data: Vec<PoolEntry> = (0..10).map(|i| entry(&format!("d{i}"), CardKind::Data, i, 1000)).collect();
    assert_eq!(build_pool(&data, &PoolConfig::default()).unwrap().len(), 3);
    let model: Vec<PoolEntry> = (0..10).map(|i| entry(&format!("m{i}"), CardKind::Model, i % 9, 1000)).collect();
    assert_eq!(build_pool(&model, &PoolConfig::default()).unwrap().len(), 1);
    let mut mixed = data.clone();
    mixed.push(model[0].clone());
    assert!(matches!(build_pool(&mixed, &PoolConfig::default()), Err(PoolError::MixedKinds(..))));
}

#[test]
fn jsonl_round_trip_revalidates_wcci() {
    let entries: Vec<PoolEntry> = (0..5).map(|i| entry(&format!("org/d{i}"), CardKind::Data, i * 2, i as u64)).collect();
    let text = pool_to_jsonl(&entries);
    assert_eq!(pool_from_jsonl(&text).unwrap(), entries);
    let broken = text.replacen("\"wcci\":0.0", "\"wcci\":0.5", 1);
    assert!(matches!(pool_from_jsonl(&broken), Err(PoolError::InvalidLine { line: 1, .. })));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 128, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn pool_size_and_dominance(
        specs in prop::collection::vec((0usize..=8, 0u64..300), 1..60),
        p in 0.01f64..=1.0,
        min_downloads in 0u64..200,
    ) {
        let entries: Vec<PoolEntry> = specs
            .iter()
            .enumerate()
            .map(|(i, (filled, dl))| entry(&format!("e{i:02}"), CardKind::Model, *filled, *dl))
            .collect();
        let cfg = PoolConfig { wcci_percentile: Some(p), min_downloads };
        let survivors: Vec<&PoolEntry> = entries.iter().filter(|e| e.downloads >= min_downloads).collect();
        match build_pool(&entries, &cfg) {
            Err(PoolError::EmptyAfterFilter) => prop_assert!(survivors.is_empty()),
            Err(e) => prop_assert!(false, "unexpected error {e}"),
            Ok(pool) => {
                prop_assert_eq!(pool.len(), retained_count(p, survivors.len()));
                prop_assert_eq!(pool.len(), (p * survivors.len() as f64 - 1e-9).ceil() as usize);
                let kept: std::collections::HashSet<&str> = pool.iter().map(|e| e.id()).collect();
                let floor = pool.iter().map(|e| e.wcci).fold(f64::INFINITY, f64::min);
                for s in survivors.iter().filter(|s| !kept.contains(s.id())) {
                    prop_assert!(s.wcci <= floor);
                }
                prop_assert!(pool.windows(2).all(|w| w[0].wcci >= w[1].wcci));
            }
        }
    }
}

fn record(description: &str) -> HubRecord {
    HubRecord {
        id: "org/data".into(),
        tags: vec!["arxiv:2301.00001".into()],
        downloads: 5,
        likes: 1,
        description: Some(description.into()),
        source_ref: None,
    }
}

fn data_card_json() -> String {
    let fields: Vec<String> = taxonomy(CardKind::Data)
        .iter()
        .map(|k| format!("\"{}\":{{\"value\":\"About {}\",\"confidence\":0.75}}", k.name(), k.title()))
        .collect();
    format!("{{{}}}", fields.join(","))
}

#[test]
fn structuring_valid_response() {
    let json = format!("```json\n{}\n```", data_card_json());
    let (_, gw): (_, Gateway) = mock(vec![("Convert the repository description", json.as_str())]);
    let s = structure_card(&record("A dataset of cat photos."), CardKind::Data, &gw).unwrap();
    assert!(!s.repaired);
    assert_eq!(s.card.filled_fields().count(), 12);
    assert!(s.card.tags.contains("arxiv:2301.00001"));
}

#[test]
fn structuring_repairs_once() {
    let json = data_card_json();
    let truncated = &json[..json.len() / 2];
    let (m, gw) = mock(vec![("Convert the repository description", truncated), ("Reply again with only the JSON object described above", json.as_str())]);
    let s = structure_card(&record("A dataset."), CardKind::Data, &gw).unwrap();
    assert!(s.repaired);
    assert_eq!(m.captured().len(), 2);

    let (m, gw) = mock(vec![("Convert the repository description", "Here is a nice summary."), ("Reply again with only the JSON object described above", "Still prose.")]);
    let err = structure_card(&record("A dataset."), CardKind::Data, &gw).unwrap_err();
    assert!(matches!(err, PoolError::StructuringFailed(id) if id == "org/data"));
    assert_eq!(m.captured().len(), 2);
}
