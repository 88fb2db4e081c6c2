//! Completion of missing card fields from a pool of similar cards.
//!
//! Similar cards are found in two phases: IDF-weighted Jaccard overlap of
//! metadata tags against a threshold, then semantic reranking of card
//! summaries with a top-k cut. For each missing field the values carried by
//! the similar cards are synthesized into one value under a rubric chosen by
//! the field's category. Fields in the `Unique` category are never
//! transferred.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::split_confidence;
use crate::gateway::{Gateway, GatewayError, Message, Prompt};
use crate::pool::PoolEntry;
use crate::schema::{
    classify_value, validate_card, Card, CardKind, Confidence, Field, FieldKey, FieldProvenance,
    FieldStatus, ValueClass, Violation,
};
use crate::workers::map_ordered;

pub const NOT_APPLICABLE_SENTINEL: &str = "NOT_APPLICABLE";

/// Characters of each filled field included in a card summary.
pub const SUMMARY_FIELD_CHARS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnrichConfig {
    pub top_k: usize,
    /// Pool entries need a tag overlap strictly above this.
    pub alpha: f64,
}

impl Default for EnrichConfig {
    fn default() -> Self {
        EnrichConfig { top_k: 10, alpha: 0.5 }
    }
}

impl EnrichConfig {
    pub fn validate(&self) -> Result<(), EnrichError> {
        if self.top_k == 0 {
            return Err(EnrichError::InvalidConfig("top_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(EnrichError::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnrichError {
    #[error("invalid enrichment config: {0}")]
    InvalidConfig(String),
    #[error("pool is empty")]
    EmptyPool,
    #[error("card `{id}` is invalid: {violations:?}")]
    InvalidCard { id: String, violations: Vec<Violation> },
    #[error("field `{0}` is artifact-specific and cannot be transferred")]
    UniqueField(String),
    #[error("no source values to synthesize from")]
    NoValues,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldCategory {
    /// Commonly inferable from architecturally similar artifacts.
    Shared,
    /// Artifact-specific; never transferred.
    Unique,
    /// Broadly applicable across similar contexts.
    General,
}

pub fn field_category(key: FieldKey) -> FieldCategory {
    match (key.kind(), key.name()) {
        (CardKind::Model, "model_details") | (CardKind::Data, "dataset_details") => FieldCategory::Unique,
        (CardKind::Model, "ethical_considerations" | "safety_considerations")
        | (CardKind::Data, "legal_ethical") => FieldCategory::General,
        _ => FieldCategory::Shared,
    }
}

/// Keys whose status is `Missing`, in taxonomy order.
pub fn incomplete_fields(card: &Card) -> Vec<FieldKey> {
    card.fields
        .iter()
        .filter(|f| f.status == FieldStatus::Missing)
        .map(|f| f.key)
        .collect()
}

/// Inverse document frequencies over a pool's tag sets.
#[derive(Debug, Clone, PartialEq)]
pub struct IdfTable {
    n: usize,
    df: BTreeMap<String, usize>,
}

impl IdfTable {
    pub fn from_tag_sets<'a>(sets: impl IntoIterator<Item = &'a BTreeSet<String>>) -> Result<Self, EnrichError> {
        let mut n = 0;
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for set in sets {
            n += 1;
            for tag in set {
                *df.entry(tag.clone()).or_default() += 1;
            }
        }
        if n == 0 {
            return Err(EnrichError::EmptyPool);
        }
        Ok(IdfTable { n, df })
    }

    /// `ln((1 + N) / (1 + df)) + 1`; unseen tags have `df = 0`.
    pub fn weight(&self, tag: &str) -> f64 {
        let df = self.df.get(tag).copied().unwrap_or(0);
        ((1 + self.n) as f64 / (1 + df) as f64).ln() + 1.0
    }

    pub fn pool_size(&self) -> usize {
        self.n
    }

    pub fn vector(&self, tags: &BTreeSet<String>) -> TagVector {
        TagVector {
            weights: tags.iter().map(|t| (t.clone(), self.weight(t))).collect(),
        }
    }
}

pub fn idf_weights(pool: &[PoolEntry]) -> Result<IdfTable, EnrichError> {
    IdfTable::from_tag_sets(pool.iter().map(|e| &e.tags))
}

/// IDF-weighted binary tag presence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TagVector {
    pub weights: BTreeMap<String, f64>,
}

/// Weighted Jaccard: weight of shared tags over weight of all tags. Two
/// empty vectors overlap 0.
pub fn tag_overlap(a: &TagVector, b: &TagVector) -> f64 {
    // Walk the union in tag order so the sums, and the result, are symmetric.
    let mut shared = 0.0;
    let mut union = 0.0;
    let tags: BTreeSet<&String> = a.weights.keys().chain(b.weights.keys()).collect();
    for tag in tags {
        let wa = a.weights.get(tag).copied().unwrap_or(0.0);
        let wb = b.weights.get(tag).copied().unwrap_or(0.0);
        shared += wa.min(wb);
        union += wa.max(wb);
    }
    if union == 0.0 {
        0.0
    } else {
        (shared / union).clamp(0.0, 1.0)
    }
}

/// Reranker input for a card: id, tags, and the head of each filled field.
pub fn card_summary(card: &Card) -> String {
    let mut out = format!("{}\ntags: {}\n", card.id, card.tags.iter().cloned().collect::<Vec<_>>().join(", "));
    for f in card.filled_fields() {
        let head: String = f.value.chars().take(SUMMARY_FIELD_CHARS).collect();
        out.push_str(&format!("{}: {}\n", f.key.title(), head));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarCard<'a> {
    pub entry: &'a PoolEntry,
    pub overlap: f64,
    pub rerank_score: f64,
}

/// Tag-overlap filter followed by rerank and top-k. No gateway call is made
/// when nothing passes the filter.
pub fn retrieve_similar<'a>(
    card: &Card,
    pool: &'a [PoolEntry],
    config: &EnrichConfig,
    gateway: &Gateway,
) -> Result<Vec<SimilarCard<'a>>, EnrichError> {
    config.validate()?;
    let idf = idf_weights(pool)?;
    let target = idf.vector(&card.tags);
    let survivors: Vec<(&PoolEntry, f64)> = pool
        .iter()
        .filter(|e| e.card.kind == card.kind)
        .map(|e| (e, tag_overlap(&target, &idf.vector(&e.tags))))
        .filter(|(_, overlap)| *overlap > config.alpha)
        .collect();
    if survivors.is_empty() {
        return Ok(Vec::new());
    }
    let summaries: Vec<String> = survivors.iter().map(|(e, _)| card_summary(&e.card)).collect();
    let ranked = gateway.rerank(&card_summary(card), &summaries)?;
    Ok(ranked
        .scores
        .iter()
        .take(config.top_k)
        .map(|&(i, score)| SimilarCard {
            entry: survivors[i].0,
            overlap: survivors[i].1,
            rerank_score: score,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Synthesis {
    Value { text: String, confidence: Confidence },
    NotApplicable,
}

fn category_rubric(category: FieldCategory) -> &'static str {
    match category {
        FieldCategory::Shared => {
            "This field describes properties that architecturally similar artifacts commonly share. \
             Keep only statements that plausibly hold for the target artifact given its own \
             documentation, and phrase them as inferred from similar artifacts."
        }
        FieldCategory::General => {
            "This field holds guidance that applies broadly across similar contexts. Merge the \
             reference values into general guidance relevant to the target artifact."
        }
        FieldCategory::Unique => "This field is artifact-specific.",
    }
}

/// Synthesizes one value for `key` of `card` from reference values taken
/// from similar cards.
pub fn synthesize_field(values: &[String], card: &Card, key: FieldKey, gateway: &Gateway) -> Result<Synthesis, EnrichError> {
    let category = field_category(key);
    if category == FieldCategory::Unique {
        return Err(EnrichError::UniqueField(key.name().to_string()));
    }
    if values.is_empty() {
        return Err(EnrichError::NoValues);
    }
    let mut context = String::new();
    for f in card.filled_fields() {
        context.push_str(&format!("{}: {}\n", f.key.title(), f.value));
    }
    if context.is_empty() {
        context.push_str("(no filled fields)\n");
    }
    let mut refs = String::new();
    for (i, v) in values.iter().enumerate() {
        refs.push_str(&format!("[{}] {}\n", i + 1, v));
    }
    let user = format!(
        "Target field: {title}\nField scope: {desc}\n\n{rubric}\n\n\
         Target card fields:\n{context}\nReference values from similar cards:\n{refs}\n\
         Write the value for the target field. Do not copy artifact-specific names, numbers, or \
         contacts that belong to the reference artifacts. If none of the reference content \
         applies to the target, reply with exactly {sentinel}. Otherwise end with a final line \
         `CONFIDENCE: <0.25|0.5|0.75|1.0>`.",
        title = key.title(),
        desc = key.description(),
        rubric = category_rubric(category),
        sentinel = NOT_APPLICABLE_SENTINEL,
    );
    let response = gateway.generate(&Prompt::new(vec![
        Message::system("You complete missing documentation fields using similar, well-documented artifacts."),
        Message::user(user),
    ]))?;
    if response.trim() == NOT_APPLICABLE_SENTINEL {
        return Ok(Synthesis::NotApplicable);
    }
    let (text, confidence) = split_confidence(&response);
    Ok(Synthesis::Value {
        text,
        confidence: confidence.unwrap_or(Confidence::DEFAULT),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnrichOutcome {
    Enriched,
    NotApplicable,
    SkippedUnique,
    NoCandidates,
    NoValues,
    Failed,
}

/// One line of the enrichment trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichmentEvent {
    pub card: String,
    pub field: String,
    pub candidate_ids: Vec<String>,
    pub overlap_scores: Vec<f64>,
    pub source_ids: Vec<String>,
    pub outcome: EnrichOutcome,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrichmentRun {
    pub card: Card,
    /// One event per missing field, in taxonomy order.
    pub events: Vec<EnrichmentEvent>,
}

impl EnrichmentRun {
    pub fn failed_fields(&self) -> Vec<&str> {
        self.events
            .iter()
            .filter(|e| e.outcome == EnrichOutcome::Failed)
            .map(|e| e.field.as_str())
            .collect()
    }
}

fn event(card: &Card, key: FieldKey, similar: &[SimilarCard<'_>], outcome: EnrichOutcome) -> EnrichmentEvent {
    EnrichmentEvent {
        card: card.id.clone(),
        field: key.name().to_string(),
        candidate_ids: similar.iter().map(|s| s.entry.card.id.clone()).collect(),
        overlap_scores: similar.iter().map(|s| s.overlap).collect(),
        source_ids: Vec::new(),
        outcome,
        error: None,
    }
}

fn failed(mut ev: EnrichmentEvent, err: &EnrichError) -> EnrichmentEvent {
    ev.outcome = EnrichOutcome::Failed;
    ev.error = Some(err.to_string());
    ev
}

fn is_fatal(err: &EnrichError) -> bool {
    matches!(err, EnrichError::Gateway(g) if g.is_fatal())
}

/// Fills `Missing` non-unique fields of `card` from similar pool cards.
/// Filled and not-applicable fields are never touched; a card with no
/// missing field is returned unchanged without any gateway call.
pub fn run_icc_mp(card: &Card, pool: &[PoolEntry], config: &EnrichConfig, gateway: &Gateway) -> Result<EnrichmentRun, EnrichError> {
    config.validate()?;
    let report = validate_card(card);
    if !report.is_ok() {
        return Err(EnrichError::InvalidCard {
            id: card.id.clone(),
            violations: report.violations,
        });
    }
    let incomplete = incomplete_fields(card);
    let mut out = EnrichmentRun {
        card: card.clone(),
        events: Vec::new(),
    };
    if incomplete.is_empty() {
        return Ok(out);
    }
    let targets: Vec<FieldKey> = incomplete
        .iter()
        .copied()
        .filter(|k| field_category(*k) != FieldCategory::Unique)
        .collect();

    // Retrieval depends only on the card, so it runs once for all fields.
    let similar = if targets.is_empty() {
        Ok(Vec::new())
    } else {
        retrieve_similar(card, pool, config, gateway)
    };
    let similar = match similar {
        Ok(s) => s,
        Err(e) if is_fatal(&e) || !matches!(e, EnrichError::Gateway(_)) => return Err(e),
        Err(e) => {
            log::warn!("retrieval for {} failed: {}", card.id, e);
            out.events = incomplete
                .iter()
                .map(|&k| match field_category(k) {
                    FieldCategory::Unique => event(card, k, &[], EnrichOutcome::SkippedUnique),
                    _ => failed(event(card, k, &[], EnrichOutcome::Failed), &e),
                })
                .collect();
            return Ok(out);
        }
    };

    let results = map_ordered(&incomplete, gateway.parallelism(), |&key| -> Result<(Option<Field>, EnrichmentEvent), EnrichError> {
        if field_category(key) == FieldCategory::Unique {
            return Ok((None, event(card, key, &[], EnrichOutcome::SkippedUnique)));
        }
        let mut ev = event(card, key, &similar, EnrichOutcome::NoCandidates);
        if similar.is_empty() {
            return Ok((None, ev));
        }
        let mut values = Vec::new();
        let mut sources = Vec::new();
        for s in &similar {
            if let Some(f) = s.entry.card.field(key) {
                if f.status.is_filled() && !f.value.trim().is_empty() {
                    values.push(f.value.clone());
                    sources.push(s.entry.card.id.clone());
                }
            }
        }
        if values.is_empty() {
            ev.outcome = EnrichOutcome::NoValues;
            return Ok((None, ev));
        }
        let synthesis = match synthesize_field(&values, card, key, gateway) {
            Ok(s) => s,
            Err(e) if is_fatal(&e) => return Err(e),
            Err(e) => return Ok((None, failed(ev, &e))),
        };
        let provenance = FieldProvenance::PoolTransfer {
            source_card_ids: sources.clone(),
        };
        ev.source_ids = sources;
        let field = match synthesis {
            Synthesis::NotApplicable => {
                ev.outcome = EnrichOutcome::NotApplicable;
                Field::not_applicable(key, provenance)
            }
            Synthesis::Value { text, confidence } => match classify_value(&text) {
                ValueClass::Text(_) => {
                    ev.outcome = EnrichOutcome::Enriched;
                    Field::from_text(key, &text, confidence, provenance)
                }
                ValueClass::NotApplicable => {
                    ev.outcome = EnrichOutcome::NotApplicable;
                    Field::not_applicable(key, provenance)
                }
                ValueClass::Empty => {
                    ev.outcome = EnrichOutcome::NoValues;
                    ev.source_ids.clear();
                    return Ok((None, ev));
                }
            },
        };
        Ok((Some(field), ev))
    });

    for result in results {
        let (field, ev) = result?;
        if let Some(field) = field {
            out.card.set_field(field);
        }
        out.events.push(ev);
    }
    Ok(out)
}
