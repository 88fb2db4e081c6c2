//! Card completeness (WCCI), rank/product-moment correlation, tag
//! correlation reports, and field-level agreement between two cards.

use std::collections::BTreeMap;

use indexmap::IndexMap;
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::gateway::{cosine_similarity, Gateway, GatewayError};
use crate::pool::PoolEntry;
use crate::rng::SplitMix64;
use crate::schema::{taxonomy, validate_card, Card, Field, FieldStatus, Violation};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrelationError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("at least two samples are required, got {0}")]
    TooFewSamples(usize),
    #[error("degenerate input: a sequence is constant")]
    DegenerateInput,
    #[error("input contains a non-finite value")]
    NonFinite,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("card `{id}` is invalid: {violations:?}")]
    InvalidCard { id: String, violations: Vec<Violation> },
    #[error("at least two pool entries are required")]
    EmptyPool,
    #[error("tag `{0}` is not present on any entry")]
    TagAbsent(String),
    #[error("cards have different kinds")]
    KindMismatch,
    #[error("similarity provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("threshold {0} outside [0, 1)")]
    InvalidThreshold(f64),
}

/// Missing scores 0, not applicable scores 1, filled scores its confidence
/// weight.
pub fn completeness_score(field: &Field) -> f64 {
    match field.status {
        FieldStatus::Missing => 0.0,
        FieldStatus::NotApplicable => 1.0,
        FieldStatus::Filled(c) => c.weight(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WcciScore {
    pub value: f64,
    /// Per-field scores in taxonomy order.
    pub per_field: IndexMap<String, f64>,
}

/// Weighted Card Completeness Index: the uniform mean of field completeness
/// scores. Requires a valid card.
pub fn wcci(card: &Card) -> Result<WcciScore, MetricsError> {
    let report = validate_card(card);
    if !report.is_ok() {
        return Err(MetricsError::InvalidCard {
            id: card.id.clone(),
            violations: report.violations,
        });
    }
    let mut per_field = IndexMap::new();
    let mut total = 0.0;
    for key in taxonomy(card.kind) {
        let field = card.field(key).expect("validated card covers the taxonomy");
        let score = completeness_score(field);
        total += score;
        per_field.insert(key.name().to_string(), score);
    }
    Ok(WcciScore {
        value: total / per_field.len() as f64,
        per_field,
    })
}

fn check_pair(xs: &[f64], ys: &[f64]) -> Result<(), CorrelationError> {
    if xs.len() != ys.len() {
        return Err(CorrelationError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < 2 {
        return Err(CorrelationError::TooFewSamples(xs.len()));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(CorrelationError::NonFinite);
    }
    Ok(())
}

/// Pearson product-moment correlation (two-pass).
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64, CorrelationError> {
    check_pair(xs, ys)?;
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let dx = x - mx;
        let dy = y - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CorrelationError::DegenerateInput);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        // positions start..end hold ranks start+1 ..= end
        let rank = (start + 1 + end) as f64 / 2.0;
        for &idx in &order[start..end] {
            ranks[idx] = rank;
        }
        start = end;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64, CorrelationError> {
    check_pair(xs, ys)?;
    pearson(&average_ranks(xs), &average_ranks(ys))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationResult {
    pub spearman_rho: f64,
    pub pearson_r: f64,
    pub n: usize,
    pub p_note: String,
}

const PERMUTATIONS: usize = 999;

/// Both coefficients plus a descriptive two-sided permutation note for rho.
pub fn correlate(xs: &[f64], ys: &[f64]) -> Result<CorrelationResult, CorrelationError> {
    let rho = spearman(xs, ys)?;
    let r = pearson(xs, ys)?;
    Ok(CorrelationResult {
        spearman_rho: rho,
        pearson_r: r,
        n: xs.len(),
        p_note: permutation_note(xs, ys, rho),
    })
}

fn permutation_note(xs: &[f64], ys: &[f64], rho: f64) -> String {
    let rx = average_ranks(xs);
    let mut ry = average_ranks(ys);
    let mut rng = SplitMix64::new(0);
    let mut extreme = 0usize;
    for _ in 0..PERMUTATIONS {
        rng.shuffle(&mut ry);
        let permuted = pearson(&rx, &ry).unwrap_or(0.0);
        if permuted.abs() >= rho.abs() - 1e-12 {
            extreme += 1;
        }
    }
    let p = (extreme + 1) as f64 / (PERMUTATIONS + 1) as f64;
    format!("permutation p ~ {p:.4} ({PERMUTATIONS} shuffles, seed 0, two-sided)")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TagCorrelation {
    /// Number of entries carrying the tag.
    pub frequency: usize,
    #[serde(serialize_with = "serialize_correlation")]
    pub result: Result<CorrelationResult, CorrelationError>,
}

/// Writes a correlation outcome as the result object or `{"error": msg}`.
pub fn serialize_correlation<S: Serializer>(
    value: &Result<CorrelationResult, CorrelationError>,
    serializer: S,
) -> Result<S::Ok, S::Error> {
    match value {
        Ok(r) => r.serialize(serializer),
        Err(e) => {
            use serde::ser::SerializeMap;
            let mut map = serializer.serialize_map(Some(1))?;
            map.serialize_entry("error", &e.to_string())?;
            map.end()
        }
    }
}

fn wcci_column(entries: &[PoolEntry]) -> Vec<f64> {
    entries.iter().map(|e| e.wcci).collect()
}

/// Correlates binary tag presence against WCCI across pool entries.
pub fn tag_correlation_report<'a>(
    entries: &[PoolEntry],
    tags: impl IntoIterator<Item = &'a str>,
) -> Result<BTreeMap<String, TagCorrelation>, MetricsError> {
    if entries.len() < 2 {
        return Err(MetricsError::EmptyPool);
    }
    let scores = wcci_column(entries);
    let mut report = BTreeMap::new();
    for tag in tags {
        let presence: Vec<f64> = entries
            .iter()
            .map(|e| if e.tags.contains(tag) { 1.0 } else { 0.0 })
            .collect();
        let frequency = presence.iter().filter(|&&p| p > 0.0).count();
        if frequency == 0 {
            return Err(MetricsError::TagAbsent(tag.to_string()));
        }
        report.insert(
            tag.to_string(),
            TagCorrelation {
                frequency,
                result: correlate(&presence, &scores),
            },
        );
    }
    Ok(report)
}

/// Correlation of download and like counts against WCCI.
pub fn popularity_correlation(
    entries: &[PoolEntry],
) -> Result<BTreeMap<String, TagCorrelation>, MetricsError> {
    if entries.len() < 2 {
        return Err(MetricsError::EmptyPool);
    }
    let scores = wcci_column(entries);
    let downloads: Vec<f64> = entries.iter().map(|e| e.downloads as f64).collect();
    let likes: Vec<f64> = entries.iter().map(|e| e.likes as f64).collect();
    let mut out = BTreeMap::new();
    for (name, column) in [("downloads", downloads), ("likes", likes)] {
        out.insert(
            name.to_string(),
            TagCorrelation {
                frequency: entries.len(),
                result: correlate(&column, &scores),
            },
        );
    }
    Ok(out)
}

/// Semantic similarity between two texts, in [0, 1] for typical providers.
pub trait SimilarityProvider {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, GatewayError>;
}

/// Cosine similarity over the gateway's embedding endpoint.
pub struct EmbeddingSimilarity<'a> {
    pub gateway: &'a Gateway,
}

impl SimilarityProvider for EmbeddingSimilarity<'_> {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, GatewayError> {
        let va = self.gateway.embed(a)?;
        let vb = self.gateway.embed(b)?;
        cosine_similarity(&va, &vb)
    }
}

pub const DEFAULT_AGREEMENT_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreementReport {
    pub per_field_similarity: IndexMap<String, f64>,
    pub agreement_rate: f64,
    pub threshold: f64,
}

/// Field-level agreement between two cards of the same kind.
///
/// Two filled fields are compared with the provider. A field that is unfilled
/// on both sides with the same status counts as agreeing (similarity 1.0);
/// filled against unfilled scores 0.0 without a provider call.
pub fn agreement_rate(
    a: &Card,
    b: &Card,
    provider: &dyn SimilarityProvider,
    threshold: f64,
) -> Result<AgreementReport, MetricsError> {
    if a.kind != b.kind {
        return Err(MetricsError::KindMismatch);
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(MetricsError::InvalidThreshold(threshold));
    }
    let keys = taxonomy(a.kind);
    let mut per_field = IndexMap::new();
    let mut agreeing = 0usize;
    for key in &keys {
        let (fa, fb) = match (a.field(*key), b.field(*key)) {
            (Some(fa), Some(fb)) => (fa, fb),
            _ => {
                let id = if a.field(*key).is_none() { &a.id } else { &b.id };
                return Err(MetricsError::InvalidCard {
                    id: id.clone(),
                    violations: vec![Violation::MissingKey(key.name().to_string())],
                });
            }
        };
        let similarity = match (fa.status, fb.status) {
            (FieldStatus::Filled(_), FieldStatus::Filled(_)) => provider
                .similarity(&fa.value, &fb.value)
                .map_err(|e| MetricsError::ProviderUnavailable(e.to_string()))?,
            (sa, sb) if sa == sb => 1.0,
            _ => 0.0,
        };
        if similarity > threshold {
            agreeing += 1;
        }
        per_field.insert(key.name().to_string(), similarity);
    }
    Ok(AgreementReport {
        per_field_similarity: per_field,
        agreement_rate: agreeing as f64 / keys.len() as f64,
        threshold,
    })
}
