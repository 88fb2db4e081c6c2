//! Card taxonomy, field statuses, and the card JSON format.
//!
//! A card is a fixed, ordered list of fields: 8 for model cards and 12 for
//! data cards. Every field carries a status (filled with a confidence,
//! missing, or not applicable), its value text, and where the value came
//! from.

use std::collections::BTreeSet;
use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CardKind {
    Model,
    Data,
}

impl CardKind {
    pub const ALL: [CardKind; 2] = [CardKind::Model, CardKind::Data];

    pub fn as_str(self) -> &'static str {
        match self {
            CardKind::Model => "model",
            CardKind::Data => "data",
        }
    }

    /// Number of taxonomy fields for this kind.
    pub fn field_count(self) -> usize {
        specs(self).len()
    }
}

impl fmt::Display for CardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CardKind {
    type Err = SchemaError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "model" => Ok(CardKind::Model),
            "data" | "dataset" => Ok(CardKind::Data),
            other => Err(SchemaError::UnknownKind(other.to_string())),
        }
    }
}

/// Static description of one taxonomy field.
#[derive(Debug, Clone, Copy)]
pub struct FieldSpec {
    pub name: &'static str,
    pub title: &'static str,
    pub description: &'static str,
}

const MODEL_FIELDS: [FieldSpec; 8] = [
    FieldSpec {
        name: "model_details",
        title: "Model Details",
        description: "Information about the model developer, architecture, size, training methodology, modalities, version, license, and contact details",
    },
    FieldSpec {
        name: "intended_use",
        title: "Intended Use",
        description: "Primary applications, target users, supported languages/domains, out-of-scope uses, and age restrictions",
    },
    FieldSpec {
        name: "generative_capabilities",
        title: "Generative Capabilities",
        description: "Generation quality, content types, length limitations, consistency, latency, and customization options",
    },
    FieldSpec {
        name: "safety_considerations",
        title: "Safety Considerations",
        description: "Content safety measures, bias analysis, fairness metrics, red team testing, jailbreaking resistance, and child safety",
    },
    FieldSpec {
        name: "training_data",
        title: "Training Data",
        description: "Training corpus details, data filtering processes, demographic representation, language coverage, consent/privacy, and evaluation datasets",
    },
    FieldSpec {
        name: "performance_metrics",
        title: "Performance Metrics",
        description: "Generation quality metrics, safety metrics, factual accuracy, bias metrics, cultural sensitivity, and robustness measures",
    },
    FieldSpec {
        name: "ethical_considerations",
        title: "Ethical Considerations",
        description: "Dual-use risks, misinformation potential, intellectual property concerns, economic/environmental impact, cultural appropriation, privacy, and consent issues",
    },
    FieldSpec {
        name: "caveats_recommendations",
        title: "Caveats & Recommendations",
        description: "Known limitations, deployment recommendations, monitoring requirements, and user guidelines",
    },
];

const DATA_FIELDS: [FieldSpec; 12] = [
    FieldSpec {
        name: "dataset_details",
        title: "Dataset Details",
        description: "Dataset name, version, creators/curators, funding, type, text language, license, and related resources",
    },
    FieldSpec {
        name: "dataset_structure",
        title: "Dataset Structure",
        description: "Instances, fields, missing information, relationships, splits, and size statistics",
    },
    FieldSpec {
        name: "data_collection",
        title: "Data Collection",
        description: "Collection process, data sources, timeframe, ethical review, consent process, and data validation",
    },
    FieldSpec {
        name: "data_processing",
        title: "Data Processing",
        description: "Preprocessing steps, cleaning procedures, labeling process, quality control, filtering criteria, and deduplication",
    },
    FieldSpec {
        name: "intended_use",
        title: "Intended Use",
        description: "Primary tasks, suitable/unsuitable applications, research applications, commercial applications, and prohibited uses",
    },
    FieldSpec {
        name: "bias_fairness",
        title: "Bias & Fairness",
        description: "Demographic representation, geographic/temporal coverage, known biases, bias mitigation, and fairness considerations",
    },
    FieldSpec {
        name: "privacy_security",
        title: "Privacy & Security",
        description: "Personally identifiable information, sensitive information, privacy protection measures, data security, anonymization/pseudonymization, and retention/deletion policies",
    },
    FieldSpec {
        name: "content_analysis",
        title: "Content Analysis",
        description: "Content types, harmful content identification, content moderation, toxicity analysis, misinformation risks, and cultural sensitivity",
    },
    FieldSpec {
        name: "legal_ethical",
        title: "Legal & Ethical",
        description: "Copyright considerations, terms of use, ethical guidelines, compliance requirements, subject rights, and institutional review",
    },
    FieldSpec {
        name: "maintenance_updates",
        title: "Maintenance & Updates",
        description: "Maintenance plan, update frequency, versioning, error reporting, community contribution, and deprecation plan",
    },
    FieldSpec {
        name: "distribution_access",
        title: "Distribution & Access",
        description: "Access mechanism, distribution format, download instructions, API access, access restrictions, and citation requirements",
    },
    FieldSpec {
        name: "limitations_recommendations",
        title: "Limitations & Recommendations",
        description: "Known limitations, recommended uses, usage guidelines, performance considerations, environmental impact, and future work",
    },
];

fn specs(kind: CardKind) -> &'static [FieldSpec] {
    match kind {
        CardKind::Model => &MODEL_FIELDS,
        CardKind::Data => &DATA_FIELDS,
    }
}

/// A taxonomy field, qualified by card kind.
///
/// The bare name alone is not unique across kinds: both taxonomies have an
/// `intended_use` field.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FieldKey {
    kind: CardKind,
    index: u8,
}

impl FieldKey {
    pub fn new(kind: CardKind, name: &str) -> Result<Self, SchemaError> {
        specs(kind)
            .iter()
            .position(|s| s.name == name)
            .map(|index| FieldKey {
                kind,
                index: index as u8,
            })
            .ok_or_else(|| SchemaError::UnknownField(name.to_string()))
    }

    pub fn kind(self) -> CardKind {
        self.kind
    }

    /// Position in the taxonomy order.
    pub fn position(self) -> usize {
        self.index as usize
    }

    pub fn spec(self) -> &'static FieldSpec {
        &specs(self.kind)[self.index as usize]
    }

    pub fn name(self) -> &'static str {
        self.spec().name
    }

    pub fn title(self) -> &'static str {
        self.spec().title
    }

    pub fn description(self) -> &'static str {
        self.spec().description
    }
}

impl fmt::Debug for FieldKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.kind, self.name())
    }
}

impl fmt::Display for FieldKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Canonical ordered field list for a card kind.
pub fn taxonomy(kind: CardKind) -> Vec<FieldKey> {
    (0..specs(kind).len())
        .map(|index| FieldKey {
            kind,
            index: index as u8,
        })
        .collect()
}

/// Confidence level attached to a filled field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Confidence {
    Low,
    Medium,
    High,
    Certain,
}

impl Confidence {
    pub const ALL: [Confidence; 4] = [
        Confidence::Low,
        Confidence::Medium,
        Confidence::High,
        Confidence::Certain,
    ];

    /// Used when an upstream response does not state a confidence.
    pub const DEFAULT: Confidence = Confidence::Medium;

    pub fn weight(self) -> f64 {
        match self {
            Confidence::Low => 0.25,
            Confidence::Medium => 0.5,
            Confidence::High => 0.75,
            Confidence::Certain => 1.0,
        }
    }

    /// Exact match against the four admissible weights.
    pub fn from_weight(weight: f64) -> Result<Self, SchemaError> {
        Self::ALL
            .into_iter()
            .find(|c| c.weight() == weight)
            .ok_or(SchemaError::InvalidConfidence(weight))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldStatus {
    Filled(Confidence),
    Missing,
    NotApplicable,
}

impl FieldStatus {
    pub fn is_filled(self) -> bool {
        matches!(self, FieldStatus::Filled(_))
    }

    fn marker(self) -> &'static str {
        match self {
            FieldStatus::Filled(_) => "filled",
            FieldStatus::Missing => "missing",
            FieldStatus::NotApplicable => "not_applicable",
        }
    }
}

/// Where a field value came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldProvenance {
    Extraction { round: u32 },
    PoolTransfer { source_card_ids: Vec<String> },
    Imported,
    Unset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub key: FieldKey,
    pub value: String,
    pub status: FieldStatus,
    pub provenance: FieldProvenance,
}

impl Field {
    pub fn missing(key: FieldKey) -> Self {
        Field {
            key,
            value: String::new(),
            status: FieldStatus::Missing,
            provenance: FieldProvenance::Unset,
        }
    }

    pub fn not_applicable(key: FieldKey, provenance: FieldProvenance) -> Self {
        Field {
            key,
            value: String::new(),
            status: FieldStatus::NotApplicable,
            provenance,
        }
    }

    /// Builds a field from raw text, classifying it with
    /// [`classify_value`]. Placeholder text becomes `Missing` and a
    /// "not applicable" marker becomes `NotApplicable`.
    pub fn from_text(
        key: FieldKey,
        text: &str,
        confidence: Confidence,
        provenance: FieldProvenance,
    ) -> Self {
        match classify_value(text) {
            ValueClass::Empty => Field {
                provenance,
                ..Field::missing(key)
            },
            ValueClass::NotApplicable => Field::not_applicable(key, provenance),
            ValueClass::Text(t) => Field {
                key,
                value: t.to_string(),
                status: FieldStatus::Filled(confidence),
                provenance,
            },
        }
    }
}

/// Result of normalizing a raw value string.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueClass<'a> {
    Empty,
    NotApplicable,
    Text(&'a str),
}

const EMPTY_MARKERS: [&str; 3] = ["n/a value not stated", "not specified", "unknown"];
const NOT_APPLICABLE_MARKER: &str = "not applicable";

pub fn classify_value(raw: &str) -> ValueClass<'_> {
    let trimmed = raw.trim();
    if trimmed.is_empty() {
        return ValueClass::Empty;
    }
    let lower = trimmed.to_lowercase();
    if EMPTY_MARKERS.contains(&lower.as_str()) {
        ValueClass::Empty
    } else if lower == NOT_APPLICABLE_MARKER {
        ValueClass::NotApplicable
    } else {
        ValueClass::Text(trimmed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Card {
    pub id: String,
    pub kind: CardKind,
    pub fields: Vec<Field>,
    pub tags: BTreeSet<String>,
}

impl Card {
    /// A valid card with every taxonomy field `Missing`.
    pub fn empty(id: impl Into<String>, kind: CardKind) -> Self {
        Card {
            id: id.into(),
            kind,
            fields: taxonomy(kind).into_iter().map(Field::missing).collect(),
            tags: BTreeSet::new(),
        }
    }

    pub fn field(&self, key: FieldKey) -> Option<&Field> {
        self.fields.iter().find(|f| f.key == key)
    }

    pub fn field_by_name(&self, name: &str) -> Option<&Field> {
        self.fields.iter().find(|f| f.key.name() == name)
    }

    /// Replaces the field with the same key. Returns `false` if the card has
    /// no such field.
    pub fn set_field(&mut self, field: Field) -> bool {
        match self.fields.iter_mut().find(|f| f.key == field.key) {
            Some(slot) => {
                *slot = field;
                true
            }
            None => false,
        }
    }

    pub fn filled_fields(&self) -> impl Iterator<Item = &Field> {
        self.fields.iter().filter(|f| f.status.is_filled())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    EmptyId,
    KindMismatch { field: String },
    DuplicateKey(String),
    MissingKey(String),
    EmptyFilledValue(String),
    PlaceholderFilledValue(String),
    UntrimmedValue(String),
    ValueWithoutContent(String),
    EmptyPoolTransfer(String),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyId => write!(f, "card id is empty"),
            Violation::KindMismatch { field } => {
                write!(f, "{field}: field kind differs from card kind")
            }
            Violation::DuplicateKey(k) => write!(f, "{k}: duplicate field"),
            Violation::MissingKey(k) => write!(f, "{k}: taxonomy field absent"),
            Violation::EmptyFilledValue(k) => write!(f, "{k}: filled field has an empty value"),
            Violation::PlaceholderFilledValue(k) => {
                write!(f, "{k}: filled field holds a placeholder value")
            }
            Violation::UntrimmedValue(k) => {
                write!(f, "{k}: value has leading or trailing whitespace")
            }
            Violation::ValueWithoutContent(k) => {
                write!(f, "{k}: missing or not-applicable field carries a value")
            }
            Violation::EmptyPoolTransfer(k) => {
                write!(f, "{k}: pool-transfer provenance lists no source cards")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

pub fn validate_card(card: &Card) -> ValidationReport {
    let mut violations = Vec::new();
    if card.id.trim().is_empty() {
        violations.push(Violation::EmptyId);
    }

    let mut seen = BTreeSet::new();
    for field in &card.fields {
        let name = field.key.name().to_string();
        if field.key.kind() != card.kind {
            violations.push(Violation::KindMismatch { field: name.clone() });
        }
        if !seen.insert(field.key) {
            violations.push(Violation::DuplicateKey(name.clone()));
        }
        match field.status {
            FieldStatus::Filled(_) => match classify_value(&field.value) {
                ValueClass::Empty if field.value.trim().is_empty() => {
                    violations.push(Violation::EmptyFilledValue(name.clone()))
                }
                ValueClass::Empty | ValueClass::NotApplicable => {
                    violations.push(Violation::PlaceholderFilledValue(name.clone()))
                }
                ValueClass::Text(t) if t.len() != field.value.len() => {
                    violations.push(Violation::UntrimmedValue(name.clone()))
                }
                ValueClass::Text(_) => {}
            },
            FieldStatus::Missing | FieldStatus::NotApplicable => {
                if !field.value.is_empty() {
                    violations.push(Violation::ValueWithoutContent(name.clone()));
                }
            }
        }
        if let FieldProvenance::PoolTransfer { source_card_ids } = &field.provenance {
            if source_card_ids.is_empty() {
                violations.push(Violation::EmptyPoolTransfer(name));
            }
        }
    }
    for key in taxonomy(card.kind) {
        if !seen.contains(&key) {
            violations.push(Violation::MissingKey(key.name().to_string()));
        }
    }
    ValidationReport { violations }
}

#[derive(Debug, Error)]
pub enum SchemaError {
    #[error("malformed card JSON: {0}")]
    MalformedJson(String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("unknown card kind `{0}`")]
    UnknownKind(String),
    #[error("field `{field}` belongs to {found} cards, not {expected} cards")]
    KindMismatch {
        field: String,
        expected: CardKind,
        found: CardKind,
    },
    #[error("invalid confidence {0}; expected one of 0.25, 0.5, 0.75, 1.0")]
    InvalidConfidence(f64),
    #[error("invalid card: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidCard(Vec<Violation>),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireCard {
    id: String,
    kind: CardKind,
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default)]
    fields: IndexMap<String, WireField>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireField {
    #[serde(default)]
    value: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    status: Option<WireStatus>,
    #[serde(default)]
    confidence: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<FieldProvenance>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum WireStatus {
    Filled,
    Missing,
    NotApplicable,
}

/// Parses a card JSON document.
///
/// Taxonomy fields absent from the document become `Missing`. A field whose
/// status is `filled` (or omitted) is classified from its value, so
/// placeholder text such as "Not specified" is read as `Missing`.
pub fn parse_card(text: &str) -> Result<Card, SchemaError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| SchemaError::MalformedJson(e.to_string()))?;
    card_from_value(value)
}

pub fn card_from_value(value: serde_json::Value) -> Result<Card, SchemaError> {
    let wire: WireCard = serde_json::from_value(value).map_err(wire_error)?;
    let kind = wire.kind;
    let mut card = Card::empty(wire.id, kind);
    card.tags = wire.tags.into_iter().collect();

    for (name, wf) in wire.fields {
        let key = match FieldKey::new(kind, &name) {
            Ok(key) => key,
            Err(err) => {
                let other = match kind {
                    CardKind::Model => CardKind::Data,
                    CardKind::Data => CardKind::Model,
                };
                if FieldKey::new(other, &name).is_ok() {
                    return Err(SchemaError::KindMismatch {
                        field: name,
                        expected: kind,
                        found: other,
                    });
                }
                return Err(err);
            }
        };
        let provenance = wf.provenance.unwrap_or(FieldProvenance::Unset);
        let field = match wf.status.unwrap_or(WireStatus::Filled) {
            WireStatus::Missing => Field {
                provenance,
                ..Field::missing(key)
            },
            WireStatus::NotApplicable => Field::not_applicable(key, provenance),
            WireStatus::Filled => {
                let confidence = match wf.confidence {
                    Some(w) => Confidence::from_weight(w)?,
                    None => Confidence::DEFAULT,
                };
                Field::from_text(key, &wf.value, confidence, provenance)
            }
        };
        card.set_field(field);
    }

    let report = validate_card(&card);
    if report.is_ok() {
        Ok(card)
    } else {
        Err(SchemaError::InvalidCard(report.violations))
    }
}

fn wire_error(err: serde_json::Error) -> SchemaError {
    let msg = err.to_string();
    // serde reports "unknown field `x`, expected ..." for rejected keys.
    if let Some(rest) = msg.strip_prefix("unknown field `") {
        if let Some(end) = rest.find('`') {
            return SchemaError::UnknownField(rest[..end].to_string());
        }
    }
    if msg.starts_with("unknown variant") && msg.contains("model") {
        return SchemaError::UnknownKind(msg);
    }
    SchemaError::MalformedJson(msg)
}

/// Card as a JSON value with fields in taxonomy order.
pub fn card_to_value(card: &Card) -> serde_json::Value {
    let mut fields = IndexMap::new();
    let mut ordered: Vec<&Field> = card.fields.iter().collect();
    ordered.sort_by_key(|f| f.key.position());
    for f in ordered {
        let confidence = match f.status {
            FieldStatus::Filled(c) => Some(c.weight()),
            _ => None,
        };
        fields.insert(
            f.key.name().to_string(),
            WireField {
                value: f.value.clone(),
                status: Some(match f.status {
                    FieldStatus::Filled(_) => WireStatus::Filled,
                    FieldStatus::Missing => WireStatus::Missing,
                    FieldStatus::NotApplicable => WireStatus::NotApplicable,
                }),
                confidence,
                provenance: Some(f.provenance.clone()),
            },
        );
    }
    let wire = WireCard {
        id: card.id.clone(),
        kind: card.kind,
        tags: card.tags.iter().cloned().collect(),
        fields,
    };
    serde_json::to_value(wire).expect("card wire format serializes")
}

/// Compact single-line JSON, suitable for JSONL.
pub fn serialize_card(card: &Card) -> String {
    card_to_value(card).to_string()
}

pub fn serialize_card_pretty(card: &Card) -> String {
    serde_json::to_string_pretty(&card_to_value(card)).expect("card wire format serializes")
}

impl fmt::Display for FieldStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.marker())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(name: &str) -> FieldKey {
        FieldKey::new(CardKind::Model, name).unwrap()
    }

    #[test]
    fn model_taxonomy_order() {
        let keys = taxonomy(CardKind::Model);
        assert_eq!(keys.len(), 8);
        assert_eq!(keys[0].name(), "model_details");
        assert_eq!(keys[7].name(), "caveats_recommendations");
    }

    #[test]
    fn data_taxonomy_contents() {
        let names: Vec<_> = taxonomy(CardKind::Data).iter().map(|k| k.name()).collect();
        assert_eq!(names.len(), 12);
        assert!(names.contains(&"privacy_security"));
        assert!(names.contains(&"distribution_access"));
    }

    #[test]
    fn taxonomies_disjoint_as_keys() {
        let model: BTreeSet<_> = taxonomy(CardKind::Model).into_iter().collect();
        let data: BTreeSet<_> = taxonomy(CardKind::Data).into_iter().collect();
        assert!(model.is_disjoint(&data));
        // Only the bare slug "intended_use" is shared between the two tables.
        let model_names: BTreeSet<_> = model.iter().map(|k| k.name()).collect();
        let data_names: BTreeSet<_> = data.iter().map(|k| k.name()).collect();
        let shared: Vec<_> = model_names.intersection(&data_names).collect();
        assert_eq!(shared, vec![&"intended_use"]);
    }

    #[test]
    fn taxonomy_is_stable() {
        assert_eq!(taxonomy(CardKind::Data), taxonomy(CardKind::Data));
    }

    #[test]
    fn classify_placeholders() {
        assert_eq!(classify_value("  "), ValueClass::Empty);
        assert_eq!(classify_value("Not Specified"), ValueClass::Empty);
        assert_eq!(classify_value("UNKNOWN"), ValueClass::Empty);
        assert_eq!(classify_value("N/A value not stated"), ValueClass::Empty);
        assert_eq!(classify_value(" Not applicable "), ValueClass::NotApplicable);
        assert_eq!(classify_value(" MIT "), ValueClass::Text("MIT"));
    }

    #[test]
    fn parse_full_card() {
        let fields: serde_json::Map<_, _> = taxonomy(CardKind::Model)
            .iter()
            .map(|k| {
                (
                    k.name().to_string(),
                    serde_json::json!({"value": format!("about {}", k.name()), "confidence": 1.0}),
                )
            })
            .collect();
        let doc = serde_json::json!({"id": "m", "kind": "model", "fields": fields});
        let card = parse_card(&doc.to_string()).unwrap();
        assert_eq!(card.fields.len(), 8);
        assert!(card
            .fields
            .iter()
            .all(|f| f.status == FieldStatus::Filled(Confidence::Certain)));
    }

    #[test]
    fn parse_materializes_absent_fields() {
        let mut doc = serde_json::json!({"id": "m", "kind": "model", "fields": {}});
        for k in taxonomy(CardKind::Model) {
            if k.name() != "safety_considerations" {
                doc["fields"][k.name()] = serde_json::json!({"value": "x", "confidence": 0.75});
            }
        }
        let card = parse_card(&doc.to_string()).unwrap();

        let mut expected = Card::empty("m", CardKind::Model);
        for k in taxonomy(CardKind::Model) {
            if k.name() != "safety_considerations" {
                expected.set_field(Field {
                    key: k,
                    value: "x".into(),
                    status: FieldStatus::Filled(Confidence::High),
                    provenance: FieldProvenance::Unset,
                });
            }
        }
        assert_eq!(card, expected);
        assert_eq!(
            card.field(model("safety_considerations")).unwrap().status,
            FieldStatus::Missing
        );
    }

    #[test]
    fn parse_rejects_bad_confidence() {
        let doc = r#"{"id":"m","kind":"model","fields":{"intended_use":{"value":"x","confidence":0.6}}}"#;
        match parse_card(doc) {
            Err(SchemaError::InvalidConfidence(v)) => assert_eq!(v, 0.6),
            other => panic!("expected InvalidConfidence, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_unknown_keys() {
        let doc = r#"{"id":"m","kind":"model","fields":{"favourite_colour":{"value":"x"}}}"#;
        assert!(matches!(parse_card(doc), Err(SchemaError::UnknownField(n)) if n == "favourite_colour"));
        let doc = r#"{"id":"m","kind":"model","extra":1}"#;
        assert!(matches!(parse_card(doc), Err(SchemaError::UnknownField(n)) if n == "extra"));
        let doc = r#"{"id":"m","kind":"model","fields":{"intended_use":{"value":"x","colour":1}}}"#;
        assert!(matches!(parse_card(doc), Err(SchemaError::UnknownField(n)) if n == "colour"));
    }

    #[test]
    fn parse_detects_kind_mismatch() {
        let doc = r#"{"id":"m","kind":"model","fields":{"dataset_structure":{"value":"x"}}}"#;
        assert!(matches!(parse_card(doc), Err(SchemaError::KindMismatch { .. })));
    }

    #[test]
    fn parse_rejects_malformed_json() {
        assert!(matches!(parse_card("{\"id\":"), Err(SchemaError::MalformedJson(_))));
    }

    #[test]
    fn parse_default_confidence_and_normalization() {
        let doc = r#"{"id":"m","kind":"model","fields":{
            "intended_use":{"value":"  chat  "},
            "training_data":{"value":"Not specified","confidence":1.0},
            "safety_considerations":{"value":"not applicable"}}}"#;
        let card = parse_card(doc).unwrap();
        let iu = card.field(model("intended_use")).unwrap();
        assert_eq!(iu.value, "chat");
        assert_eq!(iu.status, FieldStatus::Filled(Confidence::Medium));
        assert_eq!(card.field(model("training_data")).unwrap().status, FieldStatus::Missing);
        assert_eq!(
            card.field(model("safety_considerations")).unwrap().status,
            FieldStatus::NotApplicable
        );
    }

    #[test]
    fn serialize_empty_card() {
        let card = Card::empty("m", CardKind::Model);
        let v = card_to_value(&card);
        let fields = v["fields"].as_object().unwrap();
        assert_eq!(fields.len(), 8);
        for (_, f) in fields {
            assert_eq!(f["value"], "");
            assert_eq!(f["status"], "missing");
            assert!(f["confidence"].is_null());
        }
        let names: Vec<_> = fields.keys().cloned().collect();
        let expected: Vec<_> = taxonomy(CardKind::Model).iter().map(|k| k.name().to_string()).collect();
        assert_eq!(names, expected);
    }

    #[test]
    fn serialize_pool_transfer_provenance() {
        let mut card = Card::empty("m", CardKind::Model);
        card.set_field(Field {
            key: model("intended_use"),
            value: "chat".into(),
            status: FieldStatus::Filled(Confidence::Medium),
            provenance: FieldProvenance::PoolTransfer {
                source_card_ids: vec!["org/a".into(), "org/b".into()],
            },
        });
        let v = card_to_value(&card);
        assert_eq!(
            v["fields"]["intended_use"]["provenance"],
            serde_json::json!({"source": "pool_transfer", "source_card_ids": ["org/a", "org/b"]})
        );
        assert_eq!(parse_card(&serialize_card(&card)).unwrap(), card);
    }

    #[test]
    fn validate_well_formed() {
        assert!(validate_card(&Card::empty("m", CardKind::Data)).is_ok());
    }

    #[test]
    fn validate_duplicate_key() {
        let mut card = Card::empty("m", CardKind::Model);
        card.fields.push(Field::missing(model("intended_use")));
        let report = validate_card(&card);
        assert_eq!(report.violations, vec![Violation::DuplicateKey("intended_use".into())]);
    }

    #[test]
    fn validate_whitespace_filled_value() {
        let mut card = Card::empty("m", CardKind::Model);
        card.set_field(Field {
            key: model("intended_use"),
            value: "   ".into(),
            status: FieldStatus::Filled(Confidence::Low),
            provenance: FieldProvenance::Unset,
        });
        assert_eq!(
            validate_card(&card).violations,
            vec![Violation::EmptyFilledValue("intended_use".into())]
        );
    }

    #[test]
    fn validate_missing_and_foreign_keys() {
        let mut card = Card::empty("m", CardKind::Model);
        card.fields.pop();
        card.fields.push(Field::missing(FieldKey::new(CardKind::Data, "legal_ethical").unwrap()));
        let v = validate_card(&card).violations;
        assert!(v.contains(&Violation::KindMismatch { field: "legal_ethical".into() }));
        assert!(v.contains(&Violation::MissingKey("caveats_recommendations".into())));
    }

    #[test]
    fn confidence_weights() {
        for c in Confidence::ALL {
            assert_eq!(Confidence::from_weight(c.weight()).unwrap(), c);
        }
        assert!(Confidence::from_weight(0.6).is_err());
    }
}
