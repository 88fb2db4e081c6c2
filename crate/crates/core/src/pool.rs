//! The reference pool: quality-filtered cards used as transfer sources.
//!
//! Covers pool entries and their JSONL file format, popularity and
//! completeness filtering, paginated hub listing (with on-disk record and
//! replay), paper-link detection, and structuring raw descriptions into
//! cards.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gateway::{build_agent, Gateway, GatewayError, Message, Prompt};
use crate::metrics::{self, TagCorrelation};
use crate::schema::{card_from_value, card_to_value, taxonomy, Card, CardKind, SchemaError};

/// Tolerance when checking a stored WCCI against the recomputed value.
const WCCI_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("no entries to filter")]
    EmptyInput,
    #[error("no entries survive the filters; thresholds are too strict")]
    EmptyAfterFilter,
    #[error("entries mix {0} and {1} cards")]
    MixedKinds(CardKind, CardKind),
    #[error("invalid percentile {0}; expected a value in (0, 1]")]
    InvalidPercentile(f64),
    #[error("line {line}: {reason}")]
    InvalidLine { line: usize, reason: String },
    #[error("entry `{id}` stores wcci {stored} but its card scores {computed}")]
    WcciMismatch { id: String, stored: f64, computed: f64 },
    #[error("HTTP error {0}")]
    HttpError(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("no recorded response for {0}")]
    NotRecorded(String),
    #[error("record `{0}` has no description")]
    NoDescription(String),
    #[error("could not structure record `{0}` into a card")]
    StructuringFailed(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub card: Card,
    pub tags: BTreeSet<String>,
    pub downloads: u64,
    pub likes: u64,
    pub wcci: f64,
    pub source_ref: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireEntry {
    card: Value,
    #[serde(default)]
    tags: Vec<String>,
    #[serde(default)]
    downloads: u64,
    #[serde(default)]
    likes: u64,
    wcci: f64,
    #[serde(default)]
    source_ref: Option<String>,
}

impl PoolEntry {
    /// Entry with its WCCI computed from the card. Tags default to the
    /// card's tags.
    pub fn from_card(card: Card, downloads: u64, likes: u64, source_ref: Option<String>) -> Result<Self, metrics::MetricsError> {
        let wcci = metrics::wcci(&card)?.value;
        Ok(PoolEntry {
            tags: card.tags.clone(),
            card,
            downloads,
            likes,
            wcci,
            source_ref,
        })
    }

    pub fn id(&self) -> &str {
        &self.card.id
    }

    pub fn to_json(&self) -> String {
        let wire = WireEntry {
            card: card_to_value(&self.card),
            tags: self.tags.iter().cloned().collect(),
            downloads: self.downloads,
            likes: self.likes,
            wcci: self.wcci,
            source_ref: self.source_ref.clone(),
        };
        serde_json::to_string(&wire).expect("entry serializes")
    }

    /// Parses one entry and re-validates its stored WCCI.
    pub fn from_json(text: &str) -> Result<Self, String> {
        let wire: WireEntry = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let card = card_from_value(wire.card).map_err(|e| e.to_string())?;
        let computed = metrics::wcci(&card).map_err(|e| e.to_string())?.value;
        if !wire.wcci.is_finite() || (computed - wire.wcci).abs() > WCCI_TOLERANCE {
            return Err(format!(
                "entry `{}` stores wcci {} but its card scores {}",
                card.id, wire.wcci, computed
            ));
        }
        Ok(PoolEntry {
            card,
            tags: wire.tags.into_iter().collect(),
            downloads: wire.downloads,
            likes: wire.likes,
            wcci: computed,
            source_ref: wire.source_ref,
        })
    }
}

pub fn pool_to_jsonl(entries: &[PoolEntry]) -> String {
    entries.iter().map(|e| e.to_json() + "\n").collect()
}

pub fn pool_from_jsonl(text: &str) -> Result<Vec<PoolEntry>, PoolError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry = PoolEntry::from_json(line).map_err(|reason| PoolError::InvalidLine { line: i + 1, reason })?;
        out.push(entry);
    }
    Ok(out)
}

pub fn save_pool(path: &Path, entries: &[PoolEntry]) -> Result<(), PoolError> {
    fs::write(path, pool_to_jsonl(entries))?;
    Ok(())
}

pub fn load_pool(path: &Path) -> Result<Vec<PoolEntry>, PoolError> {
    pool_from_jsonl(&fs::read_to_string(path)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolConfig {
    /// Fraction of download survivors kept by WCCI; unset means the
    /// per-kind default.
    pub wcci_percentile: Option<f64>,
    pub min_downloads: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            wcci_percentile: None,
            min_downloads: 100,
        }
    }
}

impl PoolConfig {
    pub fn default_percentile(kind: CardKind) -> f64 {
        match kind {
            CardKind::Model => 0.10,
            CardKind::Data => 0.30,
        }
    }

    pub fn percentile(&self, kind: CardKind) -> f64 {
        self.wcci_percentile.unwrap_or_else(|| Self::default_percentile(kind))
    }
}

/// Number of entries kept from `survivors` at percentile `p`.
pub fn retained_count(p: f64, survivors: usize) -> usize {
    // The epsilon absorbs products like 0.1 * 30 landing just above 3.
    ((p * survivors as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Keeps entries with at least `min_downloads`, then the top fraction of
/// those by WCCI. Ties rank by downloads (higher first), then id. Output is
/// in that order.
pub fn build_pool(entries: &[PoolEntry], config: &PoolConfig) -> Result<Vec<PoolEntry>, PoolError> {
    let first = entries.first().ok_or(PoolError::EmptyInput)?;
    let kind = first.card.kind;
    if let Some(other) = entries.iter().find(|e| e.card.kind != kind) {
        return Err(PoolError::MixedKinds(kind, other.card.kind));
    }
    let p = config.percentile(kind);
    if !(p > 0.0 && p <= 1.0) {
        return Err(PoolError::InvalidPercentile(p));
    }
    let mut survivors: Vec<&PoolEntry> = entries.iter().filter(|e| e.downloads >= config.min_downloads).collect();
    if survivors.is_empty() {
        return Err(PoolError::EmptyAfterFilter);
    }
    survivors.sort_by(|a, b| {
        b.wcci
            .total_cmp(&a.wcci)
            .then(b.downloads.cmp(&a.downloads))
            .then_with(|| a.card.id.cmp(&b.card.id))
    });
    let keep = retained_count(p, survivors.len());
    Ok(survivors.into_iter().take(keep).cloned().collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PoolStats {
    pub size: usize,
    /// Minimum, lower quartile, median, upper quartile, maximum.
    pub wcci_quartiles: [f64; 5],
    pub tag_frequencies: BTreeMap<String, usize>,
    pub tag_correlations: BTreeMap<String, TagCorrelation>,
    pub popularity_correlations: BTreeMap<String, TagCorrelation>,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Size, WCCI quartiles, tag frequencies, and WCCI correlations for the
/// `top_tags` most frequent tags.
pub fn pool_stats(entries: &[PoolEntry], top_tags: usize) -> Result<PoolStats, PoolError> {
    if entries.is_empty() {
        return Err(PoolError::EmptyInput);
    }
    let mut scores: Vec<f64> = entries.iter().map(|e| e.wcci).collect();
    scores.sort_by(f64::total_cmp);
    let wcci_quartiles = [0.0, 0.25, 0.5, 0.75, 1.0].map(|q| quantile(&scores, q));
    let mut tag_frequencies: BTreeMap<String, usize> = BTreeMap::new();
    for e in entries {
        for t in &e.tags {
            *tag_frequencies.entry(t.clone()).or_default() += 1;
        }
    }
    let mut by_freq: Vec<(&String, &usize)> = tag_frequencies.iter().collect();
    by_freq.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    let chosen: Vec<&str> = by_freq.iter().take(top_tags).map(|(t, _)| t.as_str()).collect();
    let (tag_correlations, popularity_correlations) = if entries.len() >= 2 {
        (
            metrics::tag_correlation_report(entries, chosen).unwrap_or_default(),
            metrics::popularity_correlation(entries).unwrap_or_default(),
        )
    } else {
        Default::default()
    };
    Ok(PoolStats {
        size: entries.len(),
        wcci_quartiles,
        tag_frequencies,
        tag_correlations,
        popularity_correlations,
    })
}

// ---------------------------------------------------------------------------
// Hub listing

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HubRecord {
    pub id: String,
    pub tags: Vec<String>,
    pub downloads: u64,
    pub likes: u64,
    pub description: Option<String>,
    #[serde(default)]
    pub source_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
    /// URL of the next page from a `Link: <...>; rel="next"` header.
    pub next: Option<String>,
}

pub trait Transport: Send + Sync {
    fn get(&self, url: &str) -> Result<HttpResponse, PoolError>;
}

fn next_link(header: &str) -> Option<String> {
    header.split(',').find_map(|part| {
        let mut pieces = part.split(';');
        let target = pieces.next()?.trim();
        let is_next = pieces.any(|p| {
            let p = p.trim().replace(' ', "");
            p == "rel=\"next\"" || p == "rel=next"
        });
        (is_next && target.starts_with('<') && target.ends_with('>')).then(|| target[1..target.len() - 1].to_string())
    })
}

pub struct LiveTransport {
    agent: ureq::Agent,
}

impl LiveTransport {
    pub fn new(base_url: &str, timeout: Duration) -> Self {
        LiveTransport {
            agent: build_agent(base_url, timeout),
        }
    }
}

impl Transport for LiveTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, PoolError> {
        let mut resp = self.agent.get(url).call().map_err(|e| match e {
            ureq::Error::StatusCode(code) => PoolError::HttpError(code),
            other => PoolError::Transport(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let next = resp
            .headers()
            .get("link")
            .and_then(|v| v.to_str().ok())
            .and_then(next_link);
        let body = resp.body_mut().read_to_string().map_err(|e| PoolError::Transport(e.to_string()))?;
        Ok(HttpResponse { status, body, next })
    }
}

fn fixture_path(dir: &Path, url: &str) -> PathBuf {
    let digest = hex::encode(Sha256::digest(url.as_bytes()).as_slice());
    dir.join(format!("{}.json", &digest[..32]))
}

#[derive(Serialize, Deserialize)]
struct Recorded {
    url: String,
    response: HttpResponse,
}

/// Forwards to another transport and writes every exchange to `dir`.
pub struct RecordingTransport<T> {
    inner: T,
    dir: PathBuf,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T, dir: impl Into<PathBuf>) -> Result<Self, PoolError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(RecordingTransport { inner, dir })
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn get(&self, url: &str) -> Result<HttpResponse, PoolError> {
        let response = self.inner.get(url)?;
        let rec = Recorded {
            url: url.to_string(),
            response: response.clone(),
        };
        fs::write(fixture_path(&self.dir, url), serde_json::to_string_pretty(&rec).expect("record serializes"))?;
        Ok(response)
    }
}

/// Serves exchanges previously written by [`RecordingTransport`]; never
/// touches the network.
pub struct ReplayTransport {
    dir: PathBuf,
}

impl ReplayTransport {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        ReplayTransport { dir: dir.into() }
    }
}

impl Transport for ReplayTransport {
    fn get(&self, url: &str) -> Result<HttpResponse, PoolError> {
        let text = fs::read_to_string(fixture_path(&self.dir, url)).map_err(|_| PoolError::NotRecorded(url.to_string()))?;
        let rec: Recorded = serde_json::from_str(&text).map_err(|e| PoolError::Transport(e.to_string()))?;
        if rec.url != url {
            return Err(PoolError::NotRecorded(url.to_string()));
        }
        Ok(rec.response)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HubQuery {
    pub kind: CardKind,
    /// Tag filters; each is listed separately and results are merged.
    pub filters: Vec<String>,
    /// Total pages fetched across all filters.
    pub page_budget: usize,
    pub page_size: usize,
}

fn listing_url(base_url: &str, query: &HubQuery, filter: Option<&str>) -> String {
    let path = match query.kind {
        CardKind::Model => "models",
        CardKind::Data => "datasets",
    };
    let mut url = format!("{}/api/{}?limit={}&full=true", base_url.trim_end_matches('/'), path, query.page_size);
    if let Some(f) = filter {
        url.push_str("&filter=");
        url.push_str(&percent_encode(f));
    }
    url
}

fn percent_encode(s: &str) -> String {
    let mut out = String::new();
    for b in s.bytes() {
        if b.is_ascii_alphanumeric() || b"-_.~:".contains(&b) {
            out.push(b as char);
        } else {
            out.push_str(&format!("%{b:02X}"));
        }
    }
    out
}

fn resolve(base_url: &str, next: &str) -> String {
    if next.starts_with("http://") || next.starts_with("https://") {
        next.to_string()
    } else {
        let origin_end = base_url
            .find("://")
            .and_then(|i| base_url[i + 3..].find('/').map(|j| i + 3 + j))
            .unwrap_or(base_url.len());
        format!("{}/{}", &base_url[..origin_end], next.trim_start_matches('/'))
    }
}

fn parse_record(v: &Value) -> Option<HubRecord> {
    let id = v.get("id").or_else(|| v.get("modelId")).and_then(Value::as_str)?.to_string();
    if id.trim().is_empty() {
        return None;
    }
    let tags = match v.get("tags") {
        None | Some(Value::Null) => Vec::new(),
        Some(t) => t
            .as_array()?
            .iter()
            .map(|x| x.as_str().map(str::to_string))
            .collect::<Option<Vec<_>>>()?,
    };
    let count = |k: &str| match v.get(k) {
        None | Some(Value::Null) => Some(0),
        Some(x) => x.as_u64(),
    };
    let description = v
        .get("description")
        .or_else(|| v.pointer("/cardData/description"))
        .and_then(Value::as_str)
        .map(str::to_string);
    Some(HubRecord {
        id,
        tags,
        downloads: count("downloads")?,
        likes: count("likes")?,
        description,
        source_ref: None,
    })
}

/// Lists hub records page by page. Malformed records are skipped with a
/// warning; duplicate ids across filters are kept once.
pub fn fetch_hub_records(transport: &dyn Transport, base_url: &str, query: &HubQuery) -> Result<Vec<HubRecord>, PoolError> {
    let filters: Vec<Option<&str>> = if query.filters.is_empty() {
        vec![None]
    } else {
        query.filters.iter().map(|f| Some(f.as_str())).collect()
    };
    let mut pages = 0;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for filter in filters {
        let mut url = Some(listing_url(base_url, query, filter));
        while let Some(current) = url.take() {
            if pages >= query.page_budget {
                return Ok(out);
            }
            pages += 1;
            let resp = transport.get(&current)?;
            if !(200..300).contains(&resp.status) {
                return Err(PoolError::HttpError(resp.status));
            }
            let listing: Value = serde_json::from_str(&resp.body).map_err(|e| PoolError::Transport(format!("listing body: {e}")))?;
            let items = listing
                .as_array()
                .ok_or_else(|| PoolError::Transport("listing body is not an array".into()))?;
            for item in items {
                match parse_record(item) {
                    Some(rec) => {
                        if seen.insert(rec.id.clone()) {
                            out.push(rec);
                        }
                    }
                    None => log::warn!(
                        "skipping malformed hub record {}",
                        item.get("id").map(Value::to_string).unwrap_or_else(|| "(no id)".into())
                    ),
                }
            }
            url = resp.next.map(|n| resolve(base_url, &n));
        }
    }
    Ok(out)
}

fn paper_tag() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^(arxiv:\d{4}\.\d{4,5}(v\d+)?|doi:10\.\S+)$").unwrap())
}

/// Paper identifier carried by a tag, with the scheme lowercased.
pub fn paper_ref(tag: &str) -> Option<String> {
    let tag = tag.trim();
    paper_tag().is_match(tag).then(|| {
        let (scheme, rest) = tag.split_once(':').expect("matched tags contain a colon");
        format!("{}:{}", scheme.to_lowercase(), rest)
    })
}

/// Keeps records tagged with an arXiv or DOI identifier and records the
/// first such identifier as `source_ref`.
pub fn filter_paper_linked(records: Vec<HubRecord>) -> Vec<HubRecord> {
    records
        .into_iter()
        .filter_map(|mut r| {
            let found = r.tags.iter().find_map(|t| paper_ref(t))?;
            r.source_ref = Some(found);
            Some(r)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructuredCard {
    pub card: Card,
    /// The first response was unusable and a repair prompt succeeded.
    pub repaired: bool,
}

fn strip_fences(text: &str) -> &str {
    let t = text.trim();
    let Some(rest) = t.strip_prefix("```") else { return t };
    let rest = rest.split_once('\n').map(|(_, r)| r).unwrap_or("");
    rest.trim_end().strip_suffix("```").unwrap_or(rest).trim()
}

fn parse_structured(text: &str, record: &HubRecord, kind: CardKind) -> Result<Card, SchemaError> {
    let value: Value = serde_json::from_str(strip_fences(text)).map_err(|e| SchemaError::MalformedJson(e.to_string()))?;
    let fields = match value.get("fields") {
        Some(f) => f.clone(),
        None => value,
    };
    if !fields.is_object() {
        return Err(SchemaError::MalformedJson("expected an object of fields".into()));
    }
    let mut card = card_from_value(json!({"id": record.id, "kind": kind, "fields": fields}))?;
    card.tags = record.tags.iter().cloned().collect();
    Ok(card)
}

/// Converts a record's free-text description into a card. An unusable
/// response gets one repair prompt.
pub fn structure_card(record: &HubRecord, kind: CardKind, gateway: &Gateway) -> Result<StructuredCard, PoolError> {
    let description = record
        .description
        .as_deref()
        .filter(|d| !d.trim().is_empty())
        .ok_or_else(|| PoolError::NoDescription(record.id.clone()))?;
    let mut fields = String::new();
    for key in taxonomy(kind) {
        fields.push_str(&format!("- {}: {}\n", key.name(), key.description()));
    }
    let instructions = format!(
        "Convert the repository description below into a JSON object with exactly these keys:\n{fields}\n\
         Each value is an object {{\"value\": <text>, \"confidence\": <0.25|0.5|0.75|1.0>}}. Use \
         \"Not specified\" when the description says nothing about a field and \"Not applicable\" \
         when the field does not apply. Reply with JSON only."
    );
    let mut messages = vec![
        Message::system("You convert repository descriptions into structured documentation cards."),
        Message::user(format!("{instructions}\n\nDescription:\n{description}")),
    ];
    let first = gateway.generate(&Prompt::new(messages.clone()))?;
    let err = match parse_structured(&first, record, kind) {
        Ok(card) => return Ok(StructuredCard { card, repaired: false }),
        Err(e) => e,
    };
    log::info!("structuring {} needs repair: {}", record.id, err);
    messages.push(Message::assistant(first));
    messages.push(Message::user(format!(
        "That response could not be used ({err}). Reply again with only the JSON object described above."
    )));
    let second = gateway.generate(&Prompt::new(messages))?;
    parse_structured(&second, record, kind)
        .map(|card| StructuredCard { card, repaired: true })
        .map_err(|_| PoolError::StructuringFailed(record.id.clone()))
}
