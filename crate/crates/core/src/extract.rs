//! Per-field extraction with adaptive query expansion.
//!
//! Each taxonomy field runs its own session: retrieve the best chunks for
//! the current query, revise a cumulative answer, ask whether the answer is
//! complete (and if not, for a better query), and score the information gain
//! over the previous round. A session ends when the answer is declared
//! complete, when two consecutive rounds gain at most `epsilon`, or after
//! `r_max` rounds. The field value is the last answer.

use std::sync::OnceLock;

use indexmap::IndexMap;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{Gateway, GatewayError, Message, Prompt, ServiceFault};
use crate::ingest::Document;
use crate::schema::{taxonomy, Card, CardKind, Confidence, Field, FieldKey, FieldProvenance};
use crate::workers::map_ordered;

pub const COMPLETE_SENTINEL: &str = "COMPLETE";
pub const NO_PREVIOUS_ANSWER: &str = "(no previous answer)";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractionConfig {
    pub r_max: u32,
    pub epsilon: u8,
    pub top_chunks: usize,
    /// Chunks scoring below this are never shown to the answer prompt.
    pub rerank_cutoff: f64,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        ExtractionConfig {
            r_max: 10,
            epsilon: 1,
            top_chunks: 4,
            rerank_cutoff: 0.0,
        }
    }
}

impl ExtractionConfig {
    pub fn validate(&self) -> Result<(), ExtractionError> {
        if self.r_max == 0 {
            return Err(ExtractionError::InvalidConfig("r_max must be at least 1".into()));
        }
        if self.epsilon > 3 {
            return Err(ExtractionError::InvalidConfig("epsilon must be in 0..=3".into()));
        }
        if self.top_chunks == 0 {
            return Err(ExtractionError::InvalidConfig("top_chunks must be at least 1".into()));
        }
        if !self.rerank_cutoff.is_finite() {
            return Err(ExtractionError::InvalidConfig("rerank_cutoff must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExtractionError {
    #[error("invalid extraction config: {0}")]
    InvalidConfig(String),
    #[error("document has no chunks")]
    EmptyDocument,
    #[error("no chunk scored at or above the cutoff {cutoff} (best {best})")]
    NoRelevantChunks { best: f64, cutoff: f64 },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionOutcome {
    Complete,
    Stalled,
    MaxRounds,
}

impl SessionOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            SessionOutcome::Complete => "complete",
            SessionOutcome::Stalled => "stalled",
            SessionOutcome::MaxRounds => "max_rounds",
        }
    }
}

/// One executed round, or the terminal state of a session that ran out of
/// rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundEvent {
    pub round: u32,
    pub query: String,
    pub gain: Option<u8>,
    pub gain_parse_fallback: bool,
    pub stall_count: u8,
    /// `continue` for rounds that led to another round, otherwise the
    /// session outcome.
    pub outcome: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSession {
    pub field: String,
    pub initial_query: String,
    /// Round counter at termination.
    pub round: u32,
    /// Issued queries, starting with the initial query.
    pub query_history: Vec<String>,
    pub answers: Vec<String>,
    /// Gains for rounds 1.. in order; each in 0..=3.
    pub gains: Vec<u8>,
    pub stall_count: u8,
    pub outcome: SessionOutcome,
    pub events: Vec<RoundEvent>,
    /// Set when a non-fatal error ended the session early.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ExtractionSession {
    fn new(field: FieldKey, q0: &str) -> Self {
        ExtractionSession {
            field: field.name().to_string(),
            initial_query: q0.to_string(),
            round: 0,
            query_history: Vec::new(),
            answers: Vec::new(),
            gains: Vec::new(),
            stall_count: 0,
            outcome: SessionOutcome::Stalled,
            events: Vec::new(),
            error: None,
        }
    }
}

fn kind_noun(kind: CardKind) -> &'static str {
    match kind {
        CardKind::Model => "model",
        CardKind::Data => "dataset",
    }
}

/// One seed query per taxonomy field, in taxonomy order.
pub fn initial_queries(kind: CardKind) -> IndexMap<FieldKey, String> {
    taxonomy(kind)
        .into_iter()
        .map(|key| {
            let q = format!(
                "What do the paper and repository state about the {} of this {}? Cover: {}.",
                key.title().to_lowercase(),
                kind_noun(kind),
                key.description()
            );
            (key, q)
        })
        .collect()
}

fn confidence_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*\**confidence\**\s*[:=]\s*\**\s*([0-9]*\.?[0-9]+)\s*\**\s*$").unwrap())
}

/// Splits a trailing `CONFIDENCE: x` line off an answer. An unrecognized
/// weight yields `None`; the line is stripped either way.
pub fn split_confidence(raw: &str) -> (String, Option<Confidence>) {
    let trimmed = raw.trim_end();
    let (body, last) = match trimmed.rfind('\n') {
        Some(i) => (&trimmed[..i], &trimmed[i + 1..]),
        None => ("", trimmed),
    };
    match confidence_line().captures(last) {
        Some(caps) => {
            let confidence = caps[1]
                .parse::<f64>()
                .ok()
                .and_then(|w| Confidence::from_weight(w).ok());
            (body.trim().to_string(), confidence)
        }
        None => (raw.trim().to_string(), None),
    }
}

fn first_integer() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+").unwrap())
}

/// First integer in `text` if it lies in `lo..=hi`.
pub(crate) fn parse_first_integer(text: &str, lo: u8, hi: u8) -> Option<u8> {
    let m = first_integer().find(text)?;
    let n: u32 = m.as_str().parse().ok()?;
    (lo as u32..=hi as u32).contains(&n).then_some(n as u8)
}

/// Reranks every chunk against `query`, keeps the best `top_chunks` at or
/// above the cutoff, and asks for a revised cumulative answer.
pub fn answer_round(
    query: &str,
    doc: &Document,
    prev_answer: Option<&str>,
    field: FieldKey,
    config: &ExtractionConfig,
    gateway: &Gateway,
) -> Result<String, ExtractionError> {
    if doc.is_empty() {
        return Err(ExtractionError::EmptyDocument);
    }
    let texts: Vec<String> = doc.chunks().iter().map(|c| c.text()).collect();
    let ranked = gateway.rerank(query, &texts)?;
    let kept: Vec<usize> = ranked
        .scores
        .iter()
        .filter(|(_, s)| *s >= config.rerank_cutoff)
        .take(config.top_chunks)
        .map(|(i, _)| *i)
        .collect();
    if kept.is_empty() {
        return Err(ExtractionError::NoRelevantChunks {
            best: ranked.scores.first().map(|(_, s)| *s).unwrap_or(f64::NAN),
            cutoff: config.rerank_cutoff,
        });
    }
    let mut excerpts = String::new();
    for (n, &i) in kept.iter().enumerate() {
        let chunk = &doc.chunks()[i];
        excerpts.push_str(&format!("[{}] {}\n{}\n\n", n + 1, chunk.heading, chunk.body));
    }
    let system = format!(
        "You document one field of a {} card using only the source excerpts provided. \
         Do not invent facts.",
        kind_noun(field.kind())
    );
    let user = format!(
        "Field: {title}\nField scope: {desc}\n\nQuery: {query}\n\nPrevious answer:\n{prev}\n\n\
         Source excerpts:\n{excerpts}\
         Write the complete current answer for this field, keeping every supported fact from \
         the previous answer and adding what the excerpts contribute. If the sources say \
         nothing relevant, answer `Not specified`. End with a final line \
         `CONFIDENCE: <0.25|0.5|0.75|1.0>`.",
        title = field.title(),
        desc = field.description(),
        prev = prev_answer.unwrap_or(NO_PREVIOUS_ANSWER),
    );
    Ok(gateway.generate(&Prompt::new(vec![Message::system(system), Message::user(user)]))?)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Assessment {
    Complete,
    NextQuery(String),
}

/// Asks whether `answer` fully covers the field and, if not, for the next
/// query. Only the exact trimmed response `COMPLETE` signals completion.
pub fn assess_and_refine(
    q0: &str,
    answer: &str,
    history: &[String],
    field: FieldKey,
    gateway: &Gateway,
) -> Result<Assessment, GatewayError> {
    let mut listed = String::new();
    for (i, q) in history.iter().enumerate() {
        listed.push_str(&format!("{}. {}\n", i + 1, q));
    }
    let user = format!(
        "Field: {title}\nField scope: {desc}\nOriginal query: {q0}\n\nQueries already asked:\n\
         {listed}\nCurrent answer:\n{answer}\n\n\
         If the current answer fully covers the field scope, reply with exactly {sentinel}. \
         Otherwise identify the most important information gap in the current answer and reply \
         with one new query that targets it. The new query must differ from every query already \
         asked. Reply with the query only.",
        title = field.title(),
        desc = field.description(),
        sentinel = COMPLETE_SENTINEL,
    );
    let response = gateway.generate(&Prompt::new(vec![
        Message::system("You plan retrieval queries for documenting a card field."),
        Message::user(user),
    ]))?;
    let trimmed = response.trim();
    if trimmed.is_empty() {
        return Err(GatewayError::Service(ServiceFault::EmptyRefinement));
    }
    if trimmed == COMPLETE_SENTINEL {
        Ok(Assessment::Complete)
    } else {
        Ok(Assessment::NextQuery(trimmed.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gain {
    pub value: u8,
    /// The response held no integer in 0..=3 and `value` is the fallback 0.
    pub parse_fallback: bool,
}

/// Scores how much `curr` improves on `prev`, 0 to 3.
pub fn compute_gain(
    prev: &str,
    curr: &str,
    q0: &str,
    field: FieldKey,
    gateway: &Gateway,
) -> Result<Gain, GatewayError> {
    let user = format!(
        "Field: {title}\nOriginal query: {q0}\n\nPrevious answer:\n{prev}\n\nCurrent answer:\n{curr}\n\n\
         Rate the information gain of the current answer over the previous answer on a 0-3 \
         scale, judging completeness, quality, new information, and utility. \
         0 = no gain, 1 = marginal gain, 2 = clear gain, 3 = substantial gain. \
         Reply with the integer only.",
        title = field.title(),
    );
    let response = gateway.generate(&Prompt::new(vec![
        Message::system("You grade successive answers for a card field."),
        Message::user(user),
    ]))?;
    Ok(match parse_first_integer(&response, 0, 3) {
        Some(value) => Gain {
            value,
            parse_fallback: false,
        },
        None => {
            log::warn!("unparsable gain response for {}: {:?}", field.name(), response);
            Gain {
                value: 0,
                parse_fallback: true,
            }
        }
    })
}

fn distinct_query(next: String, history: &[String], round: u32) -> String {
    if history.iter().any(|q| q.trim() == next.trim()) {
        format!("{next} (round {round}: focus on details not covered by earlier answers)")
    } else {
        next
    }
}

fn fail_session(session: &mut ExtractionSession, err: &dyn std::fmt::Display) {
    session.outcome = SessionOutcome::Stalled;
    session.error = Some(err.to_string());
    if let Some(last) = session.events.last_mut() {
        last.outcome = SessionOutcome::Stalled.as_str().to_string();
    }
}

/// Runs one field session. Only precondition and fatal gateway errors are
/// returned; other failures leave the field `Missing` and are recorded in
/// the session.
pub fn extract_field(
    doc: &Document,
    field: FieldKey,
    q0: &str,
    config: &ExtractionConfig,
    gateway: &Gateway,
) -> Result<(Field, ExtractionSession), ExtractionError> {
    config.validate()?;
    if doc.is_empty() {
        return Err(ExtractionError::EmptyDocument);
    }
    let mut s = ExtractionSession::new(field, q0);
    let mut next_query = q0.to_string();
    let mut confidence = None;
    let mut r: u32 = 0;

    macro_rules! bail {
        ($err:expr) => {{
            let err = $err;
            if err.is_fatal() {
                return Err(err.into());
            }
            fail_session(&mut s, &err);
            log::warn!("field {} failed: {}", field.name(), err);
            return Ok((Field::missing(field), s));
        }};
    }

    loop {
        if r >= config.r_max {
            s.outcome = SessionOutcome::MaxRounds;
            s.events.push(RoundEvent {
                round: r,
                query: next_query.clone(),
                gain: None,
                gain_parse_fallback: false,
                stall_count: s.stall_count,
                outcome: SessionOutcome::MaxRounds.as_str().to_string(),
            });
            break;
        }
        let query = next_query.clone();
        let prev = s.answers.last().map(String::as_str);
        let raw = match answer_round(&query, doc, prev, field, config, gateway) {
            Ok(raw) => raw,
            Err(ExtractionError::NoRelevantChunks { best, cutoff }) => {
                log::info!("field {}: no chunk above cutoff {cutoff} (best {best})", field.name());
                if s.answers.is_empty() {
                    s.outcome = SessionOutcome::Stalled;
                    s.events.push(RoundEvent {
                        round: r,
                        query,
                        gain: None,
                        gain_parse_fallback: false,
                        stall_count: s.stall_count,
                        outcome: SessionOutcome::Stalled.as_str().to_string(),
                    });
                    return Ok((Field::missing(field), s));
                }
                // Keep the last answer; the pending query is never issued.
                s.outcome = SessionOutcome::Stalled;
                if let Some(last) = s.events.last_mut() {
                    last.outcome = SessionOutcome::Stalled.as_str().to_string();
                }
                s.round = r - 1;
                break;
            }
            Err(ExtractionError::Gateway(e)) => bail!(e),
            Err(other) => return Err(other),
        };
        s.query_history.push(query.clone());
        let (answer, stated) = split_confidence(&raw);
        confidence = stated;
        s.answers.push(answer);
        s.round = r;
        let current = &s.answers[r as usize];

        let assessment = match assess_and_refine(q0, current, &s.query_history, field, gateway) {
            Ok(a) => a,
            Err(e) => bail!(e),
        };
        let mut event = RoundEvent {
            round: r,
            query,
            gain: None,
            gain_parse_fallback: false,
            stall_count: s.stall_count,
            outcome: "continue".to_string(),
        };
        let refined = match assessment {
            Assessment::Complete => {
                s.outcome = SessionOutcome::Complete;
                event.outcome = SessionOutcome::Complete.as_str().to_string();
                s.events.push(event);
                break;
            }
            Assessment::NextQuery(q) => q,
        };
        if r > 0 {
            let prev = &s.answers[r as usize - 1];
            let gain = match compute_gain(prev, current, q0, field, gateway) {
                Ok(g) => g,
                Err(e) => {
                    s.events.push(event);
                    bail!(e)
                }
            };
            s.gains.push(gain.value);
            event.gain = Some(gain.value);
            event.gain_parse_fallback = gain.parse_fallback;
            if gain.value <= config.epsilon {
                s.stall_count += 1;
            } else {
                s.stall_count = 0;
            }
        } else {
            s.stall_count = 0;
        }
        event.stall_count = s.stall_count;
        if s.stall_count >= 2 {
            s.outcome = SessionOutcome::Stalled;
            event.outcome = SessionOutcome::Stalled.as_str().to_string();
            s.events.push(event);
            break;
        }
        s.events.push(event);
        next_query = distinct_query(refined, &s.query_history, r + 1);
        r += 1;
        s.round = r;
    }

    let last_index = s.answers.len() as u32 - 1;
    let value = s.answers.last().expect("at least one answer").clone();
    let field_value = Field::from_text(
        field,
        &value,
        confidence.unwrap_or(Confidence::DEFAULT),
        FieldProvenance::Extraction { round: last_index },
    );
    Ok((field_value, s))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionRun {
    pub card: Card,
    /// One session per taxonomy field, in taxonomy order.
    pub sessions: Vec<ExtractionSession>,
}

impl ExtractionRun {
    /// Fields whose session ended on a gateway error.
    pub fn failed_fields(&self) -> Vec<&str> {
        self.sessions
            .iter()
            .filter(|s| s.error.is_some())
            .map(|s| s.field.as_str())
            .collect()
    }
}

/// Extracts every taxonomy field of `kind` from `doc`.
pub fn run_ipe_qe(
    doc: &Document,
    card_id: &str,
    kind: CardKind,
    config: &ExtractionConfig,
    gateway: &Gateway,
) -> Result<ExtractionRun, ExtractionError> {
    config.validate()?;
    if doc.is_empty() {
        return Err(ExtractionError::EmptyDocument);
    }
    let queries: Vec<(FieldKey, String)> = initial_queries(kind).into_iter().collect();
    let results = map_ordered(&queries, gateway.parallelism(), |(key, q0)| {
        extract_field(doc, *key, q0, config, gateway)
    });
    let mut card = Card::empty(card_id, kind);
    let mut sessions = Vec::with_capacity(results.len());
    for result in results {
        let (field, session) = result?;
        card.set_field(field);
        sessions.push(session);
    }
    Ok(ExtractionRun { card, sessions })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{MockBackend, ScriptEntry};

    #[test]
    fn seed_queries() {
        let q = initial_queries(CardKind::Model);
        let training = &q[&FieldKey::new(CardKind::Model, "training_data").unwrap()];
        let lower = training.to_lowercase();
        assert!(lower.contains("training corpus") && lower.contains("data filtering"));
        let data = initial_queries(CardKind::Data);
        assert_eq!(data.len(), 12);
        let distinct: std::collections::HashSet<_> = data.values().collect();
        assert_eq!(distinct.len(), 12);
    }

    #[test]
    fn confidence_marker() {
        assert_eq!(
            split_confidence("Trained on C4.\nCONFIDENCE: 0.75"),
            ("Trained on C4.".to_string(), Some(Confidence::High))
        );
        assert_eq!(
            split_confidence("Trained on C4.\nConfidence: 0.6"),
            ("Trained on C4.".to_string(), None)
        );
        assert_eq!(split_confidence("Plain answer."), ("Plain answer.".to_string(), None));
        assert_eq!(split_confidence("CONFIDENCE: 1.0"), (String::new(), Some(Confidence::Certain)));
    }

    #[test]
    fn first_integer_parse() {
        assert_eq!(parse_first_integer("3", 0, 3), Some(3));
        assert_eq!(parse_first_integer("Score: 2 (adds new metrics)", 0, 3), Some(2));
        assert_eq!(parse_first_integer("excellent", 0, 3), None);
        assert_eq!(parse_first_integer("7", 0, 3), None);
        assert_eq!(parse_first_integer("Score: 4/5", 1, 5), Some(4));
    }

    #[test]
    fn config_validation() {
        assert!(ExtractionConfig::default().validate().is_ok());
        let bad = ExtractionConfig {
            epsilon: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = ExtractionConfig {
            r_max: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn assess_sentinel_is_exact() {
        let key = FieldKey::new(CardKind::Model, "caveats_recommendations").unwrap();
        for (response, expected) in [
            ("COMPLETE", Assessment::Complete),
            ("  COMPLETE\n", Assessment::Complete),
            ("What license applies?", Assessment::NextQuery("What license applies?".into())),
            ("  complete  ", Assessment::NextQuery("complete".into())),
        ] {
            let mock = std::sync::Arc::new(MockBackend::new(vec![ScriptEntry::new("Queries already asked", response)]));
            let gw = Gateway::mock(mock);
            assert_eq!(assess_and_refine("q0", "answer", &["q0".into()], key, &gw).unwrap(), expected);
        }
        let mock = std::sync::Arc::new(MockBackend::new(vec![ScriptEntry::new("Queries already asked", " \n")]));
        let gw = Gateway::mock(mock);
        assert_eq!(
            assess_and_refine("q0", "answer", &[], key, &gw).unwrap_err(),
            GatewayError::Service(ServiceFault::EmptyRefinement)
        );
    }

    #[test]
    fn empty_document_makes_no_calls() {
        let mock = std::sync::Arc::new(MockBackend::new(vec![]));
        let gw = Gateway::mock(mock);
        let err = run_ipe_qe(&Document::default(), "x", CardKind::Model, &Default::default(), &gw).unwrap_err();
        assert_eq!(err, ExtractionError::EmptyDocument);
        assert!(gw.call_log().is_empty());
    }
}
