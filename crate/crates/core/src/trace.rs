//! Trace files and their summary statistics.
//!
//! Extraction traces hold one line per session round; enrichment traces
//! hold one line per missing field. Both are JSONL.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::enrich::{EnrichOutcome, EnrichmentEvent};
use crate::extract::ExtractionSession;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionTraceLine {
    pub card: String,
    pub field: String,
    pub round: u32,
    pub query: String,
    pub gain: Option<u8>,
    pub gain_parse_fallback: bool,
    pub stall_count: u8,
    pub outcome: String,
}

pub fn extraction_trace_lines(card_id: &str, sessions: &[ExtractionSession]) -> Vec<ExtractionTraceLine> {
    sessions
        .iter()
        .flat_map(|s| {
            s.events.iter().map(move |e| ExtractionTraceLine {
                card: card_id.to_string(),
                field: s.field.clone(),
                round: e.round,
                query: e.query.clone(),
                gain: e.gain,
                gain_parse_fallback: e.gain_parse_fallback,
                stall_count: e.stall_count,
                outcome: e.outcome.clone(),
            })
        })
        .collect()
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("trace line serializes") + "\n")
        .collect()
}

pub fn extraction_trace_jsonl(card_id: &str, sessions: &[ExtractionSession]) -> String {
    to_jsonl(&extraction_trace_lines(card_id, sessions))
}

pub fn enrichment_trace_jsonl(events: &[EnrichmentEvent]) -> String {
    to_jsonl(events)
}

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("no trace input")]
    NoTraces,
    #[error("{source_name}: malformed trace line {line}: {reason}")]
    MalformedTrace { source_name: String, line: usize, reason: String },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EnrichmentCounts {
    /// Filled or marked not applicable from the pool.
    pub enriched: usize,
    /// Artifact-specific fields, never attempted.
    pub skipped: usize,
    /// No similar card or no value to transfer.
    pub empty: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TraceStats {
    pub sessions: usize,
    /// Round to number of sessions still active in that round.
    pub active_rounds: BTreeMap<u32, usize>,
    /// Field to round to active sessions.
    pub active_rounds_by_field: BTreeMap<String, BTreeMap<u32, usize>>,
    /// Session outcome to count.
    pub outcomes: BTreeMap<String, usize>,
    pub enrichment: EnrichmentCounts,
    pub enrichment_by_field: BTreeMap<String, EnrichmentCounts>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum AnyLine {
    Extraction(ExtractionTraceLine),
    Enrichment(EnrichmentEvent),
}

fn bump(counts: &mut EnrichmentCounts, outcome: EnrichOutcome) {
    match outcome {
        EnrichOutcome::Enriched | EnrichOutcome::NotApplicable => counts.enriched += 1,
        EnrichOutcome::SkippedUnique => counts.skipped += 1,
        EnrichOutcome::NoCandidates | EnrichOutcome::NoValues => counts.empty += 1,
        EnrichOutcome::Failed => counts.failed += 1,
    }
}

/// Summarizes trace files given as (name, contents). A session is active
/// in every round from 0 to the last round it records; sessions are keyed
/// by (file, card, field).
pub fn trace_stats<'a>(inputs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<TraceStats, TraceError> {
    let mut any = false;
    let mut last_round: BTreeMap<(usize, String, String), (u32, String)> = BTreeMap::new();
    let mut stats = TraceStats::default();
    for (file, (name, text)) in inputs.into_iter().enumerate() {
        any = true;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parsed: AnyLine = serde_json::from_str(line).map_err(|e| TraceError::MalformedTrace {
                source_name: name.to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            match parsed {
                AnyLine::Extraction(l) => {
                    let slot = last_round.entry((file, l.card, l.field)).or_insert((l.round, l.outcome.clone()));
                    if l.round >= slot.0 {
                        *slot = (l.round, l.outcome);
                    }
                }
                AnyLine::Enrichment(e) => {
                    bump(&mut stats.enrichment, e.outcome);
                    bump(stats.enrichment_by_field.entry(e.field).or_default(), e.outcome);
                }
            }
        }
    }
    if !any {
        return Err(TraceError::NoTraces);
    }
    stats.sessions = last_round.len();
    for ((_, _, field), (end, outcome)) in last_round {
        let by_field = stats.active_rounds_by_field.entry(field).or_default();
        for r in 0..=end {
            *stats.active_rounds.entry(r).or_default() += 1;
            *by_field.entry(r).or_default() += 1;
        }
        *stats.outcomes.entry(outcome).or_default() += 1;
    }
    Ok(stats)
}
