//! Model-as-judge evaluation of generated cards.
//!
//! Every (method, card, metric) triple is scored 1 to 5 by each judge in
//! each round. Methods are relabeled A, B, C... by a seeded shuffle, judge
//! prompts carry no method label or repository identifier, and each
//! (round, judge) pass presents the triples in its own seeded order. Means
//! are taken over judges, rounds, and cards; failed calls are excluded and
//! counted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extract::parse_first_integer;
use crate::gateway::{Gateway, GatewayError, Message, Prompt};
use crate::ingest::Document;
use crate::metrics::{self, average_ranks, CorrelationError, CorrelationResult};
use crate::rng::SplitMix64;
use crate::schema::{Card, FieldStatus};
use crate::workers::map_ordered;

/// Longest source excerpt shown to a judge, per chunk.
const MAX_SOURCE_CHARS: usize = 4000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Faithfulness,
    Relevance,
    Accuracy,
    Consistency,
    Usefulness,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::Faithfulness,
        MetricKind::Relevance,
        MetricKind::Accuracy,
        MetricKind::Consistency,
        MetricKind::Usefulness,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Faithfulness => "faithfulness",
            MetricKind::Relevance => "relevance",
            MetricKind::Accuracy => "accuracy",
            MetricKind::Consistency => "consistency",
            MetricKind::Usefulness => "usefulness",
        }
    }

    pub fn definition(self) -> &'static str {
        match self {
            MetricKind::Faithfulness => {
                "Accurately reflects information from source materials without introducing unsupported claims or omitting key points"
            }
            MetricKind::Relevance => {
                "Content focused on the specific category being evaluated, avoiding unrelated or off-topic information"
            }
            MetricKind::Accuracy => {
                "Statements are factually correct based on available references and can be directly verified"
            }
            MetricKind::Consistency => {
                "Information is internally consistent within the card, with no contradictions or logical gaps"
            }
            MetricKind::Usefulness => {
                "Provides clear, practical, and helpful information for users or researchers who want to understand or use the model or dataset"
            }
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JudgeConfig {
    pub rounds: u32,
    pub seed: u64,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        JudgeConfig { rounds: 5, seed: 0 }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error("no integer score in 1..=5 after a re-prompt; last response {0:?}")]
    JudgeParseError(String),
    #[error("methods do not cover the same cards: {0}")]
    CoverageMismatch(String),
    #[error("invalid evaluation setup: {0}")]
    InvalidSetup(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRecord {
    /// Anonymized method label.
    pub method: String,
    pub card_id: String,
    pub metric: MetricKind,
    pub judge: usize,
    pub round: u32,
    pub score: u8,
}

/// Replaces identifying strings, case-insensitively, with a neutral token.
#[derive(Debug, Clone)]
pub struct Redactor {
    pattern: Option<Regex>,
}

const REDACTED: &str = "[redacted]";

impl Redactor {
    /// Terms shorter than three characters are ignored.
    pub fn new<'a>(terms: impl IntoIterator<Item = &'a str>) -> Self {
        let mut terms: Vec<&str> = terms.into_iter().map(str::trim).filter(|t| t.chars().count() >= 3).collect();
        terms.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
        terms.dedup();
        let pattern = (!terms.is_empty()).then(|| {
            let alternatives: Vec<String> = terms.iter().map(|t| regex::escape(t)).collect();
            Regex::new(&format!("(?i){}", alternatives.join("|"))).expect("escaped alternatives compile")
        });
        Redactor { pattern }
    }

    pub fn apply(&self, text: &str) -> String {
        match &self.pattern {
            Some(re) => re.replace_all(text, REDACTED).into_owned(),
            None => text.to_string(),
        }
    }
}

/// Identifiers of a card: its id and the segment after the last `/`.
pub fn card_identifiers(card_id: &str) -> Vec<String> {
    let mut out = vec![card_id.to_string()];
    if let Some((_, name)) = card_id.rsplit_once('/') {
        out.push(name.to_string());
    }
    out
}

/// Card text as shown to judges: field titles and values, no id or tags.
pub fn render_card(card: &Card, redactor: &Redactor) -> String {
    let mut out = String::new();
    for f in &card.fields {
        let value = match f.status {
            FieldStatus::Filled(_) => redactor.apply(&f.value),
            FieldStatus::Missing => "(missing)".to_string(),
            FieldStatus::NotApplicable => "(not applicable)".to_string(),
        };
        out.push_str(&format!("## {}\n{}\n\n", f.key.title(), value));
    }
    out
}

fn render_sources(doc: &Document, redactor: &Redactor) -> String {
    let mut out = String::new();
    for c in doc.chunks() {
        let body: String = c.body.chars().take(MAX_SOURCE_CHARS).collect();
        out.push_str(&format!("### {}\n{}\n\n", redactor.apply(&c.heading), redactor.apply(&body)));
    }
    out
}

fn judge_prompt(card_text: &str, source_text: &str, metric: MetricKind) -> Vec<Message> {
    vec![
        Message::system("You are an impartial evaluator of AI documentation cards."),
        Message::user(format!(
            "Metric: {name}\nDefinition: {def}\n\nScore the card below on this metric from 1 (poor) to \
             5 (excellent), using the source material as reference.\n\nSource material:\n{source_text}\
             Card:\n{card_text}Reply with a single integer from 1 to 5.",
            name = metric.name(),
            def = metric.definition(),
        )),
    ]
}

fn score_prompt(messages: Vec<Message>, gateway: &Gateway) -> Result<u8, JudgeError> {
    let first = gateway.generate(&Prompt::new(messages.clone()))?;
    if let Some(score) = parse_first_integer(&first, 1, 5) {
        return Ok(score);
    }
    let mut retry = messages;
    retry.push(Message::assistant(first));
    retry.push(Message::user("Reply with only one integer from 1 to 5."));
    let second = gateway.generate(&Prompt::new(retry))?;
    parse_first_integer(&second, 1, 5).ok_or(JudgeError::JudgeParseError(second))
}

/// Scores one card on one metric. The prompt omits the card id and
/// redacts it from the card text and sources.
pub fn judge_card(card: &Card, sources: &Document, metric: MetricKind, gateway: &Gateway) -> Result<u8, JudgeError> {
    if sources.is_empty() {
        return Err(JudgeError::InvalidSetup(format!("no source chunks for `{}`", card.id)));
    }
    let ids = card_identifiers(&card.id);
    let redactor = Redactor::new(ids.iter().map(String::as_str));
    score_prompt(
        judge_prompt(&render_card(card, &redactor), &render_sources(sources, &redactor), metric),
        gateway,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct JudgeAgreement {
    /// Paired (method, card) observations.
    pub pairs: usize,
    #[serde(serialize_with = "metrics::serialize_correlation")]
    pub result: Result<CorrelationResult, CorrelationError>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvaluationReport {
    /// Method name to metric name to mean score.
    pub mean_scores: BTreeMap<String, BTreeMap<String, f64>>,
    /// Method name to metric name (plus `average`) to rank; 1 is best.
    pub ranks: BTreeMap<String, BTreeMap<String, f64>>,
    /// Judge index to method name to metric name to mean score.
    pub per_judge: BTreeMap<usize, BTreeMap<String, BTreeMap<String, f64>>>,
    /// Judge 0 against judge 1, per metric; empty with a single judge.
    pub agreement: BTreeMap<String, JudgeAgreement>,
    pub missing_scores: usize,
    /// Anonymized label to method name.
    pub anonymization: BTreeMap<String, String>,
    /// Sorted by metric, method label, judge, round, card id.
    pub records: Vec<ScoreRecord>,
}

/// Averaged competition ranks, highest score first.
pub fn rank_methods(scores: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let values: Vec<f64> = scores.values().map(|s| -s).collect();
    scores.keys().cloned().zip(average_ranks(&values)).collect()
}

/// Mean of per-metric ranks for each method.
pub fn average_rank(per_metric: &BTreeMap<String, f64>) -> f64 {
    per_metric.values().sum::<f64>() / per_metric.len() as f64
}

fn label(i: usize) -> String {
    let mut n = i;
    let mut out = Vec::new();
    loop {
        out.push((b'A' + (n % 26) as u8) as char);
        if n < 26 {
            break;
        }
        n = n / 26 - 1;
    }
    out.iter().rev().collect()
}

#[derive(Clone)]
struct Task<'a> {
    label: &'a str,
    card: &'a Card,
    metric: MetricKind,
}

/// Scores every (method, card, metric) with every judge for every round.
pub fn evaluate(
    methods: &BTreeMap<String, Vec<Card>>,
    sources: &BTreeMap<String, Document>,
    judges: &[Gateway],
    config: &JudgeConfig,
) -> Result<EvaluationReport, JudgeError> {
    if methods.is_empty() {
        return Err(JudgeError::InvalidSetup("no methods".into()));
    }
    if judges.is_empty() {
        return Err(JudgeError::InvalidSetup("no judges".into()));
    }
    if config.rounds == 0 {
        return Err(JudgeError::InvalidSetup("rounds must be at least 1".into()));
    }
    let mut coverage: Option<BTreeSet<&str>> = None;
    for (name, cards) in methods {
        let ids: BTreeSet<&str> = cards.iter().map(|c| c.id.as_str()).collect();
        if ids.len() != cards.len() {
            return Err(JudgeError::CoverageMismatch(format!("method `{name}` repeats a card id")));
        }
        match &coverage {
            None => coverage = Some(ids),
            Some(expected) if *expected != ids => {
                return Err(JudgeError::CoverageMismatch(format!("method `{name}` covers a different card set")))
            }
            Some(_) => {}
        }
    }
    let card_ids = coverage.unwrap_or_default();
    for id in &card_ids {
        match sources.get(*id) {
            Some(doc) if !doc.is_empty() => {}
            _ => return Err(JudgeError::CoverageMismatch(format!("no sources for card `{id}`"))),
        }
    }

    let names: Vec<&String> = methods.keys().collect();
    let mut order: Vec<usize> = (0..names.len()).collect();
    SplitMix64::new(config.seed).shuffle(&mut order);
    let mut anonymization = BTreeMap::new();
    let mut label_of: BTreeMap<&str, String> = BTreeMap::new();
    for (slot, &method_index) in order.iter().enumerate() {
        anonymization.insert(label(slot), names[method_index].clone());
        label_of.insert(names[method_index].as_str(), label(slot));
    }

    // Prompts are fixed per (card, metric) and shared by every method's
    // version of the card, so render them once.
    let mut redaction_terms: Vec<String> = names.iter().map(|n| n.to_string()).collect();
    redaction_terms.extend(anonymization.keys().filter(|l| l.len() >= 3).cloned());
    let mut prompts: BTreeMap<(&str, &str, MetricKind), Vec<Message>> = BTreeMap::new();
    for (name, cards) in methods {
        for card in cards {
            let mut terms = redaction_terms.clone();
            terms.extend(card_identifiers(&card.id));
            let redactor = Redactor::new(terms.iter().map(String::as_str));
            let card_text = render_card(card, &redactor);
            let source_text = render_sources(&sources[&card.id], &redactor);
            for metric in MetricKind::ALL {
                prompts.insert((name, &card.id, metric), judge_prompt(&card_text, &source_text, metric));
            }
        }
    }

    let mut base: Vec<Task<'_>> = Vec::new();
    for (name, cards) in methods {
        for card in cards {
            for metric in MetricKind::ALL {
                base.push(Task {
                    label: &label_of[name.as_str()],
                    card,
                    metric,
                });
            }
        }
    }
    let method_of: BTreeMap<&str, &str> = label_of.iter().map(|(m, l)| (l.as_str(), *m)).collect();

    let run_judge = |judge: usize| -> Result<(Vec<ScoreRecord>, usize), JudgeError> {
        let gateway = &judges[judge];
        let mut records = Vec::new();
        let mut missing = 0;
        for round in 0..config.rounds {
            let mut tasks = base.clone();
            SplitMix64::new(config.seed ^ round as u64 ^ ((judge as u64) << 32)).shuffle(&mut tasks);
            let results = map_ordered(&tasks, gateway.parallelism(), |t| {
                let messages = prompts[&(method_of[t.label], t.card.id.as_str(), t.metric)].clone();
                score_prompt(messages, gateway)
            });
            for (task, result) in tasks.iter().zip(results) {
                match result {
                    Ok(score) => records.push(ScoreRecord {
                        method: task.label.to_string(),
                        card_id: task.card.id.clone(),
                        metric: task.metric,
                        judge,
                        round,
                        score,
                    }),
                    Err(JudgeError::Gateway(e)) if e.is_fatal() => return Err(JudgeError::Gateway(e)),
                    Err(e) => {
                        log::warn!("judge {judge} round {round} failed on {}: {e}", task.card.id);
                        missing += 1;
                    }
                }
            }
        }
        Ok((records, missing))
    };

    let sequential = judges.iter().all(|g| g.parallelism() == 1);
    let outcomes: Vec<Result<(Vec<ScoreRecord>, usize), JudgeError>> = if sequential {
        (0..judges.len()).map(run_judge).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..judges.len()).map(|j| scope.spawn(move || run_judge(j))).collect();
            handles.into_iter().map(|h| h.join().expect("judge thread panicked")).collect()
        })
    };
    let mut records = Vec::new();
    let mut missing_scores = 0;
    for outcome in outcomes {
        let (r, m) = outcome?;
        records.extend(r);
        missing_scores += m;
    }
    records.sort_by(|a, b| {
        (a.metric, &a.method, a.judge, a.round, &a.card_id).cmp(&(b.metric, &b.method, b.judge, b.round, &b.card_id))
    });

    Ok(aggregate(records, missing_scores, anonymization, judges.len()))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn aggregate(
    records: Vec<ScoreRecord>,
    missing_scores: usize,
    anonymization: BTreeMap<String, String>,
    judge_count: usize,
) -> EvaluationReport {
    let name = |label: &str| anonymization[label].clone();
    let mut pooled: BTreeMap<(String, MetricKind), Vec<f64>> = BTreeMap::new();
    let mut by_judge: BTreeMap<(usize, String, MetricKind), Vec<f64>> = BTreeMap::new();
    let mut by_item: BTreeMap<(MetricKind, usize, String, String), Vec<f64>> = BTreeMap::new();
    for r in &records {
        let method = name(&r.method);
        let s = r.score as f64;
        pooled.entry((method.clone(), r.metric)).or_default().push(s);
        by_judge.entry((r.judge, method.clone(), r.metric)).or_default().push(s);
        by_item.entry((r.metric, r.judge, method, r.card_id.clone())).or_default().push(s);
    }

    let mut mean_scores: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for ((method, metric), values) in &pooled {
        mean_scores.entry(method.clone()).or_default().insert(metric.name().to_string(), mean(values));
    }
    let mut per_judge: BTreeMap<usize, BTreeMap<String, BTreeMap<String, f64>>> = BTreeMap::new();
    for ((judge, method, metric), values) in &by_judge {
        per_judge
            .entry(*judge)
            .or_default()
            .entry(method.clone())
            .or_default()
            .insert(metric.name().to_string(), mean(values));
    }

    let mut ranks: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for metric in MetricKind::ALL {
        let column: BTreeMap<String, f64> = mean_scores
            .iter()
            .filter_map(|(m, scores)| scores.get(metric.name()).map(|s| (m.clone(), *s)))
            .collect();
        for (method, rank) in rank_methods(&column) {
            ranks.entry(method).or_default().insert(metric.name().to_string(), rank);
        }
    }
    for per_metric in ranks.values_mut() {
        let avg = average_rank(per_metric);
        per_metric.insert("average".to_string(), avg);
    }

    let mut agreement = BTreeMap::new();
    if judge_count >= 2 {
        for metric in MetricKind::ALL {
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for ((m, judge, method, card), values) in &by_item {
                if *m != metric || *judge != 0 {
                    continue;
                }
                if let Some(other) = by_item.get(&(metric, 1, method.clone(), card.clone())) {
                    xs.push(mean(values));
                    ys.push(mean(other));
                }
            }
            agreement.insert(
                metric.name().to_string(),
                JudgeAgreement {
                    pairs: xs.len(),
                    result: metrics::correlate(&xs, &ys),
                },
            );
        }
    }

    EvaluationReport {
        mean_scores,
        ranks,
        per_judge,
        agreement,
        missing_scores,
        anonymization,
        records,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scores(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    #[test]
    fn tied_means_share_rank() {
        let r = rank_methods(&scores(&[("A", 4.5), ("B", 4.2), ("C", 4.2)]));
        assert_eq!(r, scores(&[("A", 1.0), ("B", 2.5), ("C", 2.5)]));
        let r = rank_methods(&scores(&[("A", 1.0), ("B", 3.0), ("C", 2.0)]));
        assert_eq!(r, scores(&[("A", 3.0), ("B", 1.0), ("C", 2.0)]));
    }

    #[test]
    fn average_rank_column() {
        let r = scores(&[("f", 1.0), ("r", 1.0), ("a", 1.0), ("c", 1.0), ("u", 2.0)]);
        assert!((average_rank(&r) - 1.2).abs() < 1e-12);
    }

    #[test]
    fn labels() {
        assert_eq!(label(0), "A");
        assert_eq!(label(25), "Z");
        assert_eq!(label(26), "AA");
    }

    #[test]
    fn redaction() {
        let r = Redactor::new(["org/cool-model", "cool-model", "X"]);
        assert_eq!(r.apply("See Org/Cool-Model or cool-model. X stays."), "See [redacted] or [redacted]. X stays.");
    }
}
