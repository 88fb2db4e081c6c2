//! Subcommand implementations. Each returns a serializable summary; file
//! outputs are written only after every input has been read.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use cardforge_core::enrich::{incomplete_fields, run_icc_mp, EnrichError};
use cardforge_core::extract::{run_ipe_qe, ExtractionError};
use cardforge_core::gateway::{Gateway, GatewayError};
use cardforge_core::ingest::{build_document, Document, RepoMetadata};
use cardforge_core::judge::{evaluate, EvaluationReport, JudgeError};
use cardforge_core::metrics::{wcci, WcciScore};
use cardforge_core::pool::{
    build_pool, fetch_hub_records, filter_paper_linked, load_pool, pool_stats, save_pool, structure_card, HubQuery,
    LiveTransport, PoolEntry, PoolError, PoolStats, RecordingTransport, ReplayTransport, Transport,
};
use cardforge_core::schema::{parse_card, serialize_card_pretty, validate_card, Card, CardKind};
use cardforge_core::trace::{enrichment_trace_jsonl, extraction_trace_jsonl, trace_stats, TraceStats};
use serde::{Deserialize, Serialize};

use crate::config::{build_gateway, Overrides, PipelineConfig};
use crate::{CliError, Status};

pub const CARD_FILE: &str = "card.json";
pub const EXTRACTION_TRACE_FILE: &str = "extraction_trace.jsonl";
pub const ENRICHMENT_TRACE_FILE: &str = "enrichment_trace.jsonl";
pub const CALL_LOG_FILE: &str = "calls.jsonl";

fn read(path: &Path, what: &str) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::input(format!("cannot read {what} {}: {e}", path.display())))
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn read_metadata(path: Option<&Path>) -> Result<Option<RepoMetadata>, CliError> {
    path.map(|p| {
        serde_json::from_str(&read(p, "metadata")?)
            .map_err(|e| CliError::input(format!("metadata {}: {e}", p.display())))
    })
    .transpose()
}

fn read_card(path: &Path) -> Result<Card, CliError> {
    parse_card(&read(path, "card")?).map_err(|e| CliError::input(format!("card {}: {e}", path.display())))
}

fn read_pool(path: &Path) -> Result<Vec<PoolEntry>, CliError> {
    load_pool(path).map_err(|e| CliError::input(format!("pool {}: {e}", path.display())))
}

fn gateway_error(e: GatewayError) -> CliError {
    match e {
        GatewayError::Config(_) => CliError::config(e.to_string()),
        other => CliError::abort(other.to_string()),
    }
}

fn extraction_error(e: ExtractionError) -> CliError {
    match e {
        ExtractionError::InvalidConfig(_) => CliError::config(e.to_string()),
        ExtractionError::EmptyDocument => CliError::input(e.to_string()),
        ExtractionError::Gateway(g) => gateway_error(g),
        other => CliError::abort(other.to_string()),
    }
}

fn enrich_error(e: EnrichError) -> CliError {
    match e {
        EnrichError::InvalidConfig(_) => CliError::config(e.to_string()),
        EnrichError::Gateway(g) => gateway_error(g),
        other => CliError::input(other.to_string()),
    }
}

fn pool_error(e: PoolError) -> CliError {
    match e {
        PoolError::InvalidPercentile(_) => CliError::config(e.to_string()),
        PoolError::Gateway(g) => gateway_error(g),
        other => CliError::input(other.to_string()),
    }
}

fn ensure_valid(card: &Card) -> Result<(), CliError> {
    let report = validate_card(card);
    if report.is_ok() {
        Ok(())
    } else {
        Err(CliError::abort(format!("produced an invalid card: {:?}", report.violations)))
    }
}

fn card_json(card: &Card) -> String {
    serialize_card_pretty(card) + "\n"
}

// ---------------------------------------------------------------------------
// ingest

pub fn cmd_ingest(paper: &Path, metadata: Option<&Path>) -> Result<Document, CliError> {
    let markdown = read(paper, "paper")?;
    let meta = read_metadata(metadata)?;
    build_document(&markdown, meta.as_ref()).map_err(|e| CliError::input(format!("{}: {e}", paper.display())))
}

// ---------------------------------------------------------------------------
// generate

#[derive(Debug, Clone)]
pub struct GenerateArgs {
    pub paper: PathBuf,
    pub metadata: Option<PathBuf>,
    pub kind: CardKind,
    /// Defaults to the metadata id, then the paper file stem.
    pub id: Option<String>,
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
    pub pool: Option<PathBuf>,
    pub mock_script: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerateSummary {
    pub card: String,
    pub wcci: f64,
    pub missing_after_extraction: usize,
    pub missing_after_enrichment: usize,
    pub enrichment_ran: bool,
    pub failed_fields: Vec<String>,
    pub gateway_calls: usize,
    pub outputs: Vec<PathBuf>,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<(GenerateSummary, Status), CliError> {
    let markdown = read(&args.paper, "paper")?;
    let meta = read_metadata(args.metadata.as_deref())?;
    let config = PipelineConfig::load(args.config.as_deref())?.apply(&args.overrides);
    let pool = args.pool.as_deref().map(read_pool).transpose()?;
    let gateway = build_gateway(&config.gateway, args.mock_script.as_deref())?;

    let doc = build_document(&markdown, meta.as_ref())
        .map_err(|e| CliError::input(format!("{}: {e}", args.paper.display())))?;
    let id = args
        .id
        .clone()
        .or_else(|| meta.as_ref().map(|m| m.id.clone()).filter(|i| !i.trim().is_empty()))
        .or_else(|| args.paper.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .ok_or_else(|| CliError::input("cannot derive a card id; pass --id"))?;

    let run = run_ipe_qe(&doc, &id, args.kind, &config.extraction, &gateway).map_err(extraction_error)?;
    let mut failed: Vec<String> = run.failed_fields().into_iter().map(str::to_string).collect();
    let mut card = run.card.clone();
    if let Some(m) = &meta {
        card.tags = m.tags.iter().map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect();
    }
    let missing_after_extraction = incomplete_fields(&card).len();

    let mut enrichment = None;
    if let Some(pool) = &pool {
        if missing_after_extraction > 0 {
            let er = run_icc_mp(&card, pool, &config.enrichment, &gateway).map_err(enrich_error)?;
            failed.extend(er.failed_fields().into_iter().map(str::to_string));
            card = er.card.clone();
            enrichment = Some(er);
        }
    }
    ensure_valid(&card)?;
    let score = wcci(&card).map_err(|e| CliError::abort(e.to_string()))?;

    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", args.out.display())))?;
    let mut outputs = vec![args.out.join(CARD_FILE), args.out.join(EXTRACTION_TRACE_FILE)];
    write(&outputs[0], &card_json(&card))?;
    write(&outputs[1], &extraction_trace_jsonl(&id, &run.sessions))?;
    let enrichment_path = args.out.join(ENRICHMENT_TRACE_FILE);
    match &enrichment {
        Some(er) => {
            write(&enrichment_path, &enrichment_trace_jsonl(&er.events))?;
            outputs.push(enrichment_path);
        }
        // A trace left by an earlier run in the same directory would be stale.
        None => {
            if enrichment_path.exists() {
                fs::remove_file(&enrichment_path)
                    .map_err(|e| CliError::input(format!("cannot remove {}: {e}", enrichment_path.display())))?;
            }
        }
    }
    let calls_path = args.out.join(CALL_LOG_FILE);
    write(&calls_path, &gateway.call_log_jsonl())?;
    outputs.push(calls_path);

    let status = if failed.is_empty() { Status::Ok } else { Status::Partial };
    Ok((
        GenerateSummary {
            card: id,
            wcci: score.value,
            missing_after_extraction,
            missing_after_enrichment: incomplete_fields(&card).len(),
            enrichment_ran: enrichment.is_some(),
            failed_fields: failed,
            gateway_calls: gateway.call_log().len(),
            outputs,
        },
        status,
    ))
}

// ---------------------------------------------------------------------------
// enrich

#[derive(Debug, Clone)]
pub struct EnrichArgs {
    pub card: PathBuf,
    pub pool: PathBuf,
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
    pub mock_script: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct EnrichSummary {
    pub card: String,
    pub wcci_before: f64,
    pub wcci_after: f64,
    pub events: usize,
    pub failed_fields: Vec<String>,
}

pub fn cmd_enrich(args: &EnrichArgs) -> Result<(EnrichSummary, Status), CliError> {
    let card = read_card(&args.card)?;
    let pool = read_pool(&args.pool)?;
    let config = PipelineConfig::load(args.config.as_deref())?.apply(&args.overrides);
    let gateway = build_gateway(&config.gateway, args.mock_script.as_deref())?;
    let before = wcci(&card).map_err(|e| CliError::input(e.to_string()))?.value;

    let run = run_icc_mp(&card, &pool, &config.enrichment, &gateway).map_err(enrich_error)?;
    ensure_valid(&run.card)?;
    let after = wcci(&run.card).map_err(|e| CliError::abort(e.to_string()))?.value;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::input(format!("cannot create {}: {e}", args.out.display())))?;
    write(&args.out.join(CARD_FILE), &card_json(&run.card))?;
    write(&args.out.join(ENRICHMENT_TRACE_FILE), &enrichment_trace_jsonl(&run.events))?;
    write(&args.out.join(CALL_LOG_FILE), &gateway.call_log_jsonl())?;

    let failed: Vec<String> = run.failed_fields().into_iter().map(str::to_string).collect();
    let status = if failed.is_empty() { Status::Ok } else { Status::Partial };
    Ok((
        EnrichSummary {
            card: run.card.id.clone(),
            wcci_before: before,
            wcci_after: after,
            events: run.events.len(),
            failed_fields: failed,
        },
        status,
    ))
}

// ---------------------------------------------------------------------------
// wcci

#[derive(Debug, Clone, Serialize)]
pub struct CardScore {
    pub card: String,
    pub kind: CardKind,
    #[serde(flatten)]
    pub score: WcciScore,
}

pub fn cmd_wcci(cards: &[PathBuf]) -> Result<Vec<CardScore>, CliError> {
    cards
        .iter()
        .map(|p| {
            let card = read_card(p)?;
            let score = wcci(&card).map_err(|e| CliError::input(format!("{}: {e}", p.display())))?;
            Ok(CardScore {
                card: card.id,
                kind: card.kind,
                score,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// pool

#[derive(Debug, Clone, Serialize)]
pub struct PoolBuildSummary {
    pub candidates: usize,
    pub retained: usize,
    pub percentile: f64,
    pub min_downloads: u64,
}

pub fn cmd_pool_build(
    inputs: &[PathBuf],
    out: &Path,
    config: Option<&Path>,
    percentile: Option<f64>,
    min_downloads: Option<u64>,
) -> Result<PoolBuildSummary, CliError> {
    let mut pool_config = PipelineConfig::load(config)?.pool;
    if percentile.is_some() {
        pool_config.wcci_percentile = percentile;
    }
    if let Some(m) = min_downloads {
        pool_config.min_downloads = m;
    }
    let mut candidates = Vec::new();
    for p in inputs {
        candidates.extend(read_pool(p)?);
    }
    let pool = build_pool(&candidates, &pool_config).map_err(pool_error)?;
    save_pool(out, &pool).map_err(|e| CliError::input(format!("cannot write {}: {e}", out.display())))?;
    Ok(PoolBuildSummary {
        candidates: candidates.len(),
        retained: pool.len(),
        percentile: pool_config.percentile(pool[0].card.kind),
        min_downloads: pool_config.min_downloads,
    })
}

pub fn cmd_pool_stats(pool: &Path, top_tags: usize) -> Result<PoolStats, CliError> {
    pool_stats(&read_pool(pool)?, top_tags).map_err(pool_error)
}

#[derive(Debug, Clone)]
pub struct FetchArgs {
    pub kind: CardKind,
    pub hub_url: String,
    pub filters: Vec<String>,
    pub pages: usize,
    pub page_size: usize,
    pub record_dir: Option<PathBuf>,
    pub replay_dir: Option<PathBuf>,
    pub config: Option<PathBuf>,
    pub mock_script: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize)]
pub struct FetchSummary {
    pub listed: usize,
    pub paper_linked: usize,
    pub structured: usize,
    pub repaired: usize,
    pub failed: Vec<String>,
}

/// Lists hub records, keeps paper-linked ones, and structures each into a
/// pool candidate. Candidates are unfiltered; `pool build` selects.
pub fn cmd_pool_fetch(args: &FetchArgs) -> Result<(FetchSummary, Status), CliError> {
    let config = PipelineConfig::load(args.config.as_deref())?;
    let gateway = build_gateway(&config.gateway, args.mock_script.as_deref())?;
    let query = HubQuery {
        kind: args.kind,
        filters: args.filters.clone(),
        page_budget: args.pages,
        page_size: args.page_size,
    };
    let timeout = Duration::from_secs(config.gateway.timeout_secs.max(1));
    let transport: Box<dyn Transport> = match (&args.replay_dir, &args.record_dir) {
        (Some(_), Some(_)) => return Err(CliError::usage("--replay and --record are exclusive")),
        (Some(dir), None) => Box::new(ReplayTransport::new(dir)),
        (None, Some(dir)) => Box::new(
            RecordingTransport::new(LiveTransport::new(&args.hub_url, timeout), dir).map_err(pool_error)?,
        ),
        (None, None) => Box::new(LiveTransport::new(&args.hub_url, timeout)),
    };
    let records = fetch_hub_records(transport.as_ref(), &args.hub_url, &query).map_err(pool_error)?;
    let listed = records.len();
    let linked = filter_paper_linked(records);
    let paper_linked = linked.len();

    let mut entries = Vec::new();
    let mut failed = Vec::new();
    let mut repaired = 0;
    for record in &linked {
        match structure_card(record, args.kind, &gateway) {
            Ok(s) => {
                repaired += usize::from(s.repaired);
                let entry = PoolEntry::from_card(s.card, record.downloads, record.likes, record.source_ref.clone())
                    .map_err(|e| CliError::abort(e.to_string()))?;
                entries.push(entry);
            }
            Err(PoolError::Gateway(g)) if g.is_fatal() => return Err(gateway_error(g)),
            Err(e) => {
                log::warn!("skipping {}: {e}", record.id);
                failed.push(record.id.clone());
            }
        }
    }
    save_pool(&args.out, &entries).map_err(|e| CliError::input(format!("cannot write {}: {e}", args.out.display())))?;
    let status = if failed.is_empty() { Status::Ok } else { Status::Partial };
    Ok((
        FetchSummary {
            listed,
            paper_linked,
            structured: entries.len(),
            repaired,
            failed,
        },
        status,
    ))
}

// ---------------------------------------------------------------------------
// evaluate

/// Source location of one card, relative to the manifest file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub paper: PathBuf,
    #[serde(default)]
    pub metadata: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    /// (method name, directory of card JSON files).
    pub methods: Vec<(String, PathBuf)>,
    /// JSON object mapping card id to its [`SourceSpec`].
    pub sources: PathBuf,
    pub judge_configs: Vec<PathBuf>,
    pub judge_scripts: Vec<PathBuf>,
    pub config: Option<PathBuf>,
    pub overrides: Overrides,
    pub seed: Option<u64>,
}

fn read_method_cards(dir: &Path) -> Result<Vec<Card>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::input(format!("cannot list {}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::input(format!("no card files in {}", dir.display())));
    }
    paths.iter().map(|p| read_card(p)).collect()
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<(EvaluationReport, Status), CliError> {
    let mut config = PipelineConfig::load(args.config.as_deref())?.apply(&args.overrides);
    if let Some(seed) = args.seed {
        config.judge.seed = seed;
    }
    let mut methods = BTreeMap::new();
    for (name, dir) in &args.methods {
        if methods.insert(name.clone(), read_method_cards(dir)?).is_some() {
            return Err(CliError::usage(format!("method `{name}` given twice")));
        }
    }
    let manifest: BTreeMap<String, SourceSpec> = serde_json::from_str(&read(&args.sources, "source manifest")?)
        .map_err(|e| CliError::input(format!("source manifest {}: {e}", args.sources.display())))?;
    let base = args.sources.parent().unwrap_or(Path::new("."));
    let mut sources = BTreeMap::new();
    for (id, spec) in manifest {
        let metadata = spec.metadata.as_ref().map(|m| base.join(m));
        let doc = cmd_ingest(&base.join(&spec.paper), metadata.as_deref())?;
        sources.insert(id, doc);
    }

    let mut judges: Vec<Gateway> = Vec::new();
    for path in &args.judge_configs {
        judges.push(build_gateway(&PipelineConfig::load(Some(path))?.gateway, None)?);
    }
    for path in &args.judge_scripts {
        judges.push(build_gateway(&config.gateway, Some(path))?);
    }
    if judges.is_empty() {
        return Err(CliError::usage("at least one --judge-config or --judge-script is required"));
    }

    let report = evaluate(&methods, &sources, &judges, &config.judge).map_err(|e| match e {
        JudgeError::Gateway(g) => gateway_error(g),
        JudgeError::InvalidSetup(_) => CliError::config(e.to_string()),
        other => CliError::input(other.to_string()),
    })?;
    let status = if report.missing_scores > 0 { Status::Partial } else { Status::Ok };
    Ok((report, status))
}

// ---------------------------------------------------------------------------
// trace-stats

pub fn cmd_trace_stats(traces: &[PathBuf]) -> Result<TraceStats, CliError> {
    if traces.is_empty() {
        return Err(CliError::usage("at least one trace file is required"));
    }
    let mut inputs = Vec::new();
    for p in traces {
        inputs.push((p.display().to_string(), read(p, "trace")?));
    }
    trace_stats(inputs.iter().map(|(n, t)| (n.as_str(), t.as_str()))).map_err(|e| CliError::input(e.to_string()))
}
