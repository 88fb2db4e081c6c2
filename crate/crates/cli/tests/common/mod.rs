#![allow(dead_code)]

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};

use cardforge_cli::{GenerateArgs, Overrides};
use cardforge_core::pool::{save_pool, PoolEntry};
use cardforge_core::schema::{taxonomy, Card, CardKind, Confidence, Field, FieldProvenance};
use serde_json::json;

pub const CARD_ID: &str = "org/paper-model";
pub const TAGS: [&str; 3] = ["pytorch", "text-generation", "llama"];

const PAPER: &str = "\
# Abstract
We release a small instruction-tuned language model.

# Training
The model was trained on 2T tokens of filtered web text.

# Evaluation
It reaches 61.2 on MMLU and is intended for research chat assistants.
";

/// Paper (3 sections) plus a metadata page: 4 chunks in total.
pub fn write_sources(dir: &Path) -> (PathBuf, PathBuf) {
    let paper = dir.join("paper.md");
    let meta = dir.join("metadata.json");
    fs::write(&paper, PAPER).unwrap();
    fs::write(
        &meta,
        json!({
            "id": CARD_ID,
            "description": "A 7B chat model.",
            "tags": TAGS,
            "license": "apache-2.0",
            "downloads": 1200,
            "likes": 40
        })
        .to_string(),
    )
    .unwrap();
    (paper, meta)
}

fn line(pattern: &str, response: serde_json::Value) -> String {
    json!({"match": pattern, "response": response}).to_string() + "\n"
}

/// Pattern matching only the answer prompts of the field titled `title`.
pub fn answer_pattern(title_lower: &str) -> String {
    format!("\n\nQuery: What do the paper and repository state about the {title_lower} of this model")
}

/// Every field completes in round 0; fields in `missing` answer
/// `Not specified`. Pool reranks and synthesis are scripted too.
pub fn write_script(dir: &Path, missing: &[&str]) -> PathBuf {
    let mut text = String::new();
    text.push_str(&line("<|rerank|>", json!([0.9, 0.5, 0.2, 0.7])));
    text.push_str(&line(&format!("<|rerank|>\nquery: {CARD_ID}"), json!([0.3, 0.8])));
    text.push_str(&line(
        "Write the complete current answer",
        json!("Stated in the paper: trained on 2T tokens, 61.2 MMLU.\nCONFIDENCE: 0.75"),
    ));
    text.push_str(&line("Queries already asked", json!("COMPLETE")));
    text.push_str(&line("Reference values from similar cards", json!("Research chat assistants.\nCONFIDENCE: 0.5")));
    for title in missing {
        text.push_str(&line(&answer_pattern(title), json!("Not specified")));
    }
    let path = dir.join("script.jsonl");
    fs::write(&path, text).unwrap();
    path
}

pub fn pool_card(id: &str, value: &str) -> Card {
    let mut card = Card::empty(id, CardKind::Model);
    for key in taxonomy(CardKind::Model) {
        card.set_field(Field::from_text(
            key,
            &format!("{value}: {}", key.title()),
            Confidence::High,
            FieldProvenance::Imported,
        ));
    }
    card.tags = TAGS.iter().map(|t| t.to_string()).collect();
    card
}

pub fn write_pool(dir: &Path) -> PathBuf {
    let mut far = pool_card("org/far", "far");
    far.tags = ["jax".to_string(), "audio".to_string()].into();
    let entries = vec![
        PoolEntry::from_card(pool_card("org/sim-a", "alpha"), 500, 5, None).unwrap(),
        PoolEntry::from_card(pool_card("org/sim-b", "beta"), 400, 4, None).unwrap(),
        PoolEntry::from_card(far, 900, 9, None).unwrap(),
    ];
    let path = dir.join("pool.jsonl");
    save_pool(&path, &entries).unwrap();
    path
}

/// Gateway config aimed at `listener`, so any live call would connect there.
pub fn write_probe_config(dir: &Path, listener: &TcpListener) -> PathBuf {
    let addr = listener.local_addr().unwrap();
    let path = dir.join("config.json");
    fs::write(
        &path,
        json!({
            "gateway": {
                "base_url": format!("http://{addr}/v1"),
                "rerank_url": format!("http://{addr}/rerank"),
                "embed_url": format!("http://{addr}/embed"),
                "model": "probe",
                "timeout_secs": 1
            }
        })
        .to_string(),
    )
    .unwrap();
    path
}

/// Bound, non-blocking listener used to detect connection attempts.
pub fn probe_listener() -> TcpListener {
    let l = TcpListener::bind("127.0.0.1:0").unwrap();
    l.set_nonblocking(true).unwrap();
    l
}

pub fn connection_attempted(listener: &TcpListener) -> bool {
    match listener.accept() {
        Ok(_) => true,
        Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => false,
        Err(e) => panic!("probe listener failed: {e}"),
    }
}

pub fn generate_args(dir: &Path, out: &str, script: Option<PathBuf>, pool: Option<PathBuf>) -> GenerateArgs {
    GenerateArgs {
        paper: dir.join("paper.md"),
        metadata: Some(dir.join("metadata.json")),
        kind: CardKind::Model,
        id: None,
        config: None,
        overrides: Overrides::default(),
        pool,
        mock_script: script,
        out: dir.join(out),
    }
}
