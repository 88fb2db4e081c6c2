#![allow(dead_code)]

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;

use cardforge_core::gateway::{Gateway, MockBackend, ScriptEntry};
use cardforge_core::ingest::{Chunk, ChunkSource, Document};
use cardforge_core::pool::PoolEntry;
use cardforge_core::schema::{taxonomy, Card, CardKind, Confidence, Field, FieldProvenance};

pub fn doc(n: usize) -> Document {
    let chunks = (0..n)
        .map(|i| Chunk {
            id: i,
            source: ChunkSource::PaperSection,
            heading: format!("Section {i}"),
            body: format!("body of section {i}"),
        })
        .collect();
    Document::new(chunks, None)
}

pub fn mock(entries: Vec<(&str, &str)>) -> (Arc<MockBackend>, Gateway) {
    let mock = Arc::new(MockBackend::new(
        entries.into_iter().map(|(m, r)| ScriptEntry::new(m, r)).collect(),
    ));
    (mock.clone(), Gateway::mock(mock))
}

pub fn count_containing(mock: &MockBackend, needle: &str) -> usize {
    mock.captured().iter().filter(|p| p.contains(needle)).count()
}

pub const ANSWER: &str = "Write the complete current answer";
pub const ASSESS: &str = "Queries already asked";
pub const GAIN: &str = "Rate the information gain";
pub const RERANK: &str = "<|rerank|>";

pub fn tags(t: &[&str]) -> BTreeSet<String> {
    t.iter().map(|s| s.to_string()).collect()
}

pub fn filled_card(id: &str, kind: CardKind, value: &str, tag_list: &[&str]) -> Card {
    let mut card = Card::empty(id, kind);
    for key in taxonomy(kind) {
        card.set_field(Field::from_text(
            key,
            &format!("{value} ({})", key.name()),
            Confidence::High,
            FieldProvenance::Imported,
        ));
    }
    card.tags = tags(tag_list);
    card
}

pub fn pool_entry(card: Card, downloads: u64) -> PoolEntry {
    PoolEntry::from_card(card, downloads, 0, None).unwrap()
}

/// A canned response served by [`FixtureServer`].
#[derive(Clone)]
pub struct Canned {
    pub status: u16,
    pub body: String,
    pub link: Option<String>,
}

impl Canned {
    pub fn ok(body: impl Into<String>) -> Self {
        Canned {
            status: 200,
            body: body.into(),
            link: None,
        }
    }

    pub fn status(status: u16) -> Self {
        Canned {
            status,
            body: "{}".into(),
            link: None,
        }
    }
}

/// Loopback HTTP server answering by request path-and-query.
pub struct FixtureServer {
    pub base_url: String,
    pub requests: Arc<Mutex<Vec<(String, String, String)>>>,
}

impl FixtureServer {
    pub fn start(routes: Vec<(String, Canned)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base_url = format!("http://{}", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = requests.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).is_err() {
                    continue;
                }
                let mut parts = request_line.split_whitespace();
                let method = parts.next().unwrap_or("").to_string();
                let target = parts.next().unwrap_or("").to_string();
                let mut content_length = 0;
                let mut auth = String::new();
                loop {
                    let mut header = String::new();
                    if reader.read_line(&mut header).unwrap_or(0) == 0 || header == "\r\n" {
                        break;
                    }
                    let lower = header.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap_or(0);
                    }
                    if lower.starts_with("authorization:") {
                        auth = header.trim().to_string();
                    }
                }
                let mut body = vec![0u8; content_length];
                let _ = reader.read_exact(&mut body);
                log.lock()
                    .unwrap()
                    .push((format!("{method} {target}"), auth, String::from_utf8_lossy(&body).into_owned()));
                let canned = routes
                    .iter()
                    .find(|(path, _)| *path == target)
                    .map(|(_, c)| c.clone())
                    .unwrap_or(Canned::status(404));
                let mut response = format!(
                    "HTTP/1.1 {} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n",
                    canned.status,
                    canned.body.len()
                );
                if let Some(link) = &canned.link {
                    response.push_str(&format!("Link: <{link}>; rel=\"next\"\r\n"));
                }
                response.push_str("\r\n");
                response.push_str(&canned.body);
                let _ = stream.write_all(response.as_bytes());
            }
        });
        FixtureServer { base_url, requests }
    }
}
