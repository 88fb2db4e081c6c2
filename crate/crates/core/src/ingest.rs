//! Section-level chunking of paper Markdown plus a repository-metadata chunk.
//!
//! Sections start at ATX headings of level 1 or 2 outside fenced code
//! blocks. Deeper headings stay inside their parent section. Text before the
//! first heading becomes a preamble chunk with an empty heading.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sections longer than this are split at paragraph boundaries.
pub const MAX_SECTION_CHARS: usize = 16_000;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("document has no content")]
    EmptyDocument,
    #[error("metadata record has neither description nor tags")]
    EmptyMetadata,
    #[error("invalid chunk at line {line}: {reason}")]
    InvalidChunk { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChunkSource {
    PaperSection,
    RepoMetadata,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chunk {
    pub id: usize,
    pub source: ChunkSource,
    pub heading: String,
    pub body: String,
}

impl Chunk {
    /// Heading and body as one block, the form sent to the reranker.
    pub fn text(&self) -> String {
        if self.heading.is_empty() {
            self.body.clone()
        } else {
            format!("{}\n{}", self.heading, self.body)
        }
    }
}

/// Repository page metadata, as listed by the model/dataset hub.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoMetadata {
    #[serde(default)]
    pub id: String,
    #[serde(default)]
    pub description: Option<String>,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub license: Option<String>,
    #[serde(default)]
    pub downloads: u64,
    #[serde(default)]
    pub likes: u64,
}

/// Ordered chunk set for one paper and its repository page.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Document {
    chunks: Vec<Chunk>,
}

impl Document {
    /// Paper chunks followed by the optional metadata chunk; ids are
    /// renumbered densely from 0.
    pub fn new(paper: Vec<Chunk>, metadata: Option<Chunk>) -> Self {
        let chunks = paper
            .into_iter()
            .filter(|c| c.source == ChunkSource::PaperSection)
            .chain(metadata)
            .enumerate()
            .map(|(id, c)| Chunk { id, ..c })
            .collect();
        Document { chunks }
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn to_jsonl(&self) -> String {
        self.chunks
            .iter()
            .map(|c| serde_json::to_string(c).expect("chunk serializes") + "\n")
            .collect()
    }

    /// Reads chunk JSONL, checking dense ids, non-empty bodies, and at most
    /// one metadata chunk.
    pub fn from_jsonl(text: &str) -> Result<Self, IngestError> {
        let mut chunks = Vec::new();
        let mut metadata_seen = false;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let invalid = |reason: String| IngestError::InvalidChunk {
                line: lineno + 1,
                reason,
            };
            let chunk: Chunk = serde_json::from_str(line).map_err(|e| invalid(e.to_string()))?;
            if chunk.id != chunks.len() {
                return Err(invalid(format!("expected id {}, found {}", chunks.len(), chunk.id)));
            }
            if chunk.body.trim().is_empty() {
                return Err(invalid("empty body".into()));
            }
            if chunk.source == ChunkSource::RepoMetadata {
                if metadata_seen {
                    return Err(invalid("second repository-metadata chunk".into()));
                }
                metadata_seen = true;
            }
            chunks.push(chunk);
        }
        Ok(Document { chunks })
    }
}

fn fence_marker(line: &str) -> Option<(char, usize)> {
    let stripped = line.trim_start_matches(' ');
    if line.len() - stripped.len() > 3 {
        return None;
    }
    let ch = stripped.chars().next()?;
    if ch != '`' && ch != '~' {
        return None;
    }
    let run = stripped.chars().take_while(|&c| c == ch).count();
    (run >= 3).then_some((ch, run))
}

/// Heading text if `line` is a level-1 or level-2 ATX heading.
fn section_heading(line: &str) -> Option<&str> {
    let stripped = line.trim_start_matches(' ');
    if line.len() - stripped.len() > 3 {
        return None;
    }
    let level = stripped.chars().take_while(|&c| c == '#').count();
    if !(1..=2).contains(&level) {
        return None;
    }
    let rest = &stripped[level..];
    if !(rest.is_empty() || rest.starts_with(' ') || rest.starts_with('\t')) {
        return None;
    }
    let mut text = rest.trim();
    // optional closing sequence: a run of '#' preceded by a space
    let without_closing = text.trim_end_matches('#');
    if without_closing.len() != text.len()
        && (without_closing.is_empty() || without_closing.ends_with([' ', '\t']))
    {
        text = without_closing.trim_end();
    }
    Some(text)
}

struct Section {
    heading: String,
    lines: Vec<String>,
}

/// Splits Markdown into section chunks.
///
/// Sections with no body text are dropped, since a bare heading has nothing
/// to retrieve.
pub fn chunk_markdown(text: &str) -> Result<Vec<Chunk>, IngestError> {
    let mut sections = vec![Section {
        heading: String::new(),
        lines: Vec::new(),
    }];
    let mut fence: Option<(char, usize)> = None;

    for line in text.lines() {
        if let Some((ch, len)) = fence {
            if let Some((c, l)) = fence_marker(line) {
                if c == ch && l >= len && line.trim().chars().all(|x| x == ch) {
                    fence = None;
                }
            }
            sections.last_mut().unwrap().lines.push(line.to_string());
            continue;
        }
        if let Some(marker) = fence_marker(line) {
            fence = Some(marker);
            sections.last_mut().unwrap().lines.push(line.to_string());
            continue;
        }
        if let Some(heading) = section_heading(line) {
            sections.push(Section {
                heading: heading.to_string(),
                lines: Vec::new(),
            });
            continue;
        }
        sections.last_mut().unwrap().lines.push(line.to_string());
    }

    let mut chunks = Vec::new();
    for section in sections {
        for body in split_oversized(&section.lines) {
            chunks.push(Chunk {
                id: chunks.len(),
                source: ChunkSource::PaperSection,
                heading: section.heading.clone(),
                body,
            });
        }
    }
    if chunks.is_empty() {
        return Err(IngestError::EmptyDocument);
    }
    Ok(chunks)
}

fn trim_blank_lines(lines: &[String]) -> &[String] {
    let start = lines.iter().position(|l| !l.trim().is_empty());
    let end = lines.iter().rposition(|l| !l.trim().is_empty());
    match (start, end) {
        (Some(s), Some(e)) => &lines[s..=e],
        _ => &[],
    }
}

/// Joins section lines into one or more bodies of at most
/// [`MAX_SECTION_CHARS`], breaking at blank lines where possible.
fn split_oversized(lines: &[String]) -> Vec<String> {
    let lines = trim_blank_lines(lines);
    if lines.is_empty() {
        return Vec::new();
    }
    let whole = lines.join("\n");
    if whole.chars().count() <= MAX_SECTION_CHARS {
        return vec![whole];
    }

    let mut paragraphs: Vec<Vec<String>> = vec![Vec::new()];
    for line in lines {
        if line.trim().is_empty() {
            if !paragraphs.last().unwrap().is_empty() {
                paragraphs.push(Vec::new());
            }
        } else {
            paragraphs.last_mut().unwrap().push(line.clone());
        }
    }

    let mut bodies = Vec::new();
    let mut current = String::new();
    let mut current_len = 0usize;
    let mut flush = |current: &mut String, current_len: &mut usize| {
        if !current.is_empty() {
            bodies.push(std::mem::take(current));
            *current_len = 0;
        }
    };
    for para in paragraphs.into_iter().filter(|p| !p.is_empty()) {
        let text = para.join("\n");
        let len = text.chars().count();
        if len > MAX_SECTION_CHARS {
            flush(&mut current, &mut current_len);
            // a single paragraph over the limit is split between lines
            for line in para {
                let l = line.chars().count();
                if current_len > 0 && current_len + 1 + l > MAX_SECTION_CHARS {
                    flush(&mut current, &mut current_len);
                }
                if current_len > 0 {
                    current.push('\n');
                    current_len += 1;
                }
                current.push_str(&line);
                current_len += l;
            }
            flush(&mut current, &mut current_len);
            continue;
        }
        if current_len > 0 && current_len + 2 + len > MAX_SECTION_CHARS {
            flush(&mut current, &mut current_len);
        }
        if current_len > 0 {
            current.push_str("\n\n");
            current_len += 2;
        }
        current.push_str(&text);
        current_len += len;
    }
    flush(&mut current, &mut current_len);
    bodies
}

/// Renders repository metadata as labeled lines in one chunk.
pub fn metadata_chunk(metadata: &RepoMetadata) -> Result<Chunk, IngestError> {
    let description = metadata
        .description
        .as_deref()
        .map(str::trim)
        .filter(|d| !d.is_empty());
    if description.is_none() && metadata.tags.is_empty() {
        return Err(IngestError::EmptyMetadata);
    }
    let mut lines = Vec::new();
    if !metadata.id.trim().is_empty() {
        lines.push(format!("repository: {}", metadata.id.trim()));
    }
    if let Some(d) = description {
        lines.push(format!("description: {d}"));
    }
    if !metadata.tags.is_empty() {
        lines.push(format!("tags: {}", metadata.tags.join(", ")));
    }
    if let Some(license) = metadata.license.as_deref().filter(|l| !l.trim().is_empty()) {
        lines.push(format!("license: {}", license.trim()));
    }
    lines.push(format!("downloads: {}", metadata.downloads));
    lines.push(format!("likes: {}", metadata.likes));
    Ok(Chunk {
        id: 0,
        source: ChunkSource::RepoMetadata,
        heading: "Repository metadata".to_string(),
        body: lines.join("\n"),
    })
}

/// Chunks a paper and appends its metadata chunk, if any.
pub fn build_document(
    markdown: &str,
    metadata: Option<&RepoMetadata>,
) -> Result<Document, IngestError> {
    let paper = chunk_markdown(markdown)?;
    let meta = metadata.map(metadata_chunk).transpose()?;
    Ok(Document::new(paper, meta))
}
