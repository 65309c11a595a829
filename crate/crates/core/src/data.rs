//! Chunked long contexts, grounded QA examples and the tagged rollout format.
//!
//! Prompts wrap every chunk as `<CHUNK_i>…</CHUNK_i>` inside `<long_context>`, and the
//! model is asked to answer with `<think>`, `<useful_chunks>` and `<answer>` sections.
//! Chunk ids are 1-based everywhere.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// 1-based chunk identifier, rendered as `<CHUNK_k>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct ChunkId(u32);

impl ChunkId {
    pub fn new(index: u32) -> Result<Self> {
        if index == 0 {
            return invalid("chunk ids are 1-based");
        }
        Ok(Self(index))
    }

    /// Id of the chunk at zero-based position `pos`.
    pub fn from_position(pos: usize) -> Self {
        Self(pos as u32 + 1)
    }

    pub fn get(self) -> u32 {
        self.0
    }

    /// Zero-based position of this chunk.
    pub fn position(self) -> usize {
        self.0 as usize - 1
    }
}

impl TryFrom<u32> for ChunkId {
    type Error = Error;
    fn try_from(v: u32) -> Result<Self> {
        ChunkId::new(v)
    }
}

impl From<ChunkId> for u32 {
    fn from(id: ChunkId) -> u32 {
        id.0
    }
}

impl fmt::Display for ChunkId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<CHUNK_{}>", self.0)
    }
}

/// Builds an id set from raw indices, rejecting zero.
pub fn chunk_set<I: IntoIterator<Item = u32>>(ids: I) -> Result<BTreeSet<ChunkId>> {
    ids.into_iter().map(ChunkId::new).collect()
}

/// A long context split into chunks `1..=N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkedDocument {
    doc_id: String,
    chunks: Vec<String>,
}

impl ChunkedDocument {
    pub fn new(doc_id: impl Into<String>, chunks: Vec<String>) -> Result<Self> {
        if chunks.is_empty() {
            return invalid("a document needs at least one chunk");
        }
        if let Some(i) = chunks.iter().position(|c| c.is_empty()) {
            return invalid(format!("chunk {} is empty", i + 1));
        }
        Ok(Self { doc_id: doc_id.into(), chunks })
    }

    pub fn doc_id(&self) -> &str {
        &self.doc_id
    }

    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    pub fn chunk(&self, id: ChunkId) -> Option<&str> {
        self.chunks.get(id.position()).map(String::as_str)
    }

    pub fn chunks(&self) -> impl Iterator<Item = (ChunkId, &str)> {
        self.chunks.iter().enumerate().map(|(i, c)| (ChunkId::from_position(i), c.as_str()))
    }

    pub fn texts(&self) -> &[String] {
        &self.chunks
    }

    pub fn contains(&self, id: ChunkId) -> bool {
        id.position() < self.chunks.len()
    }

    pub fn full_text(&self) -> String {
        self.chunks.concat()
    }
}

/// A question over a chunked document with its gold answer and gold evidence set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundedExample {
    pub document: ChunkedDocument,
    pub question: String,
    pub gold_answer: String,
    pub gold_evidence: BTreeSet<ChunkId>,
    pub quality_score: Option<u8>,
}

impl GroundedExample {
    pub fn new(
        document: ChunkedDocument,
        question: impl Into<String>,
        gold_answer: impl Into<String>,
        gold_evidence: BTreeSet<ChunkId>,
        quality_score: Option<u8>,
    ) -> Result<Self> {
        let ex = Self {
            document,
            question: question.into(),
            gold_answer: gold_answer.into(),
            gold_evidence,
            quality_score,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn validate(&self) -> Result<()> {
        if self.gold_evidence.is_empty() {
            return invalid("gold evidence must be non-empty");
        }
        if let Some(id) = self.gold_evidence.iter().find(|id| !self.document.contains(**id)) {
            return invalid(format!(
                "gold evidence {id} outside document of {} chunks",
                self.document.len()
            ));
        }
        if let Some(q) = self.quality_score {
            if !(1..=10).contains(&q) {
                return invalid(format!("quality score {q} outside 1..=10"));
            }
        }
        Ok(())
    }
}

/// A parsed model output.
///
/// `selected` may reference ids beyond the document; the reward stack counts those as
/// false positives.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Rollout {
    pub think: String,
    pub selected: BTreeSet<ChunkId>,
    pub answer: String,
    pub well_formed: bool,
}

/// Splits text after sentence terminators (`.`, `!`, `?` followed by whitespace or end
/// of text) and after newlines. Whitespace-only pieces are folded into their neighbour,
/// so every returned sentence contains a non-whitespace character unless the whole text
/// is whitespace.
pub fn split_sentences(text: &str) -> Vec<&str> {
    let mut cuts = Vec::new();
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let end = i + c.len_utf8();
        let cut = match c {
            '\n' => true,
            '.' | '!' | '?' => chars.peek().is_none_or(|&(_, n)| n.is_whitespace()),
            _ => false,
        };
        if cut && end < text.len() {
            cuts.push(end);
        }
    }
    let mut pieces: Vec<&str> = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0;
    for &cut in cuts.iter().chain(std::iter::once(&text.len())) {
        let piece = &text[start..cut];
        start = cut;
        if piece.is_empty() {
            continue;
        }
        match pieces.last_mut() {
            // fold whitespace-only pieces backwards
            Some(prev) if piece.trim().is_empty() => {
                let s = prev.as_ptr() as usize - text.as_ptr() as usize;
                *prev = &text[s..cut];
            }
            _ => pieces.push(piece),
        }
    }
    // a leading whitespace-only piece merges forward
    if pieces.len() > 1 && pieces[0].trim().is_empty() {
        let end = pieces[0].len() + pieces[1].len();
        pieces[1] = &text[..end];
        pieces.remove(0);
    }
    pieces
}

/// Segments `text` into `min(target_count, sentence_count)` contiguous chunks.
///
/// Each chunk takes sentences greedily while doing so moves its length closer to the
/// remaining text divided evenly over the remaining chunks, always leaving at least one
/// sentence for each chunk still to be filled.
pub fn segment_document(
    doc_id: impl Into<String>,
    text: &str,
    target_count: usize,
) -> Result<ChunkedDocument> {
    if text.is_empty() {
        return invalid("cannot segment empty text");
    }
    if target_count == 0 {
        return invalid("target chunk count must be at least 1");
    }
    let sentences = split_sentences(text);
    let k = target_count.min(sentences.len());
    let mut chunks = Vec::with_capacity(k);
    let mut remaining_len: usize = text.len();
    let mut idx = 0;
    for c in 0..k {
        let chunks_left = k - c;
        let target = remaining_len as f64 / chunks_left as f64;
        let mut len = sentences[idx].len();
        let start = idx;
        idx += 1;
        // leave one sentence per remaining chunk
        let limit = sentences.len() - (chunks_left - 1);
        if chunks_left == 1 {
            idx = sentences.len();
            len = sentences[start..].iter().map(|s| s.len()).sum();
        } else {
            while idx < limit {
                let next = len + sentences[idx].len();
                if (next as f64 - target).abs() < (len as f64 - target).abs() {
                    len = next;
                    idx += 1;
                } else {
                    break;
                }
            }
        }
        remaining_len -= len;
        chunks.push(sentences[start..idx].concat());
    }
    ChunkedDocument::new(doc_id, chunks)
}

const FORMAT_INSTRUCTION: &str = "First reason inside <think> </think>. Then list the identifiers of the chunks needed to answer inside <useful_chunks> </useful_chunks>, written as <CHUNK_k> and separated by commas. Finally give the answer inside <answer> </answer>.";

/// Renders the training prompt for a document and question.
pub fn render_prompt(doc: &ChunkedDocument, question: &str) -> Result<String> {
    if question.trim().is_empty() {
        return invalid("question must be non-empty");
    }
    let mut out = String::from("<long_context>\n");
    for (id, text) in doc.chunks() {
        let k = id.get();
        out.push_str(&format!("<CHUNK_{k}>{text}</CHUNK_{k}>\n"));
    }
    out.push_str("</long_context>\n\nQuestion: ");
    out.push_str(question);
    out.push_str("\n\n");
    out.push_str(FORMAT_INSTRUCTION);
    out.push('\n');
    Ok(out)
}

/// Renders a rollout in the output format, the inverse of [`parse_rollout`].
pub fn render_rollout(think: &str, selected: &BTreeSet<ChunkId>, answer: &str) -> String {
    let ids: Vec<String> = selected.iter().map(|id| id.to_string()).collect();
    format!(
        "<think>{think}</think>\n\n<useful_chunks> {} </useful_chunks>\n\n<answer>{answer}</answer>",
        ids.join(", ")
    )
}

fn block_re(tag: &str) -> Regex {
    Regex::new(&format!(r"(?s)<{tag}>(.*?)</{tag}>")).expect("static regex")
}

fn regexes() -> &'static (Regex, Regex, Regex, Regex) {
    static RE: OnceLock<(Regex, Regex, Regex, Regex)> = OnceLock::new();
    RE.get_or_init(|| {
        (
            block_re("think"),
            block_re("useful_chunks"),
            block_re("answer"),
            Regex::new(r"^<CHUNK_([0-9]+)>$").expect("static regex"),
        )
    })
}

/// Parses a raw model output. Never fails: anything malformed yields an empty rollout
/// with `well_formed == false`.
pub fn parse_rollout(text: &str) -> Rollout {
    let (think_re, chunks_re, answer_re, id_re) = regexes();
    let (Some(chunks), Some(answer)) = (chunks_re.captures(text), answer_re.captures(text))
    else {
        return Rollout::default();
    };
    let mut selected = BTreeSet::new();
    for token in chunks[1].split(|c: char| c == ',' || c.is_whitespace()).filter(|t| !t.is_empty()) {
        let id = id_re
            .captures(token)
            .and_then(|c| c[1].parse::<u32>().ok())
            .and_then(|k| ChunkId::new(k).ok());
        match id {
            Some(id) => {
                selected.insert(id);
            }
            None => return Rollout::default(),
        }
    }
    let think = think_re.captures(text).map(|c| c[1].trim().to_string()).unwrap_or_default();
    Rollout { think, selected, answer: answer[1].trim().to_string(), well_formed: true }
}

/// One line of a dataset file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetRecord {
    doc_id: String,
    chunks: Vec<String>,
    question: String,
    answer: String,
    evidence: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quality: Option<u8>,
}

impl From<&GroundedExample> for DatasetRecord {
    fn from(ex: &GroundedExample) -> Self {
        Self {
            doc_id: ex.document.doc_id().to_string(),
            chunks: ex.document.texts().to_vec(),
            question: ex.question.clone(),
            answer: ex.gold_answer.clone(),
            evidence: ex.gold_evidence.iter().map(|id| id.get()).collect(),
            quality: ex.quality_score,
        }
    }
}

impl TryFrom<DatasetRecord> for GroundedExample {
    type Error = Error;
    fn try_from(r: DatasetRecord) -> Result<Self> {
        let document = ChunkedDocument::new(r.doc_id, r.chunks)?;
        GroundedExample::new(document, r.question, r.answer, chunk_set(r.evidence)?, r.quality)
    }
}

/// Serialises one example as a single JSON line (no trailing newline).
pub fn example_to_line(ex: &GroundedExample) -> String {
    serde_json::to_string(&DatasetRecord::from(ex)).expect("dataset record serialises")
}

/// Parses one dataset line; `line_no` is used in the error.
pub fn example_from_line(line: &str, line_no: usize) -> Result<GroundedExample> {
    let rec: DatasetRecord = serde_json::from_str(line)
        .map_err(|e| Error::Parse { line: line_no, message: e.to_string() })?;
    GroundedExample::try_from(rec).map_err(|e| Error::Parse { line: line_no, message: e.to_string() })
}

/// Writes examples as line-delimited JSON with fields
/// `doc_id, chunks, question, answer, evidence, quality`.
pub fn save_dataset(examples: &[GroundedExample], path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in examples {
        writeln!(w, "{}", example_to_line(ex))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_dataset`]. Blank lines are skipped.
pub fn load_dataset(path: &Path) -> Result<Vec<GroundedExample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(example_from_line(&line, i + 1)?);
    }
    Ok(out)
}
