//! Generation/judging providers and the offline scripted provider.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ChunkId, ChunkedDocument};
use crate::error::{invalid, Error, Result};

/// A generated question with its answer and cluster-local evidence ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub question: String,
    pub answer: String,
    pub evidence: BTreeSet<ChunkId>,
    #[serde(default)]
    pub score: Option<u8>,
}

/// One semantic cluster shown to the generator. Chunks are relabelled `1..=m` in
/// document order.
#[derive(Debug, Clone)]
pub struct ClusterRequest<'a> {
    pub doc_id: &'a str,
    pub cluster_index: usize,
    pub chunks: Vec<&'a str>,
}

impl ClusterRequest<'_> {
    /// Chunks wrapped in local `<CHUNK_k>` tags.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, text) in self.chunks.iter().enumerate() {
            s.push_str(&format!("<CHUNK_{}>{}</CHUNK_{}>\n", k + 1, text, k + 1));
        }
        s
    }
}

pub trait GenerationProvider: Sync {
    /// Exactly `k` candidates grounded in the cluster.
    fn generate_candidates(&self, cluster: &ClusterRequest<'_>, k: usize) -> Result<Vec<Candidate>>;

    /// Quality score in `1..=10`.
    fn judge_quality(&self, cluster: &ClusterRequest<'_>, index: usize, candidate: &Candidate) -> Result<u8>;

    /// How easily the question is answered from the whole document, in `1..=10`.
    fn judge_easiness(&self, doc: &ChunkedDocument, candidate: &Candidate) -> Result<u8>;
}

pub(crate) fn check_score(score: u8) -> Result<u8> {
    if (1..=10).contains(&score) {
        Ok(score)
    } else {
        Err(Error::Provider(format!("score {score} outside 1..=10")))
    }
}

/// Scores the scripted provider assigns to one document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedScores {
    /// Score of the first candidate in every cluster; later candidates score one less each.
    pub quality: u8,
    pub easiness: u8,
}

/// Deterministic provider for tests and dry runs. Candidates are templated from cluster
/// text; scores come from a per-document script.
#[derive(Debug, Clone)]
pub struct ScriptedGenerator {
    scripts: HashMap<String, ScriptedScores>,
    fallback: ScriptedScores,
    fail_docs: BTreeSet<String>,
}

impl Default for ScriptedGenerator {
    fn default() -> Self {
        Self { scripts: HashMap::new(), fallback: ScriptedScores { quality: 9, easiness: 3 }, fail_docs: BTreeSet::new() }
    }
}

impl ScriptedGenerator {
    pub fn new(scripts: HashMap<String, ScriptedScores>) -> Result<Self> {
        for (doc, s) in &scripts {
            if check_score(s.quality).is_err() || check_score(s.easiness).is_err() {
                return invalid(format!("scripted scores for {doc} must lie in 1..=10"));
            }
        }
        Ok(Self { scripts, ..Self::default() })
    }

    /// Loads a JSON object mapping doc ids to `{"quality": q, "easiness": e}`.
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(serde_json::from_str(&text)?)
    }

    /// Every provider call for `doc_id` fails, to exercise retry and skip handling.
    pub fn failing_for(mut self, doc_id: &str) -> Self {
        self.fail_docs.insert(doc_id.to_string());
        self
    }

    fn script(&self, doc_id: &str) -> Result<ScriptedScores> {
        if self.fail_docs.contains(doc_id) {
            return Err(Error::Provider(format!("scripted failure for {doc_id}")));
        }
        Ok(self.scripts.get(doc_id).copied().unwrap_or(self.fallback))
    }
}

fn head_words(text: &str, n: usize) -> String {
    text.split_whitespace().take(n).collect::<Vec<_>>().join(" ")
}

fn last_word(text: &str) -> String {
    text.split_whitespace()
        .last()
        .unwrap_or("")
        .trim_matches(|c: char| !c.is_alphanumeric())
        .to_string()
}

impl GenerationProvider for ScriptedGenerator {
    fn generate_candidates(&self, cluster: &ClusterRequest<'_>, k: usize) -> Result<Vec<Candidate>> {
        self.script(cluster.doc_id)?;
        let m = cluster.chunks.len();
        if m == 0 {
            return invalid("empty cluster");
        }
        Ok((0..k)
            .map(|c| {
                let a = c % m;
                let b = (c + 1) % m;
                let evidence = [a, b].into_iter().map(ChunkId::from_position).collect();
                Candidate {
                    question: format!(
                        "Which detail connects \"{}\" with \"{}\"?",
                        head_words(cluster.chunks[a], 5),
                        head_words(cluster.chunks[b], 5)
                    ),
                    answer: last_word(cluster.chunks[b]),
                    evidence,
                    score: None,
                }
            })
            .collect())
    }

    fn judge_quality(&self, cluster: &ClusterRequest<'_>, index: usize, _candidate: &Candidate) -> Result<u8> {
        let s = self.script(cluster.doc_id)?;
        Ok(s.quality.saturating_sub(index as u8).max(1))
    }

    fn judge_easiness(&self, doc: &ChunkedDocument, _candidate: &Candidate) -> Result<u8> {
        Ok(self.script(doc.doc_id())?.easiness)
    }
}

/// Prompt templates for real providers. `{cluster}`, `{k}`, `{question}`, `{answer}`,
/// `{evidence}` and `{context}` are substituted.
pub mod prompts {
    pub const GENERATE: &str = include_str!("prompts/generate.txt");
    pub const JUDGE_QUALITY: &str = include_str!("prompts/judge_quality.txt");
    pub const JUDGE_EASINESS: &str = include_str!("prompts/judge_easiness.txt");
}

/// First integer in `1..=10` found in a judge reply.
pub fn parse_score(reply: &str) -> Result<u8> {
    reply
        .split(|c: char| !c.is_ascii_digit())
        .filter(|t| !t.is_empty())
        .filter_map(|t| t.parse::<u8>().ok())
        .find(|s| (1..=10).contains(s))
        .ok_or_else(|| Error::Provider(format!("no score in reply {reply:?}")))
}

#[derive(Deserialize)]
struct RawCandidate {
    question: String,
    answer: String,
    evidence: Vec<u32>,
}

/// Parses a JSON array of `{question, answer, evidence}` objects, tolerating text around
/// the array.
pub fn parse_candidates(reply: &str) -> Result<Vec<Candidate>> {
    let start = reply.find('[').ok_or_else(|| Error::Provider("no JSON array in reply".into()))?;
    let end = reply.rfind(']').ok_or_else(|| Error::Provider("no JSON array in reply".into()))?;
    if end < start {
        return Err(Error::Provider("no JSON array in reply".into()));
    }
    let raw: Vec<RawCandidate> =
        serde_json::from_str(&reply[start..=end]).map_err(|e| Error::Provider(format!("bad candidate JSON: {e}")))?;
    raw.into_iter()
        .map(|r| {
            let evidence = crate::data::chunk_set(r.evidence).map_err(|e| Error::Provider(e.to_string()))?;
            Ok(Candidate { question: r.question, answer: r.answer, evidence, score: None })
        })
        .collect()
}
