//! The end-to-end generation pipeline.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::cluster::cluster_chunks;
use super::embed::{l2_normalize, EmbeddingProvider};
use super::provider::{check_score, Candidate, ClusterRequest, GenerationProvider};
use crate::data::{segment_document, ChunkId, GroundedExample};
use crate::error::{invalid, Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub segments_per_doc: usize,
    pub clusters_sampled: usize,
    pub min_cluster_size: usize,
    pub candidates_per_cluster: usize,
    pub quality_threshold: u8,
    pub easy_threshold: u8,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
    /// Documents outside `[min_doc_chars, max_doc_chars]` characters are skipped.
    pub min_doc_chars: usize,
    pub max_doc_chars: usize,
    /// Extra attempts per provider call after the first failure.
    pub max_retries: u32,
    /// Initial retry delay, doubled on each further attempt.
    pub retry_backoff_ms: u64,
    /// Documents processed concurrently, which bounds provider calls in flight.
    pub max_in_flight: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            segments_per_doc: 64,
            clusters_sampled: 4,
            min_cluster_size: 4,
            candidates_per_cluster: 3,
            quality_threshold: 9,
            easy_threshold: 8,
            dbscan_eps: 0.35,
            dbscan_min_pts: 3,
            min_doc_chars: 32_000,
            max_doc_chars: 256_000,
            max_retries: 2,
            retry_backoff_ms: 500,
            max_in_flight: 4,
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("segments_per_doc", self.segments_per_doc),
            ("clusters_sampled", self.clusters_sampled),
            ("min_cluster_size", self.min_cluster_size),
            ("candidates_per_cluster", self.candidates_per_cluster),
            ("dbscan_min_pts", self.dbscan_min_pts),
            ("max_in_flight", self.max_in_flight),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        for (name, t) in [("quality_threshold", self.quality_threshold), ("easy_threshold", self.easy_threshold)] {
            if !(1..=10).contains(&t) {
                return Err(Error::Config(format!("{name} must lie in 1..=10, got {t}")));
            }
        }
        if !(self.dbscan_eps > 0.0 && self.dbscan_eps.is_finite()) {
            return Err(Error::Config(format!("dbscan_eps must be positive, got {}", self.dbscan_eps)));
        }
        if self.min_doc_chars > self.max_doc_chars {
            return Err(Error::Config("min_doc_chars exceeds max_doc_chars".into()));
        }
        Ok(())
    }
}

/// Picks the best candidate in two stages: the top-scored candidate within each
/// cluster, then the top-scored cluster winner. Ties are broken uniformly with `rng`.
///
/// Returns the winning cluster's index and the candidate.
pub fn select_best(candidates_by_cluster: &[Vec<Candidate>], rng: &mut Rng) -> Result<(usize, Candidate)> {
    if candidates_by_cluster.is_empty() {
        return invalid("no clusters to select from");
    }
    let mut winners = Vec::with_capacity(candidates_by_cluster.len());
    for (c, cands) in candidates_by_cluster.iter().enumerate() {
        if cands.is_empty() {
            return invalid(format!("cluster {c} has no candidates"));
        }
        let scores: Vec<u8> = cands
            .iter()
            .map(|x| x.score.ok_or_else(|| Error::InvalidInput("unscored candidate".into())))
            .collect::<Result<_>>()?;
        let i = argmax_random(&scores, rng);
        winners.push((c, scores[i], i));
    }
    let scores: Vec<u8> = winners.iter().map(|w| w.1).collect();
    let (c, _, i) = winners[argmax_random(&scores, rng)];
    Ok((c, candidates_by_cluster[c][i].clone()))
}

fn argmax_random(scores: &[u8], rng: &mut Rng) -> usize {
    let best = *scores.iter().max().expect("non-empty");
    let tied: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] == best).collect();
    if tied.len() == 1 {
        tied[0]
    } else {
        tied[rng.random_range(0..tied.len())]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    Length,
    Segmentation,
    NoEligibleCluster,
    LowQuality,
    TooEasy,
    ProviderError,
    InvalidCandidates,
}

impl SkipReason {
    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::Length => "length",
            SkipReason::Segmentation => "segmentation",
            SkipReason::NoEligibleCluster => "no-eligible-cluster",
            SkipReason::LowQuality => "low-quality",
            SkipReason::TooEasy => "too-easy",
            SkipReason::ProviderError => "provider-error",
            SkipReason::InvalidCandidates => "invalid-candidates",
        }
    }
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkipRecord {
    pub doc_id: String,
    pub reason: SkipReason,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct PipelineReport {
    /// Emitted examples in input order.
    pub examples: Vec<GroundedExample>,
    /// Skipped documents in input order.
    pub skips: Vec<SkipRecord>,
}

impl PipelineReport {
    pub fn skip_reason(&self, doc_id: &str) -> Option<SkipReason> {
        self.skips.iter().find(|s| s.doc_id == doc_id).map(|s| s.reason)
    }

    /// The skip log as line-delimited JSON.
    pub fn skips_to_jsonl(&self) -> String {
        self.skips
            .iter()
            .map(|s| serde_json::to_string(s).expect("skip record serialises") + "\n")
            .collect()
    }
}

type Outcome = std::result::Result<GroundedExample, SkipRecord>;

/// Runs the pipeline over `(doc_id, text)` pairs.
///
/// Documents run on `max_in_flight` worker threads. Each document draws from its own
/// random substream, so output is identical for any worker count.
pub fn run_pipeline(
    corpus: &[(String, String)],
    embed: &dyn EmbeddingProvider,
    gen: &dyn GenerationProvider,
    config: &PipelineConfig,
) -> Result<PipelineReport> {
    config.validate()?;
    if corpus.is_empty() {
        return invalid("corpus is empty");
    }
    let slots: Vec<Mutex<Option<Outcome>>> = corpus.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = config.max_in_flight.min(corpus.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= corpus.len() {
                    break;
                }
                let (doc_id, text) = &corpus[i];
                let mut rng = rng::substream(config.seed, i as u64);
                let outcome = process_document(doc_id, text, embed, gen, config, &mut rng);
                *slots[i].lock().expect("slot lock") = Some(outcome);
            });
        }
    });
    let mut report = PipelineReport::default();
    for slot in slots {
        match slot.into_inner().expect("slot lock").expect("every document processed") {
            Ok(ex) => {
                log::info!("{}: kept (score {:?})", ex.document.doc_id(), ex.quality_score);
                report.examples.push(ex);
            }
            Err(skip) => {
                log::warn!("{}: skipped ({}: {})", skip.doc_id, skip.reason, skip.detail);
                report.skips.push(skip);
            }
        }
    }
    Ok(report)
}

fn with_retries<T>(config: &PipelineConfig, mut call: impl FnMut() -> Result<T>) -> Result<T> {
    let mut attempt = 0;
    loop {
        match call() {
            Ok(v) => return Ok(v),
            Err(e) if attempt >= config.max_retries => return Err(e),
            Err(e) => {
                log::debug!("retrying after: {e}");
                let delay = config.retry_backoff_ms.saturating_mul(1 << attempt.min(16));
                if delay > 0 {
                    std::thread::sleep(Duration::from_millis(delay));
                }
                attempt += 1;
            }
        }
    }
}

fn failure_reason(e: &Error) -> SkipReason {
    match e {
        Error::Provider(_) | Error::Io(_) | Error::Json(_) => SkipReason::ProviderError,
        _ => SkipReason::InvalidCandidates,
    }
}

fn check_candidates(cands: &[Candidate], k: usize, cluster_size: usize) -> Result<()> {
    if cands.len() != k {
        return invalid(format!("expected {k} candidates, got {}", cands.len()));
    }
    for c in cands {
        if c.evidence.is_empty() {
            return invalid("candidate with empty evidence");
        }
        if let Some(id) = c.evidence.iter().find(|id| id.position() >= cluster_size) {
            return invalid(format!("evidence {id} outside cluster of {cluster_size} chunks"));
        }
        if c.question.trim().is_empty() || c.answer.trim().is_empty() {
            return invalid("candidate with empty question or answer");
        }
    }
    Ok(())
}

fn process_document(
    doc_id: &str,
    text: &str,
    embed: &dyn EmbeddingProvider,
    gen: &dyn GenerationProvider,
    config: &PipelineConfig,
    rng: &mut Rng,
) -> Outcome {
    let skip = |reason: SkipReason, detail: String| SkipRecord { doc_id: doc_id.to_string(), reason, detail };
    let fail = |e: Error| skip(failure_reason(&e), e.to_string());

    let chars = text.chars().count();
    if chars < config.min_doc_chars || chars > config.max_doc_chars {
        return Err(skip(SkipReason::Length, format!("{chars} characters")));
    }
    let doc = segment_document(doc_id, text, config.segments_per_doc)
        .map_err(|e| skip(SkipReason::Segmentation, e.to_string()))?;

    let texts = doc.texts();
    let mut vectors = with_retries(config, || {
        let v = embed.embed(texts)?;
        if v.len() != texts.len() {
            return Err(Error::Provider(format!("{} embeddings for {} chunks", v.len(), texts.len())));
        }
        Ok(v)
    })
    .map_err(|e| skip(SkipReason::ProviderError, e.to_string()))?;
    for v in &mut vectors {
        l2_normalize(v);
    }
    let clusters = cluster_chunks(&vectors, config.dbscan_eps, config.dbscan_min_pts)
        .map_err(|e| skip(SkipReason::ProviderError, e.to_string()))?;

    let eligible: Vec<&BTreeSet<ChunkId>> =
        clusters.iter().filter(|c| c.len() >= config.min_cluster_size).collect();
    if eligible.is_empty() {
        return Err(skip(
            SkipReason::NoEligibleCluster,
            format!("{} clusters, none with {} chunks", clusters.len(), config.min_cluster_size),
        ));
    }
    let mut picked = sample(rng, eligible.len(), config.clusters_sampled.min(eligible.len())).into_vec();
    picked.sort_unstable();
    let sampled: Vec<Vec<ChunkId>> = picked.iter().map(|&i| eligible[i].iter().copied().collect()).collect();

    let k = config.candidates_per_cluster;
    let mut scored = Vec::with_capacity(sampled.len());
    for (index, members) in sampled.iter().enumerate() {
        let request = ClusterRequest {
            doc_id,
            cluster_index: index,
            chunks: members.iter().map(|&id| doc.chunk(id).expect("cluster member in document")).collect(),
        };
        let mut cands = with_retries(config, || {
            let c = gen.generate_candidates(&request, k)?;
            check_candidates(&c, k, members.len())?;
            Ok(c)
        })
        .map_err(fail)?;
        for (i, c) in cands.iter_mut().enumerate() {
            let s = with_retries(config, || check_score(gen.judge_quality(&request, i, c)?)).map_err(fail)?;
            c.score = Some(s);
        }
        scored.push(cands);
    }

    let (cluster, best) = select_best(&scored, rng).map_err(fail)?;
    let score = best.score.expect("scored");
    if score < config.quality_threshold {
        return Err(skip(SkipReason::LowQuality, format!("best score {score}")));
    }
    let members = &sampled[cluster];
    let evidence: BTreeSet<ChunkId> = best.evidence.iter().map(|id| members[id.position()]).collect();
    let remapped = Candidate { evidence: evidence.clone(), ..best };
    let easiness =
        with_retries(config, || check_score(gen.judge_easiness(&doc, &remapped)?)).map_err(fail)?;
    if easiness >= config.easy_threshold {
        return Err(skip(SkipReason::TooEasy, format!("easiness {easiness}")));
    }
    GroundedExample::new(doc, remapped.question, remapped.answer, evidence, Some(score))
        .map_err(|e| skip(SkipReason::InvalidCandidates, e.to_string()))
}

/// Reads a corpus: every `*.txt` file of a directory in name order (doc id = file stem),
/// or a manifest file listing one text file path per line, relative to the manifest.
pub fn load_corpus(path: &Path) -> Result<Vec<(String, String)>> {
    let files: Vec<PathBuf> = if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        files.retain(|p| p.is_file() && p.extension().is_some_and(|e| e == "txt"));
        files.sort();
        files
    } else {
        let base = path.parent().unwrap_or(Path::new("."));
        std::fs::read_to_string(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(|l| base.join(l))
            .collect()
    };
    if files.is_empty() {
        return invalid(format!("no documents found at {}", path.display()));
    }
    files
        .iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            Ok((id, std::fs::read_to_string(p)?))
        })
        .collect()
}
