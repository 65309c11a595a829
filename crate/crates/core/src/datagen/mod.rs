//! Synthetic grounded-QA generation: segment, embed, cluster, generate, judge, filter.

pub mod cluster;
pub mod embed;
#[cfg(feature = "http")]
pub mod http;
pub mod pipeline;
pub mod provider;

pub use cluster::{adjusted_rand_index, cluster_chunks, labels_from_clusters};
pub use embed::{EmbeddingProvider, HashingEmbedder};
pub use pipeline::{load_corpus, run_pipeline, select_best, PipelineConfig, PipelineReport, SkipReason, SkipRecord};
pub use provider::{Candidate, ClusterRequest, GenerationProvider, ScriptedGenerator, ScriptedScores};
