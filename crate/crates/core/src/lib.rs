//! Two-stage scene-aware text-to-person retrieval.
//!
//! A cheap embedding scan ranks every person crop in a gallery against a text
//! query; the top-K crops are then shown in their full scenes to an external
//! vision-language ranker, whose ordering replaces the top-K prefix.
//!
//! - [`gallery`]: manifest ingestion, completeness filter, dedup
//! - [`embedding`]: vector storage and cosine similarity
//! - [`coarse`]: gallery scoring and top-K selection
//! - [`ranker`]: prompts, the ranker trait, parsing and fallback
//! - [`eval`]: R@k / mAP, ablations, cost model
//! - [`pipeline`]: the composed pipeline and benchmark runner
//! - [`synthetic`]: seeded fixtures with controlled coarse ranks

pub mod coarse;
pub mod embedding;
pub mod eval;
pub mod gallery;
pub mod pipeline;
pub mod ranker;
pub mod synthetic;

pub use coarse::{QueryRecord, ScoredCandidate, SceneCandidate, Target, TextQuery};
pub use embedding::EmbeddingMatrix;
pub use gallery::{BBox, Gallery, GalleryImage, PersonCrop};
pub use pipeline::{run_benchmark, BenchmarkReport, Pipeline, PipelineError, PipelineSettings};
pub use ranker::{PromptVariant, RankedResult, Ranker, RankerError};
