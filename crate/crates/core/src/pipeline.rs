//! The composed two-stage pipeline.
//!
//! ```text
//! text embedding -> score_gallery -> top_k -> map_to_scene -> build_prompt
//!     -> Ranker -> parse/repair -> apply_rerank (coarse order on failure)
//! ```
//!
//! Gallery and embeddings are shared immutably; queries run on a thread pool
//! whose size bounds the number of ranker calls in flight. Results never
//! depend on that size.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coarse::{full_ranking, map_to_scene, score_gallery, QueryRecord, RetrievalError, ScoredCandidate, TextQuery, DEFAULT_K};
use crate::embedding::{EmbeddingError, EmbeddingMatrix};
use crate::eval::{EvalError, EvalReport, GroundTruth, DEFAULT_IOU_THRESHOLD, REPORTED_KS};
use crate::gallery::Gallery;
use crate::ranker::{rank_with_fallback, PromptVariant, RankedResult, Ranker, RerankInput};

pub const DEFAULT_MAX_IN_FLIGHT: usize = 4;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid settings: {0}")]
    InvalidSettings(String),
    #[error("text embeddings have dimension {text}, crop embeddings {crop}")]
    DimensionMismatch { text: usize, crop: usize },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

/// Per-run knobs of the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineSettings {
    pub k: usize,
    pub variant: PromptVariant,
    pub retries: u32,
    pub iou_threshold: f64,
    pub max_in_flight: usize,
}

impl Default for PipelineSettings {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            variant: PromptVariant::Bep,
            retries: 0,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
        }
    }
}

impl PipelineSettings {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.k == 0 {
            return Err(PipelineError::InvalidSettings("k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(PipelineError::InvalidSettings("iou_threshold must be in [0, 1]".into()));
        }
        if self.max_in_flight == 0 {
            return Err(PipelineError::InvalidSettings("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

/// Output of the coarse stage for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarseStage {
    pub query: TextQuery,
    /// Every crop in rank order.
    pub ranking: Vec<ScoredCandidate>,
    pub crops_scored: usize,
    pub elapsed: Duration,
}

impl CoarseStage {
    pub fn crop_ids(&self) -> Vec<String> {
        self.ranking.iter().map(|c| c.crop_id.clone()).collect()
    }

    pub fn as_result(&self) -> RankedResult {
        RankedResult {
            query_id: self.query.query_id.clone(),
            final_order: self.crop_ids(),
            rerank_applied: false,
            raw_ranker_text: String::new(),
        }
    }
}

/// What happened while answering one query.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTrace {
    pub k: usize,
    pub variant: PromptVariant,
    pub crops_scored: usize,
    pub ranker_calls: usize,
    pub coarse_time: Duration,
    pub rerank_time: Duration,
    pub raw_ranker_text: String,
    pub fallback_reason: Option<String>,
}

#[derive(Debug, Clone)]
pub struct QueryOutcome {
    pub result: RankedResult,
    pub trace: EvalTrace,
    pub coarse: Vec<ScoredCandidate>,
}

#[derive(Clone)]
pub struct Pipeline {
    gallery: Arc<Gallery>,
    crop_embs: Arc<EmbeddingMatrix>,
    text_embs: Arc<EmbeddingMatrix>,
    ranker: Arc<dyn Ranker>,
    settings: PipelineSettings,
}

impl fmt::Debug for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Pipeline")
            .field("images", &self.gallery.images().len())
            .field("crops", &self.gallery.crops().len())
            .field("settings", &self.settings)
            .finish_non_exhaustive()
    }
}

impl Pipeline {
    /// Embeddings are normalized here, so query-time cosine reduces to a dot
    /// product over unit vectors.
    pub fn new(
        gallery: Arc<Gallery>,
        crop_embs: &EmbeddingMatrix,
        text_embs: &EmbeddingMatrix,
        ranker: Arc<dyn Ranker>,
        settings: PipelineSettings,
    ) -> Result<Self, PipelineError> {
        settings.validate()?;
        if crop_embs.dim() != text_embs.dim() {
            return Err(PipelineError::DimensionMismatch {
                text: text_embs.dim(),
                crop: crop_embs.dim(),
            });
        }
        if let Some(c) = gallery.crops().iter().find(|c| crop_embs.get(&c.crop_id).is_none()) {
            return Err(RetrievalError::MissingCropEmbedding(c.crop_id.clone()).into());
        }
        Ok(Self {
            gallery,
            crop_embs: Arc::new(crop_embs.normalize()?),
            text_embs: Arc::new(text_embs.normalize()?),
            ranker,
            settings,
        })
    }

    pub fn gallery(&self) -> &Gallery {
        &self.gallery
    }

    pub fn settings(&self) -> &PipelineSettings {
        &self.settings
    }

    pub fn text_embeddings(&self) -> &EmbeddingMatrix {
        &self.text_embs
    }

    /// Same data and settings, different ranker.
    pub fn with_ranker(&self, ranker: Arc<dyn Ranker>) -> Self {
        Self {
            ranker,
            ..self.clone()
        }
    }

    pub fn with_settings(&self, settings: PipelineSettings) -> Result<Self, PipelineError> {
        settings.validate()?;
        Ok(Self {
            settings,
            ..self.clone()
        })
    }

    pub fn coarse(&self, query: &TextQuery) -> Result<CoarseStage, PipelineError> {
        let start = Instant::now();
        let scores = score_gallery(&self.gallery, query, &self.text_embs, &self.crop_embs)?;
        let crops_scored = scores.len();
        Ok(CoarseStage {
            query: query.clone(),
            ranking: full_ranking(&scores),
            crops_scored,
            elapsed: start.elapsed(),
        })
    }

    /// Re-ranks the top `k` of a coarse stage.
    pub fn rerank(
        &self,
        coarse: &CoarseStage,
        variant: PromptVariant,
        k: usize,
    ) -> Result<(RankedResult, EvalTrace), PipelineError> {
        let start = Instant::now();
        let k_eff = k.min(coarse.ranking.len());
        let scene = map_to_scene(&coarse.ranking[..k_eff], &self.gallery)?;
        let order = coarse.crop_ids();
        let outcome = rank_with_fallback(
            self.ranker.as_ref(),
            RerankInput {
                query_id: &coarse.query.query_id,
                text: &coarse.query.text,
                variant,
                scene_candidates: &scene,
                coarse: &order,
                retries: self.settings.retries,
            },
        );
        let trace = EvalTrace {
            k: k_eff,
            variant,
            crops_scored: coarse.crops_scored,
            ranker_calls: outcome.ranker_calls,
            coarse_time: coarse.elapsed,
            rerank_time: start.elapsed(),
            raw_ranker_text: outcome.result.raw_ranker_text.clone(),
            fallback_reason: outcome.fallback_reason,
        };
        Ok((outcome.result, trace))
    }

    /// Both stages for one query with the configured `k` and variant.
    pub fn run_query(&self, query: &TextQuery) -> Result<QueryOutcome, PipelineError> {
        self.run_query_with(query, self.settings.variant, self.settings.k)
    }

    pub fn run_query_with(
        &self,
        query: &TextQuery,
        variant: PromptVariant,
        k: usize,
    ) -> Result<QueryOutcome, PipelineError> {
        if k == 0 {
            return Err(PipelineError::InvalidSettings("k must be at least 1".into()));
        }
        let coarse = self.coarse(query)?;
        let (result, trace) = self.rerank(&coarse, variant, k)?;
        Ok(QueryOutcome {
            result,
            trace,
            coarse: coarse.ranking,
        })
    }

    /// Runs `f` on a pool sized by `max_in_flight`.
    pub fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.settings.max_in_flight)
            .build()
            .map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
        Ok(pool.install(f))
    }

    /// Coarse stage for every query, in input order.
    pub fn coarse_all(&self, records: &[QueryRecord]) -> Result<Vec<CoarseStage>, PipelineError> {
        self.in_pool(|| {
            records
                .par_iter()
                .map(|r| self.coarse(&r.to_query()?))
                .collect()
        })?
    }

    /// Re-ranks previously computed coarse stages, in input order.
    pub fn rerank_all(
        &self,
        coarse: &[CoarseStage],
        variant: PromptVariant,
        k: usize,
    ) -> Result<Vec<(RankedResult, EvalTrace)>, PipelineError> {
        self.in_pool(|| {
            coarse
                .par_iter()
                .map(|c| self.rerank(c, variant, k))
                .collect()
        })?
    }
}

/// Coarse-only and re-ranked evaluation from a single pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub k: usize,
    pub variant: PromptVariant,
    pub queries: usize,
    pub reranks_applied: usize,
    pub coarse: EvalReport,
    pub reranked: EvalReport,
    /// Re-ranked minus coarse, keyed `R@1`, `R@5`, `R@10`, `mAP`.
    pub delta: BTreeMap<String, f64>,
    #[serde(skip)]
    pub results: Vec<RankedResult>,
}

fn metric_rows(r: &EvalReport) -> Vec<(String, f64)> {
    let mut rows: Vec<_> = REPORTED_KS.iter().map(|k| (format!("R@{k}"), r.recall(*k))).collect();
    rows.push(("mAP".into(), r.map_score));
    rows
}

impl BenchmarkReport {
    pub fn new(
        k: usize,
        variant: PromptVariant,
        coarse: EvalReport,
        reranked: EvalReport,
        results: Vec<RankedResult>,
    ) -> Self {
        let delta = metric_rows(&coarse)
            .into_iter()
            .zip(metric_rows(&reranked))
            .map(|((name, before), (_, after))| (name, after - before))
            .collect();
        Self {
            k,
            variant,
            queries: results.len(),
            reranks_applied: results.iter().filter(|r| r.rerank_applied).count(),
            coarse,
            reranked,
            delta,
            results,
        }
    }
}

impl fmt::Display for BenchmarkReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<14} {:>16} {:>16} {:>16} {:>16}",
            "method", "R@1", "R@5", "R@10", "mAP"
        )?;
        write!(f, "{:<14}", "coarse")?;
        for (_, v) in metric_rows(&self.coarse) {
            write!(f, " {v:>16.2}")?;
        }
        writeln!(f)?;
        write!(f, "{:<14}", format!("+rerank {}", self.variant))?;
        for (name, v) in metric_rows(&self.reranked) {
            let d = self.delta[&name];
            write!(f, " {:>16}", format!("{v:.2} ({d:+.2})"))?;
        }
        writeln!(f)?;
        write!(
            f,
            "queries: {}  k: {}  reranked: {}",
            self.queries, self.k, self.reranks_applied
        )
    }
}

/// Evaluates the coarse ranking and the re-ranked one for every query.
pub fn run_benchmark(pipeline: &Pipeline, records: &[QueryRecord]) -> Result<BenchmarkReport, PipelineError> {
    let gt = GroundTruth::from_records(records);
    gt.validate(pipeline.gallery())?;
    let settings = pipeline.settings();
    let coarse = pipeline.coarse_all(records)?;
    let coarse_results: Vec<RankedResult> = coarse.iter().map(CoarseStage::as_result).collect();
    let reranked: Vec<RankedResult> = pipeline
        .rerank_all(&coarse, settings.variant, settings.k)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    let iou = settings.iou_threshold;
    let coarse_report = crate::eval::evaluate(&coarse_results, &gt, pipeline.gallery(), iou)?;
    let reranked_report = crate::eval::evaluate(&reranked, &gt, pipeline.gallery(), iou)?;
    Ok(BenchmarkReport::new(
        settings.k,
        settings.variant,
        coarse_report,
        reranked_report,
        reranked,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarse::Target;
    use crate::gallery::{BBox, GalleryImage, KeypointFlags, PersonCrop};
    use crate::ranker::mock::{FailingRanker, IdentityRanker, OracleRanker};
    use crate::ranker::RankerError;

    /// Three crops along a line; the query vector points at `c0`.
    fn tiny() -> (Arc<Gallery>, EmbeddingMatrix, EmbeddingMatrix, Vec<QueryRecord>) {
        let images = vec![GalleryImage {
            image_id: "img".into(),
            uri: "img.jpg".into(),
            width: 100,
            height: 100,
        }];
        let crops: Vec<PersonCrop> = (0..3)
            .map(|i| PersonCrop {
                crop_id: format!("c{i}"),
                source_image_id: "img".into(),
                bbox: BBox::new(i * 30, 0, 20, 50),
                confidence: 1.0,
                keypoints: KeypointFlags::ALL,
            })
            .collect();
        let gallery = Arc::new(Gallery::new(images, crops).unwrap());
        let mut ce = EmbeddingMatrix::new(2).unwrap();
        ce.push("c0", &[1.0, 0.0]).unwrap();
        ce.push("c1", &[0.8, 0.6]).unwrap();
        ce.push("c2", &[0.0, 1.0]).unwrap();
        let mut te = EmbeddingMatrix::new(2).unwrap();
        te.push("q", &[2.0, 0.0]).unwrap();
        let records = vec![QueryRecord {
            query_id: "q".into(),
            text: "the person on the right".into(),
            appearance_text: None,
            gt: Target {
                image_id: "img".into(),
                bbox: BBox::new(30, 0, 20, 50),
            },
        }];
        (gallery, ce, te, records)
    }

    #[test]
    fn oracle_lifts_target_within_k() {
        let (g, ce, te, records) = tiny();
        let oracle = Arc::new(OracleRanker::from_queries(&records, &g, 0.5));
        let p = Pipeline::new(g, &ce, &te, oracle, PipelineSettings { k: 2, ..Default::default() }).unwrap();
        let out = p.run_query(&records[0].to_query().unwrap()).unwrap();
        assert_eq!(out.result.final_order, ["c1", "c0", "c2"]);
        assert!(out.result.rerank_applied);
        assert_eq!(out.trace.crops_scored, 3);
        assert_eq!(out.trace.ranker_calls, 1);
    }

    #[test]
    fn oracle_cannot_reach_beyond_k() {
        let (g, ce, te, mut records) = tiny();
        records[0].gt.bbox = BBox::new(60, 0, 20, 50);
        let oracle = Arc::new(OracleRanker::from_queries(&records, &g, 0.5));
        let p = Pipeline::new(g, &ce, &te, oracle, PipelineSettings { k: 2, ..Default::default() }).unwrap();
        let out = p.run_query(&records[0].to_query().unwrap()).unwrap();
        assert_eq!(out.result.final_order, ["c0", "c1", "c2"]);
    }

    #[test]
    fn unreachable_ranker_falls_back() {
        let (g, ce, te, records) = tiny();
        let failing = Arc::new(FailingRanker(RankerError::Transport("connection refused".into())));
        let p = Pipeline::new(g, &ce, &te, failing, PipelineSettings::default()).unwrap();
        let out = p.run_query(&records[0].to_query().unwrap()).unwrap();
        assert!(!out.result.rerank_applied);
        assert_eq!(out.result.final_order, ["c0", "c1", "c2"]);
        assert!(out.trace.fallback_reason.is_some());
    }

    #[test]
    fn identity_benchmark_has_zero_delta() {
        let (g, ce, te, records) = tiny();
        let p = Pipeline::new(g, &ce, &te, Arc::new(IdentityRanker), PipelineSettings::default()).unwrap();
        let report = run_benchmark(&p, &records).unwrap();
        assert!(report.delta.values().all(|d| *d == 0.0));
        assert_eq!(report.coarse, report.reranked);
        let table = report.to_string();
        assert!(table.contains("(+0.00)"), "{table}");
    }

    #[test]
    fn settings_are_validated() {
        let (g, ce, te, _) = tiny();
        let bad = PipelineSettings {
            k: 0,
            ..Default::default()
        };
        assert!(Pipeline::new(g.clone(), &ce, &te, Arc::new(IdentityRanker), bad).is_err());
        let mut wrong_dim = EmbeddingMatrix::new(3).unwrap();
        wrong_dim.push("q", &[1.0, 0.0, 0.0]).unwrap();
        assert!(matches!(
            Pipeline::new(g, &ce, &wrong_dim, Arc::new(IdentityRanker), PipelineSettings::default()),
            Err(PipelineError::DimensionMismatch { .. })
        ));
    }
}
