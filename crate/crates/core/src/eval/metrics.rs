use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::coarse::{QueryRecord, Target};
use crate::gallery::{BBox, Gallery, PersonCrop};
use crate::ranker::RankedResult;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// Cut-offs reported in every [`EvalReport`].
pub const REPORTED_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Error, PartialEq)]
pub enum EvalError {
    #[error("no queries")]
    NoQueries,
    #[error("query {0} has no ground truth")]
    MissingGroundTruth(String),
    #[error("query {0} has ground truth but no result")]
    MissingResult(String),
    #[error("query {0} appears more than once in the results")]
    DuplicateResult(String),
    #[error("result references unknown crop {0}")]
    UnknownCrop(String),
    #[error("ground truth for {query_id} references unknown image {image_id}")]
    UnknownImage { query_id: String, image_id: String },
    #[error("ground truth bbox {bbox} for {query_id} lies outside image {image_id}")]
    TargetOutOfBounds {
        query_id: String,
        image_id: String,
        bbox: BBox,
    },
    #[error("k must be positive")]
    ZeroK,
}

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: BBox, b: BBox) -> f64 {
    let ix = (u64::from(a.x) + u64::from(a.w)).min(u64::from(b.x) + u64::from(b.w));
    let iy = (u64::from(a.y) + u64::from(a.h)).min(u64::from(b.y) + u64::from(b.h));
    let iw = ix.saturating_sub(u64::from(a.x.max(b.x)));
    let ih = iy.saturating_sub(u64::from(a.y.max(b.y)));
    let inter = (iw * ih) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    if union <= 0.0 {
        return 0.0;
    }
    inter / union
}

/// Same scene and enough overlap with the target box.
pub fn is_match(crop: &PersonCrop, target: &Target, iou_threshold: f64) -> bool {
    crop.source_image_id == target.image_id && iou(crop.bbox, target.bbox) >= iou_threshold
}

/// Target person per query.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    targets: BTreeMap<String, Target>,
}

impl GroundTruth {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(records: &[QueryRecord]) -> Self {
        Self {
            targets: records
                .iter()
                .map(|r| (r.query_id.clone(), r.gt.clone()))
                .collect(),
        }
    }

    pub fn insert(&mut self, query_id: impl Into<String>, target: Target) {
        self.targets.insert(query_id.into(), target);
    }

    pub fn get(&self, query_id: &str) -> Option<&Target> {
        self.targets.get(query_id)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Target)> {
        self.targets.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Every target must name a gallery image and fit inside it.
    pub fn validate(&self, gallery: &Gallery) -> Result<(), EvalError> {
        for (query_id, t) in &self.targets {
            let image = gallery.image(&t.image_id).ok_or_else(|| EvalError::UnknownImage {
                query_id: query_id.clone(),
                image_id: t.image_id.clone(),
            })?;
            if !t.bbox.fits_within(image.width, image.height) {
                return Err(EvalError::TargetOutOfBounds {
                    query_id: query_id.clone(),
                    image_id: t.image_id.clone(),
                    bbox: t.bbox,
                });
            }
        }
        Ok(())
    }
}

/// 1-based rank of the first crop matching `target`, if any.
pub fn first_match_rank(
    order: &[String],
    gallery: &Gallery,
    target: &Target,
    iou_threshold: f64,
) -> Result<Option<usize>, EvalError> {
    for (i, crop_id) in order.iter().enumerate() {
        let crop = gallery
            .crop(crop_id)
            .ok_or_else(|| EvalError::UnknownCrop(crop_id.clone()))?;
        if is_match(crop, target, iou_threshold) {
            return Ok(Some(i + 1));
        }
    }
    Ok(None)
}

/// Percentage of queries whose first match is within the top `k`.
pub fn recall_from_ranks(ranks: &[Option<usize>], k: usize) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count();
    100.0 * hits as f64 / ranks.len() as f64
}

/// Ranked-list depth scored by mAP. Matches below it contribute nothing.
pub const MAP_DEPTH: usize = 10;

/// Average precision with a single relevant item: `1 / rank` within the
/// top [`MAP_DEPTH`], otherwise 0.
pub fn ap_from_rank(rank: Option<usize>) -> f64 {
    match rank {
        Some(r) if r <= MAP_DEPTH => 1.0 / r as f64,
        _ => 0.0,
    }
}

/// Mean of [`ap_from_rank`] over queries, as a percentage.
pub fn mean_ap_from_ranks(ranks: &[Option<usize>]) -> f64 {
    if ranks.is_empty() {
        return 0.0;
    }
    100.0 * ranks.iter().map(|&r| ap_from_rank(r)).sum::<f64>() / ranks.len() as f64
}

pub fn average_precision(
    result: &RankedResult,
    gallery: &Gallery,
    target: &Target,
    iou_threshold: f64,
) -> Result<f64, EvalError> {
    first_match_rank(&result.final_order, gallery, target, iou_threshold).map(ap_from_rank)
}

fn query_ranks(
    results: &[RankedResult],
    gt: &GroundTruth,
    gallery: &Gallery,
    iou_threshold: f64,
) -> Result<BTreeMap<String, Option<usize>>, EvalError> {
    if results.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut ranks = BTreeMap::new();
    for r in results {
        let target = gt
            .get(&r.query_id)
            .ok_or_else(|| EvalError::MissingGroundTruth(r.query_id.clone()))?;
        let rank = first_match_rank(&r.final_order, gallery, target, iou_threshold)?;
        if ranks.insert(r.query_id.clone(), rank).is_some() {
            return Err(EvalError::DuplicateResult(r.query_id.clone()));
        }
    }
    Ok(ranks)
}

/// R@k over `results`, in percent.
pub fn recall_at_k(
    results: &[RankedResult],
    gt: &GroundTruth,
    gallery: &Gallery,
    iou_threshold: f64,
    k: usize,
) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let ranks: Vec<_> = query_ranks(results, gt, gallery, iou_threshold)?.into_values().collect();
    Ok(recall_from_ranks(&ranks, k))
}

/// Retrieval quality over a query set. All values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub r_at: BTreeMap<usize, f64>,
    pub map_score: f64,
    pub per_query_ranks: BTreeMap<String, Option<usize>>,
}

impl EvalReport {
    pub fn from_ranks(per_query_ranks: BTreeMap<String, Option<usize>>) -> Self {
        let ranks: Vec<_> = per_query_ranks.values().copied().collect();
        Self {
            r_at: REPORTED_KS
                .iter()
                .map(|&k| (k, recall_from_ranks(&ranks, k)))
                .collect(),
            map_score: mean_ap_from_ranks(&ranks),
            per_query_ranks,
        }
    }

    pub fn recall(&self, k: usize) -> f64 {
        self.r_at.get(&k).copied().unwrap_or_else(|| {
            let ranks: Vec<_> = self.per_query_ranks.values().copied().collect();
            recall_from_ranks(&ranks, k)
        })
    }

    pub fn query_count(&self) -> usize {
        self.per_query_ranks.len()
    }

    /// One table row: `R@1  R@5  R@10  mAP`, two decimals.
    pub fn row(&self) -> String {
        format!(
            "{:>7.2} {:>7.2} {:>7.2} {:>7.2}",
            self.recall(1),
            self.recall(5),
            self.recall(10),
            self.map_score
        )
    }

    pub const HEADER: &'static str = "    R@1     R@5    R@10     mAP";
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", Self::HEADER)?;
        write!(f, "{}", self.row())
    }
}

/// Scores a full result set. Query ids in `results` and `gt` must match.
pub fn evaluate(
    results: &[RankedResult],
    gt: &GroundTruth,
    gallery: &Gallery,
    iou_threshold: f64,
) -> Result<EvalReport, EvalError> {
    let ranks = query_ranks(results, gt, gallery, iou_threshold)?;
    let seen: HashSet<&str> = ranks.keys().map(String::as_str).collect();
    if let Some((missing, _)) = gt.iter().find(|(q, _)| !seen.contains(q)) {
        return Err(EvalError::MissingResult(missing.to_string()));
    }
    Ok(EvalReport::from_ranks(ranks))
}
