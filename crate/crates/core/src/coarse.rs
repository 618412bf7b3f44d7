//! Appearance-based coarse retrieval: exact cosine scan over every gallery
//! crop, top-K selection, and the mapping of each candidate back to the scene
//! it was detected in.

use std::cmp::Ordering;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine_similarity, EmbeddingError, EmbeddingMatrix};
use crate::gallery::{BBox, Gallery, GalleryImage};

pub const DEFAULT_K: usize = 10;

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("query text must not be empty")]
    EmptyText,
    #[error("no text embedding for key {0}")]
    MissingTextEmbedding(String),
    #[error("no crop embedding for {0}")]
    MissingCropEmbedding(String),
    #[error("dangling crop_id {0}")]
    DanglingCrop(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}:{line}: malformed query record: {message}", path.display())]
    MalformedQuery {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

/// A text query. `appearance_text` is the appearance-only part of the
/// description when one was supplied; the full text is used otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct TextQuery {
    pub query_id: String,
    pub text: String,
    pub appearance_text: Option<String>,
    /// Row of the text-embedding matrix holding this query's vector.
    pub embedding_key: String,
}

impl TextQuery {
    /// A query whose embedding is stored under its `query_id`.
    pub fn new(query_id: impl Into<String>, text: impl Into<String>) -> Result<Self, RetrievalError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(RetrievalError::EmptyText);
        }
        let query_id = query_id.into();
        Ok(Self {
            embedding_key: query_id.clone(),
            query_id,
            text,
            appearance_text: None,
        })
    }

    pub fn with_appearance_text(mut self, appearance_text: Option<String>) -> Self {
        self.appearance_text = appearance_text.filter(|t| !t.trim().is_empty());
        self
    }

    pub fn with_embedding_key(mut self, key: impl Into<String>) -> Self {
        self.embedding_key = key.into();
        self
    }

    pub fn appearance_text(&self) -> &str {
        self.appearance_text.as_deref().unwrap_or(&self.text)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub crop_id: String,
    pub score: f64,
}

/// Ranking order: score descending, then `crop_id` ascending.
pub fn rank_order(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.crop_id.cmp(&b.crop_id))
}

/// Top-K candidates in [`rank_order`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateSet {
    pub candidates: Vec<ScoredCandidate>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn crop_ids(&self) -> impl Iterator<Item = &str> {
        self.candidates.iter().map(|c| c.crop_id.as_str())
    }
}

/// A candidate paired with its full-scene image. `index` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCandidate {
    pub index: usize,
    pub image: GalleryImage,
    pub bbox: BBox,
    pub crop_id: String,
}

/// Scores every gallery crop against the query's text embedding.
///
/// One entry per crop, in gallery order. The scan runs in parallel but the
/// output is identical to a sequential pass.
pub fn score_gallery(
    gallery: &Gallery,
    query: &TextQuery,
    text_embs: &EmbeddingMatrix,
    crop_embs: &EmbeddingMatrix,
) -> Result<Vec<ScoredCandidate>, RetrievalError> {
    let text_vec = text_embs
        .get(&query.embedding_key)
        .ok_or_else(|| RetrievalError::MissingTextEmbedding(query.embedding_key.clone()))?;
    score_crops(gallery, text_vec, crop_embs)
}

/// [`score_gallery`] with the text vector already resolved.
pub fn score_crops(
    gallery: &Gallery,
    text_vec: &[f32],
    crop_embs: &EmbeddingMatrix,
) -> Result<Vec<ScoredCandidate>, RetrievalError> {
    gallery
        .crops()
        .par_iter()
        .map(|crop| {
            let v = crop_embs
                .get(&crop.crop_id)
                .ok_or_else(|| RetrievalError::MissingCropEmbedding(crop.crop_id.clone()))?;
            Ok(ScoredCandidate {
                crop_id: crop.crop_id.clone(),
                score: cosine_similarity(text_vec, v)?,
            })
        })
        .collect()
}

/// The `k` best candidates. `k` larger than the input clamps to the input size.
pub fn top_k(scores: &[ScoredCandidate], k: usize) -> CandidateSet {
    let k = k.min(scores.len());
    if k == 0 {
        return CandidateSet::default();
    }
    let mut pool = scores.to_vec();
    if k < pool.len() {
        pool.select_nth_unstable_by(k - 1, rank_order);
        pool.truncate(k);
    }
    pool.sort_by(rank_order);
    CandidateSet { candidates: pool }
}

/// Every candidate in rank order.
pub fn full_ranking(scores: &[ScoredCandidate]) -> Vec<ScoredCandidate> {
    let mut all = scores.to_vec();
    all.sort_by(rank_order);
    all
}

/// Attaches each candidate's source image and box, preserving order.
pub fn map_to_scene(
    candidates: &[ScoredCandidate],
    gallery: &Gallery,
) -> Result<Vec<SceneCandidate>, RetrievalError> {
    candidates
        .iter()
        .enumerate()
        .map(|(i, cand)| {
            let crop = gallery
                .crop(&cand.crop_id)
                .ok_or_else(|| RetrievalError::DanglingCrop(cand.crop_id.clone()))?;
            let image = gallery
                .image(&crop.source_image_id)
                .ok_or_else(|| RetrievalError::DanglingCrop(cand.crop_id.clone()))?;
            Ok(SceneCandidate {
                index: i + 1,
                image: image.clone(),
                bbox: crop.bbox,
                crop_id: crop.crop_id.clone(),
            })
        })
        .collect()
}

/// Ground-truth location of a query's target person.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub image_id: String,
    pub bbox: BBox,
}

/// One line of a queries file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    #[serde(default)]
    pub appearance_text: Option<String>,
    pub gt: Target,
}

impl QueryRecord {
    pub fn to_query(&self) -> Result<TextQuery, RetrievalError> {
        Ok(TextQuery::new(&self.query_id, &self.text)?
            .with_appearance_text(self.appearance_text.clone()))
    }
}

pub fn load_queries(path: impl AsRef<Path>) -> Result<Vec<QueryRecord>, RetrievalError> {
    let path = path.as_ref();
    let io_err = |source| RetrievalError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: QueryRecord =
            serde_json::from_str(&line).map_err(|e| RetrievalError::MalformedQuery {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if record.text.trim().is_empty() {
            return Err(RetrievalError::MalformedQuery {
                path: path.to_path_buf(),
                line: i + 1,
                message: "empty text".into(),
            });
        }
        out.push(record);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery::{KeypointFlags, PersonCrop};
    use proptest::prelude::*;

    fn sc(id: &str, score: f64) -> ScoredCandidate {
        ScoredCandidate {
            crop_id: id.into(),
            score,
        }
    }

    fn ids(set: &CandidateSet) -> Vec<&str> {
        set.crop_ids().collect()
    }

    fn gallery_with(crops: &[(&str, &str, BBox)]) -> Gallery {
        let mut images: Vec<GalleryImage> = Vec::new();
        for (_, img, _) in crops {
            if !images.iter().any(|i| i.image_id == *img) {
                images.push(GalleryImage {
                    image_id: img.to_string(),
                    uri: format!("{img}.jpg"),
                    width: 200,
                    height: 100,
                });
            }
        }
        let crops = crops
            .iter()
            .map(|(id, img, bbox)| PersonCrop {
                crop_id: id.to_string(),
                source_image_id: img.to_string(),
                bbox: *bbox,
                confidence: 1.0,
                keypoints: KeypointFlags::ALL,
            })
            .collect();
        Gallery::new(images, crops).unwrap()
    }

    #[test]
    fn top_k_examples() {
        let scores = [sc("a", 0.9), sc("b", 0.5), sc("c", 0.7)];
        assert_eq!(ids(&top_k(&scores, 2)), ["a", "c"]);
        assert_eq!(ids(&top_k(&scores, 3)), ["a", "c", "b"]);
        assert_eq!(ids(&top_k(&scores, 50)), ["a", "c", "b"]);
        assert_eq!(ids(&top_k(&[sc("b", 0.5), sc("a", 0.5)], 1)), ["a"]);
        assert!(top_k(&[], 3).is_empty());
    }

    #[test]
    fn scoring_matches_hand_cosines() {
        let bbox = BBox::new(0, 0, 10, 10);
        let g = gallery_with(&[("c1", "i1", bbox), ("c2", "i1", bbox), ("c3", "i2", bbox)]);
        let mut crops = EmbeddingMatrix::new(3).unwrap();
        crops.push("c1", &[1.0, 2.0, 2.0]).unwrap();
        crops.push("c2", &[0.0, 3.0, 4.0]).unwrap();
        crops.push("c3", &[2.0, 0.0, 0.0]).unwrap();
        let mut texts = EmbeddingMatrix::new(3).unwrap();
        texts.push("q", &[1.0, 0.0, 1.0]).unwrap();
        let q = TextQuery::new("q", "a person").unwrap();
        let s = score_gallery(&g, &q, &texts, &crops).unwrap();
        // |q| = sqrt 2; c1: 3/(3 sqrt2), c2: 4/(5 sqrt2), c3: 2/(2 sqrt2)
        let r2 = 2f64.sqrt();
        let expected = [1.0 / r2, 4.0 / (5.0 * r2), 1.0 / r2];
        for (got, want) in s.iter().zip(expected) {
            assert!((got.score - want).abs() < 1e-9);
        }
        assert_eq!(s.iter().map(|c| c.crop_id.as_str()).collect::<Vec<_>>(), ["c1", "c2", "c3"]);
    }

    #[test]
    fn identical_vector_scores_one() {
        let g = gallery_with(&[("c1", "i1", BBox::new(0, 0, 1, 1))]);
        let mut crops = EmbeddingMatrix::new(2).unwrap();
        crops.push("c1", &[0.3, 0.4]).unwrap();
        let mut texts = EmbeddingMatrix::new(2).unwrap();
        texts.push("q", &[0.3, 0.4]).unwrap();
        let q = TextQuery::new("q", "t").unwrap();
        let s = score_gallery(&g, &q, &texts, &crops).unwrap();
        assert!((s[0].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn scoring_empty_and_missing() {
        let empty = Gallery::default();
        let mut texts = EmbeddingMatrix::new(2).unwrap();
        texts.push("q", &[1.0, 0.0]).unwrap();
        let crops = EmbeddingMatrix::new(2).unwrap();
        let q = TextQuery::new("q", "t").unwrap();
        assert!(score_gallery(&empty, &q, &texts, &crops).unwrap().is_empty());

        let g = gallery_with(&[("c1", "i1", BBox::new(0, 0, 1, 1))]);
        assert!(matches!(
            score_gallery(&g, &q, &texts, &crops),
            Err(RetrievalError::MissingCropEmbedding(id)) if id == "c1"
        ));
        let other = TextQuery::new("other", "t").unwrap();
        assert!(matches!(
            score_gallery(&g, &other, &texts, &crops),
            Err(RetrievalError::MissingTextEmbedding(_))
        ));
        assert!(matches!(TextQuery::new("x", "  "), Err(RetrievalError::EmptyText)));
    }

    #[test]
    fn map_to_scene_examples() {
        let b1 = BBox::new(1, 2, 3, 4);
        let b2 = BBox::new(10, 20, 30, 40);
        let g = gallery_with(&[("c1", "img7", b1), ("c2", "img7", b2)]);
        let one = map_to_scene(&[sc("c1", 0.9)], &g).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!((one[0].index, one[0].image.image_id.as_str(), one[0].bbox), (1, "img7", b1));

        let two = map_to_scene(&[sc("c2", 0.9), sc("c1", 0.8)], &g).unwrap();
        assert_eq!(two[0].index, 1);
        assert_eq!(two[1].index, 2);
        assert_eq!(two[0].crop_id, "c2");
        assert_eq!(two[0].bbox, b2);
        assert_eq!(two[0].image, two[1].image);

        let err = map_to_scene(&[sc("gone", 0.1)], &g).unwrap_err();
        assert!(err.to_string().contains("dangling crop_id"));
    }

    fn score_list() -> impl Strategy<Value = Vec<ScoredCandidate>> {
        // coarse score grid to force plenty of ties
        prop::collection::vec(0i32..20, 0..300).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, s)| sc(&format!("crop{:04}", (i * 7919) % 10007), f64::from(s) / 19.0))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn top_k_is_sorted_prefix(scores in score_list(), k in 1usize..320) {
            let mut oracle = scores.clone();
            oracle.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap().then(a.crop_id.cmp(&b.crop_id)));
            oracle.truncate(k);
            prop_assert_eq!(top_k(&scores, k).candidates, oracle);
        }

        #[test]
        fn top_k_monotone_containment(scores in score_list(), k1 in 1usize..100, extra in 0usize..100) {
            let small = top_k(&scores, k1);
            let large = top_k(&scores, k1 + extra);
            prop_assert!(small.crop_ids().all(|id| large.crop_ids().any(|x| x == id)));
        }

        #[test]
        fn positive_rescale_keeps_order(
            rows in prop::collection::vec(prop::collection::vec(-1.0f32..1.0, 6), 1..60),
            query in prop::collection::vec(-1.0f32..1.0, 6),
            exp in -10i32..10,
        ) {
            prop_assume!(query.iter().any(|x| x.abs() > 1e-3));
            prop_assume!(rows.iter().all(|r| r.iter().any(|x| x.abs() > 1e-3)));
            let spec: Vec<(String, String, BBox)> = (0..rows.len())
                .map(|i| (format!("c{i:03}"), "img".to_string(), BBox::new(0, 0, 1, 1)))
                .collect();
            let spec_ref: Vec<(&str, &str, BBox)> =
                spec.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), *c)).collect();
            let g = gallery_with(&spec_ref);
            let mut crops = EmbeddingMatrix::new(6).unwrap();
            for (i, r) in rows.iter().enumerate() {
                crops.push(format!("c{i:03}"), r).unwrap();
            }
            // powers of two scale exactly in f32
            let lambda = 2f32.powi(exp);
            let scaled: Vec<f32> = query.iter().map(|x| x * lambda).collect();
            let base = score_crops(&g, &query, &crops).unwrap();
            let resc = score_crops(&g, &scaled, &crops).unwrap();
            let k = rows.len();
            let (a, b) = (top_k(&base, k), top_k(&resc, k));
            prop_assert_eq!(ids(&a), ids(&b));
        }

        #[test]
        fn map_to_scene_never_reorders(n in 1usize..30) {
            let spec: Vec<(String, String, BBox)> = (0..n)
                .map(|i| (format!("c{i}"), format!("img{}", i % 3), BBox::new(0, 0, 1 + i as u32, 1)))
                .collect();
            let spec_ref: Vec<(&str, &str, BBox)> =
                spec.iter().map(|(a, b, c)| (a.as_str(), b.as_str(), *c)).collect();
            let g = gallery_with(&spec_ref);
            let cands: Vec<ScoredCandidate> = (0..n).rev().map(|i| sc(&format!("c{i}"), i as f64)).collect();
            let mapped = map_to_scene(&cands, &g).unwrap();
            prop_assert_eq!(mapped.len(), n);
            for (i, (m, c)) in mapped.iter().zip(&cands).enumerate() {
                prop_assert_eq!(m.index, i + 1);
                prop_assert_eq!(&m.crop_id, &c.crop_id);
            }
        }
    }
}
