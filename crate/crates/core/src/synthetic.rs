//! Synthetic galleries with a controlled coarse rank for every target.
//!
//! Each query owns one axis `u_q` of the embedding space and a group of crops.
//! A group crop is `a * u_q + sqrt(1 - a^2) * n` for a random unit vector `n`
//! in the shared noise dimensions, so its score against the query is exactly
//! `a` and every crop outside the group scores 0. Distractors get
//! `a = 0.9 - 0.01 j`; the target's `a` is slotted in so that exactly
//! `rank - 1` distractors beat it.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::coarse::{map_to_scene, QueryRecord, Target};
use crate::embedding::{save_embeddings, EmbeddingError, EmbeddingMatrix};
use crate::gallery::{save_gallery, BBox, Gallery, GalleryImage, IngestError, KeypointFlags, PersonCrop};
use crate::pipeline::{Pipeline, PipelineError};
use crate::ranker::mock::ScriptedEntry;
use crate::ranker::{build_prompt, Ranker};

const NOISE_DIMS: usize = 16;
const IMAGE_W: u32 = 400;
const IMAGE_H: u32 = 200;
const CROP_W: u32 = 80;
const CROP_H: u32 = 180;

const ADJECTIVES: &[&str] = &["tall", "short", "young", "elderly", "slim", "broad-shouldered"];
const CLOTHES: &[&str] = &[
    "a red jacket",
    "a blue hoodie",
    "a grey coat",
    "a white shirt",
    "a black dress",
    "a green sweater",
];
const PLACES: &[&str] = &[
    "next to a bus stop",
    "in front of a cafe",
    "near a crosswalk",
    "beside a parked bicycle",
    "under a shop awning",
    "by a fountain",
];

#[derive(Debug, Error)]
pub enum SyntheticError {
    #[error("target ranks must be at least 1")]
    ZeroRank,
    #[error("crops_per_image must be between 1 and {max}")]
    CropsPerImage { max: u32 },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    /// Coarse rank (1-based) of each query's target.
    pub target_ranks: Vec<usize>,
    /// Crops per query group; raised to the target rank when smaller.
    pub group_size: usize,
    pub crops_per_image: u32,
    pub seed: u64,
}

impl SyntheticConfig {
    /// 30% of targets at rank 1, 60% spread over ranks 2..=10, 10% at rank 30.
    pub fn sweep(queries: usize, seed: u64) -> Self {
        let target_ranks = (0..queries)
            .map(|i| match i % 10 {
                0..=2 => 1,
                9 => 30,
                j => 2 + (i / 10 + j) % 9,
            })
            .collect();
        Self {
            target_ranks,
            group_size: 12,
            crops_per_image: 4,
            seed,
        }
    }

    /// Small benchmark: 25 queries, coarse R@1 60%, R@5 80%, R@10 88%.
    pub fn benchmark(seed: u64) -> Self {
        let mut target_ranks = vec![1; 15];
        target_ranks.extend([2, 3, 4, 5, 2, 7, 9, 14, 30, 60]);
        Self {
            target_ranks,
            group_size: 12,
            crops_per_image: 4,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub gallery: Arc<Gallery>,
    pub crop_embeddings: EmbeddingMatrix,
    pub text_embeddings: EmbeddingMatrix,
    /// One random vector per image, for dedup.
    pub scene_embeddings: EmbeddingMatrix,
    pub queries: Vec<QueryRecord>,
}

/// Paths written by [`Fixture::write`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixturePaths {
    pub manifest: PathBuf,
    pub detections: PathBuf,
    pub crop_embeddings: PathBuf,
    pub text_embeddings: PathBuf,
    pub scene_embeddings: PathBuf,
    pub queries: PathBuf,
}

impl FixturePaths {
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        Self {
            manifest: dir.join("images.jsonl"),
            detections: dir.join("detections.jsonl"),
            crop_embeddings: dir.join("crops.emb"),
            text_embeddings: dir.join("texts.emb"),
            scene_embeddings: dir.join("scenes.emb"),
            queries: dir.join("queries.jsonl"),
        }
    }
}

fn unit_noise(rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..NOISE_DIMS).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-3 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn describe(rng: &mut ChaCha8Rng, q: usize) -> String {
    let pick = |rng: &mut ChaCha8Rng, xs: &[&'static str]| xs[rng.random_range(0..xs.len())];
    format!(
        "A {} person wearing {} standing {}, case {q}.",
        pick(rng, ADJECTIVES),
        pick(rng, CLOTHES),
        pick(rng, PLACES)
    )
}

/// Scores of a group: distractors first, then the target.
fn group_scores(rank: usize, size: usize) -> (Vec<f64>, f64) {
    let distractors: Vec<f64> = (0..size - 1).map(|j| 0.9 - 0.01 * j as f64).collect();
    let target = if rank == 1 {
        0.95
    } else {
        distractors[rank - 2] - 0.005
    };
    (distractors, target)
}

pub fn generate(config: &SyntheticConfig) -> Result<Fixture, SyntheticError> {
    if config.target_ranks.contains(&0) {
        return Err(SyntheticError::ZeroRank);
    }
    let max_per_image = IMAGE_W / CROP_W;
    if config.crops_per_image == 0 || config.crops_per_image > max_per_image {
        return Err(SyntheticError::CropsPerImage { max: max_per_image });
    }
    let n_queries = config.target_ranks.len();
    let dim = n_queries + NOISE_DIMS;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut images = Vec::new();
    let mut crops = Vec::new();
    let mut crop_embs = EmbeddingMatrix::new(dim)?;
    let mut text_embs = EmbeddingMatrix::new(dim)?;
    let mut queries = Vec::new();
    let per_image = config.crops_per_image as usize;

    for (q, &rank) in config.target_ranks.iter().enumerate() {
        let size = config.group_size.max(rank).max(1);
        let (distractors, target_score) = group_scores(rank, size);
        // Shuffle slot assignment so targets are not always in the same place.
        let mut slots: Vec<usize> = (0..size).collect();
        for i in (1..slots.len()).rev() {
            slots.swap(i, rng.random_range(0..=i));
        }
        let target_slot = slots[size - 1];
        for img in 0..size.div_ceil(per_image) {
            images.push(GalleryImage {
                image_id: format!("q{q:04}_img{img:02}"),
                uri: format!("synthetic/q{q:04}_img{img:02}.jpg"),
                width: IMAGE_W,
                height: IMAGE_H,
            });
        }
        let mut target = None;
        for (member, &slot) in slots.iter().enumerate() {
            let score = distractors.get(member).copied().unwrap_or(target_score);
            let image_id = format!("q{q:04}_img{:02}", slot / per_image);
            let bbox = BBox::new((slot % per_image) as u32 * (CROP_W + 10), 10, CROP_W, CROP_H);
            let crop_id = format!("q{q:04}_c{slot:02}");
            let noise = unit_noise(&mut rng);
            let rest = (1.0 - score * score).sqrt();
            let mut v = vec![0f32; dim];
            v[q] = score as f32;
            for (d, n) in noise.iter().enumerate() {
                v[n_queries + d] = (rest * n) as f32;
            }
            crop_embs.push(crop_id.clone(), &v)?;
            if slot == target_slot {
                target = Some(Target {
                    image_id: image_id.clone(),
                    bbox,
                });
            }
            crops.push(PersonCrop {
                crop_id,
                source_image_id: image_id,
                bbox,
                confidence: 0.99,
                keypoints: KeypointFlags::ALL,
            });
        }
        let query_id = format!("q{q:04}");
        let mut axis = vec![0f32; dim];
        axis[q] = 1.0;
        text_embs.push(query_id.clone(), &axis)?;
        queries.push(QueryRecord {
            query_id,
            text: describe(&mut rng, q),
            appearance_text: None,
            gt: target.expect("every group has a target"),
        });
    }
    crops.sort_by(|a, b| a.crop_id.cmp(&b.crop_id));
    let mut scene_embs = EmbeddingMatrix::new(NOISE_DIMS)?;
    for image in &images {
        let v: Vec<f32> = unit_noise(&mut rng).into_iter().map(|x| x as f32).collect();
        scene_embs.push(image.image_id.clone(), &v)?;
    }
    let gallery = Gallery::new(images, crops).expect("synthetic gallery is consistent");
    Ok(Fixture {
        gallery: Arc::new(gallery),
        crop_embeddings: crop_embs,
        text_embeddings: text_embs,
        scene_embeddings: scene_embs,
        queries,
    })
}

impl Fixture {
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<FixturePaths, SyntheticError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| SyntheticError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let paths = FixturePaths::in_dir(dir);
        save_gallery(&self.gallery, &paths.manifest, &paths.detections)?;
        save_embeddings(&self.crop_embeddings, &paths.crop_embeddings)?;
        save_embeddings(&self.text_embeddings, &paths.text_embeddings)?;
        save_embeddings(&self.scene_embeddings, &paths.scene_embeddings)?;
        let lines: String = self
            .queries
            .iter()
            .map(|q| serde_json::to_string(q).expect("query records serialize") + "\n")
            .collect();
        fs::write(&paths.queries, lines).map_err(|source| SyntheticError::Io {
            path: paths.queries.clone(),
            source,
        })?;
        Ok(paths)
    }
}

/// Builds the prompt each query would send and records `responder`'s reply,
/// producing a script a [`crate::ranker::mock::ScriptedRanker`] can replay.
pub fn record_responses(
    pipeline: &Pipeline,
    records: &[QueryRecord],
    responder: &dyn Ranker,
) -> Result<Vec<ScriptedEntry>, SyntheticError> {
    let settings = pipeline.settings();
    let mut entries = Vec::with_capacity(records.len());
    for stage in pipeline.coarse_all(records)? {
        let k = settings.k.min(stage.ranking.len());
        let scene = map_to_scene(&stage.ranking[..k], pipeline.gallery()).map_err(PipelineError::from)?;
        let response = match build_prompt(settings.variant, &scene, &stage.query.text) {
            Ok(bundle) => responder.rank(&bundle).unwrap_or_default(),
            Err(_) => String::new(),
        };
        entries.push(ScriptedEntry {
            query: stage.query.text.clone(),
            response,
        });
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ranker::mock::IdentityRanker;
    use crate::pipeline::PipelineSettings;

    #[test]
    fn targets_land_at_requested_ranks() {
        let config = SyntheticConfig {
            target_ranks: vec![1, 2, 5, 13],
            group_size: 6,
            crops_per_image: 4,
            seed: 3,
        };
        let fx = generate(&config).unwrap();
        let p = Pipeline::new(
            fx.gallery.clone(),
            &fx.crop_embeddings,
            &fx.text_embeddings,
            Arc::new(IdentityRanker),
            PipelineSettings::default(),
        )
        .unwrap();
        for (record, &want) in fx.queries.iter().zip(&config.target_ranks) {
            let stage = p.coarse(&record.to_query().unwrap()).unwrap();
            let rank = stage
                .ranking
                .iter()
                .position(|c| {
                    let crop = fx.gallery.crop(&c.crop_id).unwrap();
                    crate::eval::is_match(crop, &record.gt, 0.5)
                })
                .unwrap()
                + 1;
            assert_eq!(rank, want, "{}", record.query_id);
        }
    }

    #[test]
    fn generation_is_seeded() {
        let a = generate(&SyntheticConfig::benchmark(1)).unwrap();
        let b = generate(&SyntheticConfig::benchmark(1)).unwrap();
        assert_eq!(a.crop_embeddings, b.crop_embeddings);
        assert_eq!(a.queries, b.queries);
        let texts: std::collections::HashSet<_> = a.queries.iter().map(|q| &q.text).collect();
        assert_eq!(texts.len(), a.queries.len());
    }

    #[test]
    fn sweep_rank_mix() {
        let c = SyntheticConfig::sweep(200, 0);
        let at = |r: usize| c.target_ranks.iter().filter(|&&x| x == r).count();
        assert_eq!(at(1), 60);
        assert_eq!(at(30), 20);
        assert!(c.target_ranks.iter().all(|&r| r == 30 || r <= 10));
    }
}
