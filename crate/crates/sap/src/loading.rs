//! Loads the artifacts named in a [`PipelineConfig`].

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use sap_core::coarse::{load_queries, QueryRecord};
use sap_core::embedding::{load_embeddings, EmbeddingMatrix};
use sap_core::gallery::{load_manifest, Strictness};
use sap_core::{Gallery, Pipeline, Ranker};

use crate::config::PipelineConfig;
use crate::rankers::build_ranker;

fn required<'a>(path: &'a Option<PathBuf>, what: &str, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .with_context(|| format!("no {what} given: pass {flag} or set it in the config file"))
}

pub fn gallery(config: &PipelineConfig) -> Result<Gallery> {
    let manifest = required(&config.manifest, "gallery manifest", "--manifest")?;
    let detections = required(&config.detections, "detections file", "--detections")?;
    let strictness = if config.lenient {
        Strictness::Lenient
    } else {
        Strictness::Strict
    };
    Ok(load_manifest(manifest, detections, strictness)?)
}

pub fn crop_embeddings(config: &PipelineConfig) -> Result<EmbeddingMatrix> {
    let path = required(&config.crop_embeddings, "crop embeddings", "--crop-emb")?;
    load_embeddings(path).with_context(|| format!("loading {}", path.display()))
}

pub fn scene_embeddings(config: &PipelineConfig) -> Result<EmbeddingMatrix> {
    let path = required(&config.scene_embeddings, "scene embeddings", "--scene-emb")?;
    load_embeddings(path).with_context(|| format!("loading {}", path.display()))
}

pub fn text_embeddings(config: &PipelineConfig) -> Result<EmbeddingMatrix> {
    let path = required(&config.text_embeddings, "text embeddings", "--text-emb")?;
    load_embeddings(path).with_context(|| format!("loading {}", path.display()))
}

pub fn queries(config: &PipelineConfig) -> Result<Vec<QueryRecord>> {
    let path = required(&config.queries, "queries file", "--queries")?;
    Ok(load_queries(path)?)
}

/// Gallery, embeddings and ranker assembled into a pipeline. `queries` feeds
/// the oracle mocks.
pub fn pipeline(config: &PipelineConfig, queries: Option<&[QueryRecord]>) -> Result<Pipeline> {
    let gallery = gallery(config)?;
    let ranker: Arc<dyn Ranker> = build_ranker(config, queries, &gallery)?;
    pipeline_with(config, gallery, ranker)
}

pub fn pipeline_with(config: &PipelineConfig, gallery: Gallery, ranker: Arc<dyn Ranker>) -> Result<Pipeline> {
    let crops = crop_embeddings(config)?;
    let texts = text_embeddings(config)?;
    Ok(Pipeline::new(Arc::new(gallery), &crops, &texts, ranker, config.settings())?)
}
