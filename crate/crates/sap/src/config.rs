//! Pipeline configuration.
//!
//! Layering, lowest to highest priority: built-in defaults, the TOML file
//! given with `--config`, the `SAP_ENDPOINT` / `SAP_MODEL` environment
//! variables, then command-line flags.
//!
//! ```toml
//! [gallery]
//! manifest = "images.jsonl"
//! detections = "detections.jsonl"
//! lenient = false
//!
//! [embeddings]
//! crops = "crops.emb"
//! scenes = "scenes.emb"
//! texts = "texts.emb"
//!
//! [retrieval]
//! k = 10
//! variant = "bep"
//! iou_threshold = 0.5
//! dedup_threshold = 0.95
//!
//! [ranker]
//! endpoint = "http://127.0.0.1:8089/v1/rank"
//! model = "qwen2.5-vl-7b"
//! max_in_flight = 4
//! retries = 0
//! timeout_secs = 60
//! # mock = "scripted:responses.jsonl"
//! ```
//!
//! Relative paths in the file resolve against the file's directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use sap_core::gallery::DEFAULT_DEDUP_THRESHOLD;
use sap_core::pipeline::{PipelineSettings, DEFAULT_MAX_IN_FLIGHT};
use sap_core::ranker::{RankerConfig, DEFAULT_MAX_OUTPUT_TOKENS};
use sap_core::PromptVariant;
use serde::Deserialize;
use thiserror::Error;

pub const ENV_ENDPOINT: &str = "SAP_ENDPOINT";
pub const ENV_MODEL: &str = "SAP_MODEL";
pub const DEFAULT_MODEL: &str = "default";
pub const DEFAULT_TIMEOUT_SECS: u64 = 60;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parsing {path}: {source}")]
    Parse { path: PathBuf, source: toml::de::Error },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    gallery: GallerySection,
    #[serde(default)]
    embeddings: EmbeddingSection,
    #[serde(default)]
    retrieval: RetrievalSection,
    #[serde(default)]
    ranker: RankerSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct GallerySection {
    manifest: Option<PathBuf>,
    detections: Option<PathBuf>,
    lenient: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmbeddingSection {
    crops: Option<PathBuf>,
    scenes: Option<PathBuf>,
    texts: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RetrievalSection {
    k: Option<usize>,
    variant: Option<PromptVariant>,
    iou_threshold: Option<f64>,
    dedup_threshold: Option<f64>,
    queries: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RankerSection {
    endpoint: Option<String>,
    model: Option<String>,
    max_in_flight: Option<usize>,
    retries: Option<u32>,
    timeout_secs: Option<u64>,
    max_tokens: Option<u32>,
    mock: Option<String>,
}

/// Fully resolved configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub manifest: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub lenient: bool,
    pub crop_embeddings: Option<PathBuf>,
    pub scene_embeddings: Option<PathBuf>,
    pub text_embeddings: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub k: usize,
    pub variant: PromptVariant,
    pub iou_threshold: f64,
    pub dedup_threshold: f64,
    pub endpoint: Option<String>,
    pub model: String,
    pub max_in_flight: usize,
    pub retries: u32,
    pub timeout: Duration,
    pub max_tokens: u32,
    pub mock: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let s = PipelineSettings::default();
        Self {
            manifest: None,
            detections: None,
            lenient: false,
            crop_embeddings: None,
            scene_embeddings: None,
            text_embeddings: None,
            queries: None,
            k: s.k,
            variant: s.variant,
            iou_threshold: s.iou_threshold,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
            endpoint: None,
            model: DEFAULT_MODEL.into(),
            max_in_flight: DEFAULT_MAX_IN_FLIGHT,
            retries: s.retries,
            timeout: Duration::from_secs(DEFAULT_TIMEOUT_SECS),
            max_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            mock: None,
        }
    }
}

/// Flag values; `None` leaves the lower layers alone.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub manifest: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    pub lenient: Option<bool>,
    pub crop_embeddings: Option<PathBuf>,
    pub scene_embeddings: Option<PathBuf>,
    pub text_embeddings: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub k: Option<usize>,
    pub variant: Option<PromptVariant>,
    pub iou_threshold: Option<f64>,
    pub dedup_threshold: Option<f64>,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub max_in_flight: Option<usize>,
    pub retries: Option<u32>,
    pub timeout_secs: Option<u64>,
    pub mock: Option<String>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

impl PipelineConfig {
    /// Resolves all layers. `env` looks up environment variables.
    pub fn resolve(
        file: Option<&Path>,
        env: impl Fn(&str) -> Option<String>,
        flags: Overrides,
    ) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        set_opt(&mut cfg.endpoint, env(ENV_ENDPOINT).filter(|s| !s.is_empty()));
        set(&mut cfg.model, env(ENV_MODEL).filter(|s| !s.is_empty()));
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }

    /// Like [`resolve`](Self::resolve), reading the process environment.
    pub fn load(file: Option<&Path>, flags: Overrides) -> Result<Self, ConfigError> {
        Self::resolve(file, |k| std::env::var(k).ok(), flags)
    }

    fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let file: FileConfig = toml::from_str(&text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: Option<PathBuf>| p.map(|p| base.join(p));
        self.apply(Overrides {
            manifest: rel(file.gallery.manifest),
            detections: rel(file.gallery.detections),
            lenient: file.gallery.lenient,
            crop_embeddings: rel(file.embeddings.crops),
            scene_embeddings: rel(file.embeddings.scenes),
            text_embeddings: rel(file.embeddings.texts),
            queries: rel(file.retrieval.queries),
            k: file.retrieval.k,
            variant: file.retrieval.variant,
            iou_threshold: file.retrieval.iou_threshold,
            dedup_threshold: file.retrieval.dedup_threshold,
            endpoint: file.ranker.endpoint,
            model: file.ranker.model,
            max_in_flight: file.ranker.max_in_flight,
            retries: file.ranker.retries,
            timeout_secs: file.ranker.timeout_secs,
            mock: file.ranker.mock.map(|m| resolve_mock_path(&m, base)),
        });
        set(&mut self.max_tokens, file.ranker.max_tokens);
        Ok(())
    }

    fn apply(&mut self, o: Overrides) {
        set_opt(&mut self.manifest, o.manifest);
        set_opt(&mut self.detections, o.detections);
        set(&mut self.lenient, o.lenient);
        set_opt(&mut self.crop_embeddings, o.crop_embeddings);
        set_opt(&mut self.scene_embeddings, o.scene_embeddings);
        set_opt(&mut self.text_embeddings, o.text_embeddings);
        set_opt(&mut self.queries, o.queries);
        set(&mut self.k, o.k);
        set(&mut self.variant, o.variant);
        set(&mut self.iou_threshold, o.iou_threshold);
        set(&mut self.dedup_threshold, o.dedup_threshold);
        set(&mut self.model, o.model);
        set(&mut self.max_in_flight, o.max_in_flight);
        set(&mut self.retries, o.retries);
        if let Some(secs) = o.timeout_secs {
            self.timeout = Duration::from_secs(secs);
        }
        // An explicit endpoint and an explicit mock displace each other.
        if o.endpoint.is_some() {
            self.endpoint = o.endpoint;
            self.mock = None;
        }
        if o.mock.is_some() {
            self.mock = o.mock;
            self.endpoint = None;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.k == 0 {
            return Err(ConfigError::Invalid("k must be at least 1".into()));
        }
        for (name, t) in [("iou_threshold", self.iou_threshold), ("dedup_threshold", self.dedup_threshold)] {
            if !(0.0..=1.0).contains(&t) {
                return Err(ConfigError::Invalid(format!("{name} must be in [0, 1], got {t}")));
            }
        }
        if self.max_in_flight == 0 {
            return Err(ConfigError::Invalid("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn settings(&self) -> PipelineSettings {
        PipelineSettings {
            k: self.k,
            variant: self.variant,
            retries: self.retries,
            iou_threshold: self.iou_threshold,
            max_in_flight: self.max_in_flight,
        }
    }

    pub fn ranker_config(&self) -> Option<RankerConfig> {
        self.endpoint.as_ref().map(|e| RankerConfig {
            max_output_tokens: self.max_tokens,
            timeout: self.timeout,
            ..RankerConfig::new(e.clone(), self.model.clone())
        })
    }
}

/// `scripted:<path>` in a config file is relative to the file.
fn resolve_mock_path(spec: &str, base: &Path) -> String {
    match spec.split_once(':') {
        Some(("scripted", p)) if Path::new(p).is_relative() => {
            format!("scripted:{}", base.join(p).display())
        }
        _ => spec.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env(_: &str) -> Option<String> {
        None
    }

    #[test]
    fn defaults() {
        let c = PipelineConfig::resolve(None, no_env, Overrides::default()).unwrap();
        assert_eq!(c.k, 10);
        assert_eq!(c.variant, PromptVariant::Bep);
        assert_eq!(c.iou_threshold, 0.5);
        assert_eq!(c.dedup_threshold, 0.95);
        assert_eq!(c.max_in_flight, 4);
        assert_eq!(c.retries, 0);
        assert_eq!(c.max_tokens, 128);
        assert!(c.ranker_config().is_none());
    }

    #[test]
    fn layers_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sap.toml");
        fs::write(
            &path,
            "[gallery]\nmanifest = \"m.jsonl\"\n[retrieval]\nk = 5\nvariant = \"np\"\n\
             [ranker]\nendpoint = \"http://file\"\nmodel = \"file-model\"\n",
        )
        .unwrap();
        let env = |k: &str| (k == ENV_MODEL).then(|| "env-model".to_string());
        let c = PipelineConfig::resolve(Some(&path), env, Overrides::default()).unwrap();
        assert_eq!(c.k, 5);
        assert_eq!(c.variant, PromptVariant::Np);
        assert_eq!(c.model, "env-model");
        assert_eq!(c.endpoint.as_deref(), Some("http://file"));
        assert_eq!(c.manifest, Some(dir.path().join("m.jsonl")));

        let flags = Overrides {
            k: Some(3),
            model: Some("flag-model".into()),
            ..Default::default()
        };
        let c = PipelineConfig::resolve(Some(&path), env, flags).unwrap();
        assert_eq!(c.k, 3);
        assert_eq!(c.model, "flag-model");
    }

    #[test]
    fn env_endpoint_beats_file_and_mock_flag_beats_both() {
        let env = |k: &str| (k == ENV_ENDPOINT).then(|| "http://env".to_string());
        let c = PipelineConfig::resolve(None, env, Overrides::default()).unwrap();
        assert_eq!(c.endpoint.as_deref(), Some("http://env"));
        let flags = Overrides {
            mock: Some("identity".into()),
            ..Default::default()
        };
        let c = PipelineConfig::resolve(None, env, flags).unwrap();
        assert_eq!(c.endpoint, None);
        assert_eq!(c.mock.as_deref(), Some("identity"));
    }

    #[test]
    fn rejects_bad_values_and_unknown_keys() {
        let bad = Overrides {
            k: Some(0),
            ..Default::default()
        };
        assert!(PipelineConfig::resolve(None, no_env, bad).is_err());
        let bad = Overrides {
            iou_threshold: Some(1.5),
            ..Default::default()
        };
        assert!(PipelineConfig::resolve(None, no_env, bad).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sap.toml");
        fs::write(&path, "[retrieval]\nkk = 3\n").unwrap();
        assert!(matches!(
            PipelineConfig::resolve(Some(&path), no_env, Overrides::default()),
            Err(ConfigError::Parse { .. })
        ));
    }

    #[test]
    fn scripted_mock_path_is_relative_to_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sap.toml");
        fs::write(&path, "[ranker]\nmock = \"scripted:resp.jsonl\"\n").unwrap();
        let c = PipelineConfig::resolve(Some(&path), no_env, Overrides::default()).unwrap();
        assert_eq!(
            c.mock,
            Some(format!("scripted:{}", dir.path().join("resp.jsonl").display()))
        );
    }
}
