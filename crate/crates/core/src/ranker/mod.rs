//! Scene-aware re-ranking.
//!
//! The top-K crops from the coarse stage are mapped back to their full scenes,
//! rendered into a multimodal prompt, and sent to an external vision-language
//! ranker. The ranker answers with a bracketed list of 1-based indices, which
//! is parsed, repaired into a valid permutation and merged over the top-K
//! prefix of the coarse ranking:
//!
//! ```text
//! SceneCandidates -> build_prompt -> Ranker::rank -> parse_ranking -> apply_rerank
//!                                         |               |
//!                                         +-- error ------+--> coarse order
//! ```
//!
//! Everything except [`Ranker`] implementations is pure.

pub mod mock;
mod parse;
mod prompt;
mod rerank;
pub mod wire;

use std::time::Duration;

use thiserror::Error;

pub use parse::{extract_integer_list, parse_ranking, repair_ranking, ParseFailure, Permutation, PermutationError};
pub use prompt::{
    build_description_prompt, build_prompt, extract_query_text, instruction_text, Attachment, Overlay,
    PromptBundle, PromptError, PromptVariant, DESCRIPTION_PROMPT, IMAGE_PLACEHOLDER, INSTRUCTION_TEMPLATE,
};
pub use rerank::{apply_rerank, rank_with_fallback, RankedResult, RerankError, RerankInput, RerankOutcome};

pub const DEFAULT_MAX_OUTPUT_TOKENS: u32 = 128;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RankerError {
    #[error("ranker timed out")]
    Timeout,
    #[error("ranker transport error: {0}")]
    Transport(String),
    #[error("ranker returned status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("invalid ranker response: {0}")]
    InvalidResponse(String),
}

/// A vision-language ranker. Given a prompt, returns the model's raw text.
///
/// Deterministic implementations must return identical text for identical
/// prompts.
pub trait Ranker: Send + Sync {
    fn rank(&self, prompt: &PromptBundle) -> Result<String, RankerError>;
}

impl<R: Ranker + ?Sized> Ranker for std::sync::Arc<R> {
    fn rank(&self, prompt: &PromptBundle) -> Result<String, RankerError> {
        (**self).rank(prompt)
    }
}

impl<R: Ranker + ?Sized> Ranker for &R {
    fn rank(&self, prompt: &PromptBundle) -> Result<String, RankerError> {
        (**self).rank(prompt)
    }
}

/// Connection settings for a remote ranker. Decoding is always deterministic
/// (temperature 0).
#[derive(Debug, Clone, PartialEq)]
pub struct RankerConfig {
    pub endpoint: String,
    pub model: String,
    pub max_output_tokens: u32,
    pub timeout: Duration,
}

impl RankerConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            max_output_tokens: DEFAULT_MAX_OUTPUT_TOKENS,
            timeout: Duration::from_secs(60),
        }
    }
}
