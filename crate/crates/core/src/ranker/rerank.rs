use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::parse::{parse_ranking, Permutation};
use super::prompt::{build_prompt, PromptVariant};
use super::Ranker;
use crate::coarse::SceneCandidate;

/// Final ranking of one query over the whole gallery.
///
/// Only the first `k` positions can differ from the coarse ranking.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankedResult {
    pub query_id: String,
    /// Crop ids, best first.
    pub final_order: Vec<String>,
    pub rerank_applied: bool,
    #[serde(default)]
    pub raw_ranker_text: String,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RerankError {
    #[error("permutation covers {perm} candidates but k is {k}")]
    PermutationLength { perm: usize, k: usize },
    #[error("k = {k} exceeds the coarse ranking length {coarse}")]
    KTooLarge { k: usize, coarse: usize },
}

/// Reorders the first `k` entries of `coarse` by `perm`; the tail is untouched.
pub fn apply_rerank<T: Clone>(coarse: &[T], perm: &Permutation, k: usize) -> Result<Vec<T>, RerankError> {
    if perm.len() != k {
        return Err(RerankError::PermutationLength { perm: perm.len(), k });
    }
    if k > coarse.len() {
        return Err(RerankError::KTooLarge {
            k,
            coarse: coarse.len(),
        });
    }
    let mut out = Vec::with_capacity(coarse.len());
    out.extend(perm.as_slice().iter().map(|&m| coarse[m - 1].clone()));
    out.extend_from_slice(&coarse[k..]);
    Ok(out)
}

/// Everything [`rank_with_fallback`] needs for one query.
#[derive(Debug, Clone, Copy)]
pub struct RerankInput<'a> {
    pub query_id: &'a str,
    pub text: &'a str,
    pub variant: PromptVariant,
    /// Top-K candidates mapped to their scenes, in coarse order.
    pub scene_candidates: &'a [SceneCandidate],
    /// Full coarse ranking (crop ids); its prefix matches `scene_candidates`.
    pub coarse: &'a [String],
    /// Extra attempts after a failed call or unparsable answer.
    pub retries: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankOutcome {
    pub result: RankedResult,
    pub ranker_calls: usize,
    /// Why the coarse order was kept, when it was.
    pub fallback_reason: Option<String>,
}

/// Runs the ranker over the candidates and merges its answer.
///
/// Never fails: client errors, timeouts and unparsable output all degrade to
/// the coarse order with `rerank_applied = false`.
pub fn rank_with_fallback(client: &dyn Ranker, input: RerankInput<'_>) -> RerankOutcome {
    let k = input.scene_candidates.len();
    let fallback = |raw: String, calls: usize, reason: String| {
        log::debug!("query {}: keeping coarse order: {reason}", input.query_id);
        RerankOutcome {
            result: RankedResult {
                query_id: input.query_id.to_string(),
                final_order: input.coarse.to_vec(),
                rerank_applied: false,
                raw_ranker_text: raw,
            },
            ranker_calls: calls,
            fallback_reason: Some(reason),
        }
    };

    let prompt = match build_prompt(input.variant, input.scene_candidates, input.text) {
        Ok(p) => p,
        Err(e) => return fallback(String::new(), 0, e.to_string()),
    };
    if k > input.coarse.len() {
        let reason = RerankError::KTooLarge {
            k,
            coarse: input.coarse.len(),
        };
        return fallback(String::new(), 0, reason.to_string());
    }

    let mut calls = 0;
    let mut last_raw = String::new();
    let mut last_reason = String::new();
    for _ in 0..=input.retries {
        calls += 1;
        match client.rank(&prompt) {
            Err(e) => {
                last_raw.clear();
                last_reason = e.to_string();
            }
            Ok(raw) => match parse_ranking(&raw, k) {
                Ok(perm) => {
                    let final_order =
                        apply_rerank(input.coarse, &perm, k).expect("k checked against coarse length");
                    return RerankOutcome {
                        result: RankedResult {
                            query_id: input.query_id.to_string(),
                            final_order,
                            rerank_applied: true,
                            raw_ranker_text: raw,
                        },
                        ranker_calls: calls,
                        fallback_reason: None,
                    };
                }
                Err(e) => {
                    last_reason = e.to_string();
                    last_raw = raw;
                }
            },
        }
    }
    fallback(last_raw, calls, last_reason)
}
