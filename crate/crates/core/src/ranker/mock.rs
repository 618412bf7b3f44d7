//! In-process rankers for tests, ablations and offline benchmarking.
//!
//! All of them are deterministic functions of the prompt.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{PromptBundle, Ranker, RankerError};
use crate::coarse::QueryRecord;
use crate::eval::is_match;
use crate::gallery::Gallery;

/// Formats 1-based indices the way a ranker is asked to answer.
pub fn format_list(order: &[usize]) -> String {
    let items: Vec<String> = order.iter().map(ToString::to_string).collect();
    format!("[{}]", items.join(", "))
}

/// 64-bit FNV-1a; stable across platforms and releases.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Always answers with the coarse order.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRanker;

impl Ranker for IdentityRanker {
    fn rank(&self, prompt: &PromptBundle) -> Result<String, RankerError> {
        Ok(format_list(&(1..=prompt.k()).collect::<Vec<_>>()))
    }
}

/// Answers with the coarse order reversed.
#[derive(Debug, Clone, Copy, Default)]
pub struct ReverseRanker;

impl Ranker for ReverseRanker {
    fn rank(&self, prompt: &PromptBundle) -> Result<String, RankerError> {
        Ok(format_list(&(1..=prompt.k()).rev().collect::<Vec<_>>()))
    }
}

/// Fails every call with the same error.
#[derive(Debug, Clone)]
pub struct FailingRanker(pub RankerError);

impl Ranker for FailingRanker {
    fn rank(&self, _: &PromptBundle) -> Result<String, RankerError> {
        Err(self.0.clone())
    }
}

/// Knows which crops match each query and moves the first matching
/// candidate to the top. Other candidates keep their coarse order.
///
/// Queries are identified by their description text, so texts should be
/// unique within a benchmark.
#[derive(Debug, Clone, Default)]
pub struct OracleRanker {
    matches: HashMap<String, HashSet<String>>,
}

impl OracleRanker {
    pub fn new(matches: HashMap<String, HashSet<String>>) -> Self {
        Self { matches }
    }

    pub fn from_queries(records: &[QueryRecord], gallery: &Gallery, iou_threshold: f64) -> Self {
        let matches = records
            .iter()
            .map(|r| {
                let hits = gallery
                    .crops()
                    .iter()
                    .filter(|c| is_match(c, &r.gt, iou_threshold))
                    .map(|c| c.crop_id.clone())
                    .collect();
                (r.text.clone(), hits)
            })
            .collect();
        Self { matches }
    }

    /// 0-based position of the first matching candidate in the prompt.
    pub fn target_position(&self, prompt: &PromptBundle) -> Option<usize> {
        let hits = self.matches.get(&prompt.query_text)?;
        prompt.candidate_ids.iter().position(|id| hits.contains(id))
    }
}

fn promote(k: usize, pos: usize) -> Vec<usize> {
    std::iter::once(pos + 1)
        .chain((1..=k).filter(|&m| m != pos + 1))
        .collect()
}

impl Ranker for OracleRanker {
    fn rank(&self, prompt: &PromptBundle) -> Result<String, RankerError> {
        let k = prompt.k();
        let order = match self.target_position(prompt) {
            Some(pos) => promote(k, pos),
            None => (1..=k).collect(),
        };
        Ok(format_list(&order))
    }
}

/// An oracle that is right with probability `p`.
///
/// When the target is among the candidates, a per-query coin decides whether
/// it goes first. Otherwise the first slot goes to a uniformly random
/// candidate, so a wrong answer still hits the target with probability 1/K.
/// The random draws depend only on the seed and the query text, so the same
/// query behaves consistently across candidate sizes.
#[derive(Debug, Clone)]
pub struct NoisyOracleRanker {
    oracle: OracleRanker,
    p: f64,
    seed: u64,
}

impl NoisyOracleRanker {
    pub fn new(oracle: OracleRanker, p: f64, seed: u64) -> Self {
        Self { oracle, p, seed }
    }
}

impl Ranker for NoisyOracleRanker {
    fn rank(&self, prompt: &PromptBundle) -> Result<String, RankerError> {
        let k = prompt.k();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stable_hash(prompt.query_text.as_bytes()));
        let correct = rng.random::<f64>() < self.p;
        let lucky = rng.random::<f64>() * (k as f64) < 1.0;
        let other = rng.random_range(0..k.max(2) - 1);
        let order = match self.oracle.target_position(prompt) {
            Some(pos) if correct || lucky || k == 1 => promote(k, pos),
            Some(pos) => {
                // any candidate but the target
                let first = if other >= pos { other + 1 } else { other };
                promote(k, first)
            }
            None => (1..=k).collect(),
        };
        Ok(format_list(&order))
    }
}

/// One canned answer: the description it applies to and the raw reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedEntry {
    pub query: String,
    pub response: String,
}

/// Replays canned replies keyed by description text. Unknown descriptions get
/// a 404-style error.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptedRanker {
    responses: HashMap<String, String>,
}

impl ScriptedRanker {
    pub fn new(entries: impl IntoIterator<Item = ScriptedEntry>) -> Self {
        Self {
            responses: entries.into_iter().map(|e| (e.query, e.response)).collect(),
        }
    }

    /// Reads a JSON-lines file of [`ScriptedEntry`].
    pub fn load(path: impl AsRef<Path>) -> std::io::Result<Self> {
        let reader = BufReader::new(File::open(path)?);
        let mut entries = Vec::new();
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptedEntry = serde_json::from_str(&line)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn respond(&self, query_text: &str) -> Result<String, RankerError> {
        self.responses
            .get(query_text)
            .cloned()
            .ok_or_else(|| RankerError::Status {
                code: 404,
                body: "no scripted response for this description".into(),
            })
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }
}

impl Ranker for ScriptedRanker {
    fn rank(&self, prompt: &PromptBundle) -> Result<String, RankerError> {
        self.respond(&prompt.query_text)
    }
}
