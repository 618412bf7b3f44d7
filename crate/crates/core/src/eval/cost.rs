//! Per-query time model for the retrieval strategies.
//!
//! `mu_s` and `mu_m` are time units per image for the appearance model and the
//! vision-language model. Over a gallery of `n` crops:
//!
//! | mode | total |
//! |---|---|
//! | two-stage | `n * mu_s + k * mu_m` |
//! | gallery-wide MLLM | `n * mu_m + k * mu_m` |
//! | gallery-wide MLLM, batched tail | `n * mu_m + m * mu_m` |
//! | appearance only | `n * mu_s` |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CostModelError {
    #[error("{0} must be a finite, nonnegative number")]
    Negative(&'static str),
    #[error("k ({k}) exceeds gallery size n ({n})")]
    KExceedsN { k: u64, n: u64 },
    #[error("unknown cost mode {0:?}")]
    UnknownMode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub mu_s: f64,
    pub mu_m: f64,
    pub n: u64,
    pub k: u64,
    /// Candidate set size of a gallery-wide MLLM ranking pass.
    pub m: u64,
}

impl CostModel {
    pub fn new(mu_s: f64, mu_m: f64, n: u64, k: u64, m: u64) -> Result<Self, CostModelError> {
        if !(mu_s.is_finite() && mu_s >= 0.0) {
            return Err(CostModelError::Negative("mu_s"));
        }
        if !(mu_m.is_finite() && mu_m >= 0.0) {
            return Err(CostModelError::Negative("mu_m"));
        }
        if k > n {
            return Err(CostModelError::KExceedsN { k, n });
        }
        Ok(Self { mu_s, mu_m, n, k, m })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostMode {
    TwoStage,
    GalleryWideMllm,
    /// Gallery-wide MLLM with the ranking tail sized by `m` instead of `k`.
    GalleryWideMllmBatched,
    DomainOnly,
}

impl CostMode {
    pub const ALL: [CostMode; 4] = [
        CostMode::TwoStage,
        CostMode::GalleryWideMllm,
        CostMode::GalleryWideMllmBatched,
        CostMode::DomainOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CostMode::TwoStage => "two_stage",
            CostMode::GalleryWideMllm => "gallery_wide_mllm",
            CostMode::GalleryWideMllmBatched => "gallery_wide_mllm_batched",
            CostMode::DomainOnly => "domain_only",
        }
    }
}

impl fmt::Display for CostMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CostMode {
    type Err = CostModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CostMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| CostModelError::UnknownMode(s.to_string()))
    }
}

pub fn estimate_cost(cm: &CostModel, mode: CostMode) -> f64 {
    let (n, k, m) = (cm.n as f64, cm.k as f64, cm.m as f64);
    match mode {
        CostMode::TwoStage => n * cm.mu_s + k * cm.mu_m,
        CostMode::GalleryWideMllm => n * cm.mu_m + k * cm.mu_m,
        CostMode::GalleryWideMllmBatched => n * cm.mu_m + m * cm.mu_m,
        CostMode::DomainOnly => n * cm.mu_s,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let cm = CostModel::new(1.0, 100.0, 1000, 10, 50).unwrap();
        assert_eq!(estimate_cost(&cm, CostMode::TwoStage), 2000.0);
        assert_eq!(estimate_cost(&cm, CostMode::GalleryWideMllm), 101000.0);
        assert_eq!(estimate_cost(&cm, CostMode::GalleryWideMllmBatched), 105000.0);
        assert_eq!(estimate_cost(&cm, CostMode::DomainOnly), 1000.0);

        let free_mllm = CostModel::new(1.5, 0.0, 1000, 10, 0).unwrap();
        assert_eq!(estimate_cost(&free_mllm, CostMode::TwoStage), 1500.0);
    }

    #[test]
    fn validation() {
        assert!(CostModel::new(-1.0, 1.0, 10, 1, 1).is_err());
        assert!(CostModel::new(1.0, f64::NAN, 10, 1, 1).is_err());
        assert_eq!(
            CostModel::new(1.0, 1.0, 5, 10, 1),
            Err(CostModelError::KExceedsN { k: 10, n: 5 })
        );
        assert_eq!("two_stage".parse::<CostMode>().unwrap(), CostMode::TwoStage);
        assert!("fast".parse::<CostMode>().is_err());
    }
}
