//! Picks the ranker a command talks to: a remote endpoint or an in-process
//! mock.

use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Arc;

use sap_core::coarse::QueryRecord;
use sap_core::ranker::mock::{FailingRanker, IdentityRanker, NoisyOracleRanker, OracleRanker, ReverseRanker, ScriptedRanker};
use sap_core::{Gallery, Ranker, RankerError};
use thiserror::Error;

use crate::config::PipelineConfig;
use crate::http_ranker::HttpRanker;

#[derive(Debug, Error)]
pub enum RankerSetupError {
    #[error("unknown mock {0:?} (expected identity, reverse, oracle, noisy:<p>[:<seed>], scripted:<path> or fail)")]
    UnknownMock(String),
    #[error("mock {0} needs a queries file with ground truth")]
    NeedsQueries(&'static str),
    #[error("loading scripted responses from {path}: {source}")]
    Script { path: PathBuf, source: std::io::Error },
    #[error("no ranker configured: pass --endpoint, --mock, or set SAP_ENDPOINT")]
    Unconfigured,
    #[error(transparent)]
    Client(#[from] RankerError),
}

/// In-process ranker selected with `--mock`.
#[derive(Debug, Clone, PartialEq)]
pub enum MockSpec {
    Identity,
    Reverse,
    Oracle,
    Noisy { p: f64, seed: u64 },
    Scripted(PathBuf),
    Fail,
}

impl FromStr for MockSpec {
    type Err = RankerSetupError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let unknown = || RankerSetupError::UnknownMock(s.to_string());
        let (head, rest) = s.split_once(':').map_or((s, None), |(h, r)| (h, Some(r)));
        match (head, rest) {
            ("identity", None) => Ok(MockSpec::Identity),
            ("reverse", None) => Ok(MockSpec::Reverse),
            ("oracle", None) => Ok(MockSpec::Oracle),
            ("fail", None) => Ok(MockSpec::Fail),
            ("scripted", Some(path)) if !path.is_empty() => Ok(MockSpec::Scripted(path.into())),
            ("noisy", Some(args)) => {
                let (p, seed) = args.split_once(':').unwrap_or((args, "0"));
                let p: f64 = p.parse().map_err(|_| unknown())?;
                let seed = seed.parse().map_err(|_| unknown())?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(unknown());
                }
                Ok(MockSpec::Noisy { p, seed })
            }
            _ => Err(unknown()),
        }
    }
}

impl MockSpec {
    pub fn build(
        &self,
        queries: Option<&[QueryRecord]>,
        gallery: &Gallery,
        iou_threshold: f64,
    ) -> Result<Arc<dyn Ranker>, RankerSetupError> {
        let oracle = |name| {
            queries
                .map(|q| OracleRanker::from_queries(q, gallery, iou_threshold))
                .ok_or(RankerSetupError::NeedsQueries(name))
        };
        Ok(match self {
            MockSpec::Identity => Arc::new(IdentityRanker),
            MockSpec::Reverse => Arc::new(ReverseRanker),
            MockSpec::Fail => Arc::new(FailingRanker(RankerError::Transport("mock ranker configured to fail".into()))),
            MockSpec::Oracle => Arc::new(oracle("oracle")?),
            MockSpec::Noisy { p, seed } => Arc::new(NoisyOracleRanker::new(oracle("noisy")?, *p, *seed)),
            MockSpec::Scripted(path) => Arc::new(ScriptedRanker::load(path).map_err(|source| RankerSetupError::Script {
                path: path.clone(),
                source,
            })?),
        })
    }
}

/// The configured ranker: `mock` wins over `endpoint`.
pub fn build_ranker(
    config: &PipelineConfig,
    queries: Option<&[QueryRecord]>,
    gallery: &Gallery,
) -> Result<Arc<dyn Ranker>, RankerSetupError> {
    if let Some(mock) = &config.mock {
        return mock.parse::<MockSpec>()?.build(queries, gallery, config.iou_threshold);
    }
    let rc = config.ranker_config().ok_or(RankerSetupError::Unconfigured)?;
    Ok(Arc::new(HttpRanker::new(rc)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_specs() {
        assert_eq!("identity".parse::<MockSpec>().unwrap(), MockSpec::Identity);
        assert_eq!("noisy:0.8:7".parse::<MockSpec>().unwrap(), MockSpec::Noisy { p: 0.8, seed: 7 });
        assert_eq!("noisy:0.5".parse::<MockSpec>().unwrap(), MockSpec::Noisy { p: 0.5, seed: 0 });
        assert_eq!(
            "scripted:a/b.jsonl".parse::<MockSpec>().unwrap(),
            MockSpec::Scripted("a/b.jsonl".into())
        );
        for bad in ["", "noisy:2", "noisy:x", "scripted:", "identity:1", "llm"] {
            assert!(bad.parse::<MockSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn oracle_needs_queries() {
        let g = Gallery::new(vec![], vec![]).unwrap();
        assert!(matches!(
            MockSpec::Oracle.build(None, &g, 0.5),
            Err(RankerSetupError::NeedsQueries(_))
        ));
        assert!(MockSpec::Oracle.build(Some(&[]), &g, 0.5).is_ok());
    }

    #[test]
    fn unconfigured_is_an_error() {
        let g = Gallery::new(vec![], vec![]).unwrap();
        assert!(matches!(
            build_ranker(&PipelineConfig::default(), None, &g),
            Err(RankerSetupError::Unconfigured)
        ));
    }
}
