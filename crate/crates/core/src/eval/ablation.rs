//! Ablation runners: candidate-size sweep and prompt-variant comparison.
//! The coarse stage is computed once and shared by every row.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{evaluate, EvalReport, GroundTruth};
use crate::coarse::QueryRecord;
use crate::pipeline::{CoarseStage, Pipeline, PipelineError};
use crate::ranker::{PromptVariant, RankedResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow<T> {
    pub setting: T,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable<T> {
    pub coarse: EvalReport,
    pub rows: Vec<AblationRow<T>>,
}

impl<T: fmt::Display> fmt::Display for AblationTable<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{}", "setting", EvalReport::HEADER)?;
        write!(f, "{:<10}{}", "coarse", self.coarse.row())?;
        for row in &self.rows {
            write!(f, "\n{:<10}{}", row.setting.to_string(), row.report.row())?;
        }
        Ok(())
    }
}

/// Candidate-size label for sweep tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CandidateSize(pub usize);

impl fmt::Display for CandidateSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "K={}", self.0)
    }
}

fn prepare(pipeline: &Pipeline, records: &[QueryRecord]) -> Result<(GroundTruth, Vec<CoarseStage>, EvalReport), PipelineError> {
    let gt = GroundTruth::from_records(records);
    gt.validate(pipeline.gallery())?;
    let coarse = pipeline.coarse_all(records)?;
    let coarse_results: Vec<RankedResult> = coarse.iter().map(CoarseStage::as_result).collect();
    let report = evaluate(&coarse_results, &gt, pipeline.gallery(), pipeline.settings().iou_threshold)?;
    Ok((gt, coarse, report))
}

fn rerank_report(
    pipeline: &Pipeline,
    gt: &GroundTruth,
    coarse: &[CoarseStage],
    variant: PromptVariant,
    k: usize,
) -> Result<EvalReport, PipelineError> {
    let results: Vec<RankedResult> = pipeline
        .rerank_all(coarse, variant, k)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    Ok(evaluate(&results, gt, pipeline.gallery(), pipeline.settings().iou_threshold)?)
}

/// One report per distinct candidate size (ascending), everything else fixed.
pub fn sweep_candidate_size(
    pipeline: &Pipeline,
    records: &[QueryRecord],
    k_values: &[usize],
) -> Result<AblationTable<CandidateSize>, PipelineError> {
    if k_values.is_empty() || k_values.contains(&0) {
        return Err(PipelineError::InvalidSettings(
            "candidate sizes must be a non-empty list of positive integers".into(),
        ));
    }
    let (gt, coarse, coarse_report) = prepare(pipeline, records)?;
    let variant = pipeline.settings().variant;
    let rows = k_values
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .map(|k| {
            Ok(AblationRow {
                setting: CandidateSize(k),
                report: rerank_report(pipeline, &gt, &coarse, variant, k)?,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    Ok(AblationTable {
        coarse: coarse_report,
        rows,
    })
}

/// One report per prompt variant, in the order given.
pub fn compare_prompt_variants(
    pipeline: &Pipeline,
    records: &[QueryRecord],
    variants: &[PromptVariant],
) -> Result<AblationTable<PromptVariant>, PipelineError> {
    if variants.is_empty() {
        return Err(PipelineError::InvalidSettings("no prompt variants to compare".into()));
    }
    let (gt, coarse, coarse_report) = prepare(pipeline, records)?;
    let k = pipeline.settings().k;
    let rows = variants
        .iter()
        .map(|&v| {
            Ok(AblationRow {
                setting: v,
                report: rerank_report(pipeline, &gt, &coarse, v, k)?,
            })
        })
        .collect::<Result<_, PipelineError>>()?;
    Ok(AblationTable {
        coarse: coarse_report,
        rows,
    })
}
