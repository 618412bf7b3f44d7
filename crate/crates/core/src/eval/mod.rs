//! Retrieval metrics (R@k, mAP), ablation runners and the cost model.

mod ablation;
mod cost;
mod metrics;

pub use ablation::{compare_prompt_variants, sweep_candidate_size, AblationRow, AblationTable, CandidateSize};
pub use cost::{estimate_cost, CostMode, CostModel, CostModelError};
pub use metrics::{
    ap_from_rank, average_precision, evaluate, first_match_rank, iou, is_match, mean_ap_from_ranks, recall_at_k,
    recall_from_ranks, EvalError, EvalReport, GroundTruth, DEFAULT_IOU_THRESHOLD, MAP_DEPTH, REPORTED_KS,
};
