use std::sync::Arc;

use sap_core::coarse::load_queries;
use sap_core::embedding::load_embeddings;
use sap_core::eval::{compare_prompt_variants, sweep_candidate_size};
use sap_core::gallery::{load_manifest, Strictness};
use sap_core::ranker::mock::{IdentityRanker, OracleRanker, ReverseRanker, ScriptedRanker};
use sap_core::synthetic::{generate, record_responses, SyntheticConfig};
use sap_core::ranker::PromptBundle;
use sap_core::{run_benchmark, Pipeline, PipelineSettings, PromptVariant, Ranker, RankerError};

fn pipeline_from_disk(dir: &std::path::Path) -> (Pipeline, Vec<sap_core::QueryRecord>) {
    let paths = generate(&SyntheticConfig::benchmark(11)).unwrap().write(dir).unwrap();
    let gallery = load_manifest(&paths.manifest, &paths.detections, Strictness::Strict).unwrap();
    let crops = load_embeddings(&paths.crop_embeddings).unwrap();
    let texts = load_embeddings(&paths.text_embeddings).unwrap();
    let queries = load_queries(&paths.queries).unwrap();
    let p = Pipeline::new(
        Arc::new(gallery),
        &crops,
        &texts,
        Arc::new(IdentityRanker),
        PipelineSettings::default(),
    )
    .unwrap();
    (p, queries)
}

#[test]
fn fixture_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let (p, queries) = pipeline_from_disk(dir.path());
    assert_eq!(queries.len(), 25);
    let report = run_benchmark(&p, &queries).unwrap();
    assert!((report.coarse.recall(1) - 60.0).abs() < 1e-9);
    assert!((report.coarse.recall(5) - 80.0).abs() < 1e-9);
    assert!((report.coarse.recall(10) - 88.0).abs() < 1e-9);
    assert_eq!(report.coarse, report.reranked);
}

#[test]
fn oracle_lifts_r1_to_r10() {
    let dir = tempfile::tempdir().unwrap();
    let (p, queries) = pipeline_from_disk(dir.path());
    let oracle = OracleRanker::from_queries(&queries, p.gallery(), 0.5);
    let report = run_benchmark(&p.with_ranker(Arc::new(oracle)), &queries).unwrap();
    assert_eq!(report.reranked.recall(1), report.coarse.recall(10));
    assert_eq!(report.reranked.recall(10), report.coarse.recall(10));
    assert!(report.delta["R@1"] > 0.0);
    assert_eq!(report.delta["R@10"], 0.0);
}

#[test]
fn reverse_ranker_keeps_r10() {
    let dir = tempfile::tempdir().unwrap();
    let (p, queries) = pipeline_from_disk(dir.path());
    let report = run_benchmark(&p.with_ranker(Arc::new(ReverseRanker)), &queries).unwrap();
    assert_eq!(report.reranked.recall(10), report.coarse.recall(10));
    assert!(report.reranked.recall(1) < report.coarse.recall(1));
}

#[test]
fn sweep_with_k1_equals_coarse() {
    let dir = tempfile::tempdir().unwrap();
    let (p, queries) = pipeline_from_disk(dir.path());
    let oracle = OracleRanker::from_queries(&queries, p.gallery(), 0.5);
    let p = p.with_ranker(Arc::new(oracle));
    let table = sweep_candidate_size(&p, &queries, &[10, 1, 5, 1]).unwrap();
    let ks: Vec<usize> = table.rows.iter().map(|r| r.setting.0).collect();
    assert_eq!(ks, [1, 5, 10]);
    for row in &table.rows {
        assert_eq!(row.report.recall(1), table.coarse.recall(row.setting.0));
    }
    assert!(sweep_candidate_size(&p, &queries, &[]).is_err());
}

#[test]
fn variant_comparison_shares_coarse_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (p, queries) = pipeline_from_disk(dir.path());
    let table = compare_prompt_variants(&p, &queries, &PromptVariant::ALL).unwrap();
    assert_eq!(table.rows.len(), 3);
    assert!(table.rows.iter().all(|r| r.report == table.coarse));
    assert!(compare_prompt_variants(&p, &queries, &[]).is_err());
}

#[test]
fn recorded_script_replays_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let (p, queries) = pipeline_from_disk(dir.path());
    let oracle = OracleRanker::from_queries(&queries, p.gallery(), 0.5);
    let script = ScriptedRanker::new(record_responses(&p, &queries, &oracle).unwrap());
    let a = run_benchmark(&p.with_ranker(Arc::new(oracle)), &queries).unwrap();
    let b = run_benchmark(&p.with_ranker(Arc::new(script)), &queries).unwrap();
    assert_eq!(a, b);
}

/// Finds the target only when boxes are spelled out in the text, and only
/// the overlay otherwise; with neither it keeps the coarse order.
struct NeedsBoxes(OracleRanker);

impl Ranker for NeedsBoxes {
    fn rank(&self, prompt: &PromptBundle) -> Result<String, RankerError> {
        if prompt.render_text().contains("<box>") {
            self.0.rank(prompt)
        } else if prompt.attachments.iter().any(|a| a.overlay.is_some()) {
            ReverseRanker.rank(prompt)
        } else {
            IdentityRanker.rank(prompt)
        }
    }
}

#[test]
fn variant_comparison_sees_prompt_differences() {
    let dir = tempfile::tempdir().unwrap();
    let (p, queries) = pipeline_from_disk(dir.path());
    let ranker = NeedsBoxes(OracleRanker::from_queries(&queries, p.gallery(), 0.5));
    let p = p.with_ranker(Arc::new(ranker));
    let table = compare_prompt_variants(&p, &queries, &[PromptVariant::Bep, PromptVariant::Np, PromptVariant::Bop]).unwrap();
    let names: Vec<String> = table.rows.iter().map(|r| r.setting.to_string()).collect();
    assert_eq!(names, ["BEP", "NP", "BOP"]);
    let (bep, np, bop) = (&table.rows[0].report, &table.rows[1].report, &table.rows[2].report);
    assert_eq!(*np, table.coarse);
    assert!(bep.recall(1) > np.recall(1));
    assert_eq!(bep.recall(1), table.coarse.recall(10));
    assert!(bop.recall(1) < np.recall(1));
    assert_eq!(bop.recall(10), np.recall(10));
}
