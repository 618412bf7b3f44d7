use std::sync::Arc;

use reqwest::{Client, StatusCode};
use sap::service::{router, QueryReply, ServiceState};
use sap_core::coarse::TextQuery;
use sap_core::ranker::mock::OracleRanker;
use sap_core::synthetic::{generate, SyntheticConfig};
use sap_core::{Pipeline, PipelineSettings};
use serde_json::{json, Value};

async fn start(state: Arc<ServiceState>) -> String {
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(state)).await.unwrap() });
    format!("http://{addr}")
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn serves_queries_once_loaded() {
    let fx = generate(&SyntheticConfig::benchmark(1)).unwrap();
    let oracle = Arc::new(OracleRanker::from_queries(&fx.queries, &fx.gallery, 0.5));
    let pipeline = Pipeline::new(
        fx.gallery.clone(),
        &fx.crop_embeddings,
        &fx.text_embeddings,
        oracle,
        PipelineSettings::default(),
    )
    .unwrap();

    let state = ServiceState::new(2);
    let base = start(state.clone()).await;
    let http = Client::new();
    let query = |body: Value| http.post(format!("{base}/v1/query")).json(&body).send();

    let health = http.get(format!("{base}/health")).send().await.unwrap();
    assert_eq!(health.status(), StatusCode::SERVICE_UNAVAILABLE);
    assert_eq!(health.json::<Value>().await.unwrap()["status"], "loading");
    let early = query(json!({"text": "anyone"})).await.unwrap();
    assert_eq!(early.status(), StatusCode::SERVICE_UNAVAILABLE);

    let record = fx.queries[3].clone();
    let coarse = pipeline
        .coarse(&TextQuery::new("probe", record.text.clone()).unwrap().with_embedding_key(record.query_id.clone()))
        .unwrap();
    state.set_pipeline(Arc::new(pipeline));

    let health: Value = http.get(format!("{base}/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["images"], fx.gallery.images().len());
    assert_eq!(health["crops"], fx.gallery.crops().len());

    // K=1 leaves nothing to reorder: the answer is the coarse top-1.
    let resp = query(json!({"text": record.text, "appearance_text": record.query_id, "k": 1}))
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let reply: QueryReply = resp.json().await.unwrap();
    assert_eq!(reply.results.len(), 1);
    assert_eq!(reply.results[0].crop_id, coarse.ranking[0].crop_id);
    assert_eq!(reply.results[0].rank, 1);
    assert!((reply.results[0].score - coarse.ranking[0].score).abs() < 1e-12);

    // Default K with the oracle: top-1 is the target's image whenever coarse had it.
    let reply: QueryReply = query(json!({"text": record.text, "appearance_text": record.query_id, "variant": "np"}))
        .await
        .unwrap()
        .json()
        .await
        .unwrap();
    assert!(reply.rerank_applied);
    assert_eq!(reply.results.len(), 10);
    let ranks: Vec<usize> = reply.results.iter().map(|h| h.rank).collect();
    assert_eq!(ranks, (1..=10).collect::<Vec<_>>());
    let in_top10 = coarse.ranking[..10]
        .iter()
        .any(|c| fx.gallery.crop(&c.crop_id).unwrap().source_image_id == record.gt.image_id);
    if in_top10 {
        assert_eq!(reply.results[0].image_id, record.gt.image_id);
    }

    let malformed = http
        .post(format!("{base}/v1/query"))
        .header("content-type", "application/json")
        .body("{not json")
        .send()
        .await
        .unwrap();
    assert_eq!(malformed.status(), StatusCode::BAD_REQUEST);
    for bad in [
        json!({"text": record.text, "appearance_text": record.query_id, "variant": "xyz"}),
        json!({"text": record.text, "appearance_text": record.query_id, "k": 0}),
        json!({"text": record.text, "colour": "red"}),
        json!({"text": ""}),
    ] {
        assert_eq!(query(bad.clone()).await.unwrap().status(), StatusCode::BAD_REQUEST, "{bad}");
    }
    let unknown = query(json!({"text": "nobody embedded this"})).await.unwrap();
    assert_eq!(unknown.status(), StatusCode::UNPROCESSABLE_ENTITY);
    assert!(unknown.json::<Value>().await.unwrap()["error"].is_string());
}
