//! Loopback ranker server implementing the wire contract, for tests and
//! offline runs.
//!
//! Accepts `POST /` and `POST /v1/rank`. Replies are derived only from the
//! request, so the server is deterministic.

use std::net::SocketAddr;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::post;
use axum::{Json, Router};
use sap_core::ranker::mock::{format_list, ScriptedRanker};
use sap_core::ranker::wire::{RankRequest, RankResponse};
use sap_core::RankerError;
use tokio::sync::oneshot;

#[derive(Debug, Clone)]
pub enum MockMode {
    /// `[1, 2, ..., K]`
    Identity,
    /// `[K, ..., 1]`
    Reverse,
    /// Canned replies keyed by description text; unknown ones get 404.
    Scripted(Arc<ScriptedRanker>),
    /// Every request fails with this HTTP status.
    Status(u16),
    /// A 200 whose body is not a valid response.
    Garbage,
}

impl FromStr for MockMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            None if s == "identity" => Ok(MockMode::Identity),
            None if s == "reverse" => Ok(MockMode::Reverse),
            None if s == "garbage" => Ok(MockMode::Garbage),
            Some(("scripted", path)) => ScriptedRanker::load(path)
                .map(|r| MockMode::Scripted(Arc::new(r)))
                .map_err(|e| format!("loading {path}: {e}")),
            Some(("status", code)) => code
                .parse()
                .map(MockMode::Status)
                .map_err(|_| format!("bad status code {code:?}")),
            _ => Err(format!(
                "unknown mock mode {s:?} (expected identity, reverse, garbage, status:<code> or scripted:<path>)"
            )),
        }
    }
}

#[derive(Clone)]
struct AppState {
    mode: MockMode,
    delay: Duration,
    log: Option<Arc<Mutex<Vec<RankRequest>>>>,
}

fn reply(mode: &MockMode, req: &RankRequest) -> Response {
    let k = req.image_count();
    let text = match mode {
        MockMode::Identity => format_list(&(1..=k).collect::<Vec<_>>()),
        MockMode::Reverse => format_list(&(1..=k).rev().collect::<Vec<_>>()),
        MockMode::Scripted(script) => {
            let query = req.query_text().unwrap_or_default();
            match script.respond(&query) {
                Ok(text) => text,
                Err(RankerError::Status { code, body }) => {
                    let code = StatusCode::from_u16(code).unwrap_or(StatusCode::NOT_FOUND);
                    return (code, body).into_response();
                }
                Err(e) => return (StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
            }
        }
        MockMode::Status(code) => {
            let code = StatusCode::from_u16(*code).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            return (code, "mock failure").into_response();
        }
        MockMode::Garbage => return (StatusCode::OK, "not json").into_response(),
    };
    Json(RankResponse { text }).into_response()
}

async fn rank(State(state): State<AppState>, Json(req): Json<RankRequest>) -> Response {
    if !state.delay.is_zero() {
        tokio::time::sleep(state.delay).await;
    }
    let response = reply(&state.mode, &req);
    if let Some(log) = &state.log {
        log.lock().expect("request log lock").push(req);
    }
    response
}

/// `log`, when given, records every request received.
pub fn router(mode: MockMode, delay: Duration, log: Option<Arc<Mutex<Vec<RankRequest>>>>) -> Router {
    let state = AppState { mode, delay, log };
    Router::new()
        .route("/", post(rank))
        .route("/v1/rank", post(rank))
        .with_state(state)
}

/// A mock server running on a background thread. Stops when dropped.
pub struct MockServer {
    addr: SocketAddr,
    log: Arc<Mutex<Vec<RankRequest>>>,
    shutdown: Option<oneshot::Sender<()>>,
    thread: Option<JoinHandle<()>>,
}

impl MockServer {
    /// Binds an ephemeral loopback port.
    pub fn start(mode: MockMode) -> std::io::Result<Self> {
        Self::start_with_delay(mode, Duration::ZERO)
    }

    pub fn start_with_delay(mode: MockMode, delay: Duration) -> std::io::Result<Self> {
        let std_listener = std::net::TcpListener::bind("127.0.0.1:0")?;
        std_listener.set_nonblocking(true)?;
        let addr = std_listener.local_addr()?;
        let log = Arc::new(Mutex::new(Vec::new()));
        let app = router(mode, delay, Some(log.clone()));
        let (tx, rx) = oneshot::channel::<()>();
        let runtime = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let thread = std::thread::spawn(move || {
            runtime.block_on(async move {
                let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
                axum::serve(listener, app)
                    .with_graceful_shutdown(async {
                        let _ = rx.await;
                    })
                    .await
                    .expect("mock server");
            });
        });
        Ok(Self {
            addr,
            log,
            shutdown: Some(tx),
            thread: Some(thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Endpoint URL to hand to a client.
    pub fn url(&self) -> String {
        format!("http://{}/v1/rank", self.addr)
    }

    /// Requests received so far.
    pub fn requests(&self) -> Vec<RankRequest> {
        self.log.lock().expect("request log lock").clone()
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Serves until the process is killed. Prints the bound address first.
pub async fn serve_forever(bind: SocketAddr, mode: MockMode, delay: Duration) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    println!("mock ranker listening on http://{}/v1/rank", listener.local_addr()?);
    axum::serve(listener, router(mode, delay, None)).await
}
