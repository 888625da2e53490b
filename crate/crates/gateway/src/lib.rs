//! WebSocket gateway for a live session.
//!
//! `/ws` streams frames (binary) and state/event messages (JSON) and accepts
//! operator commands; `/health` and `/report` are plain HTTP.

pub mod protocol;
mod runner;

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread::JoinHandle;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::ws::{CloseFrame, Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use cannula_core::harness::{CampaignReport, SandboxConfig, TrialMetrics};
use cannula_core::perception::puncture::PunctureModel;
use cannula_core::scene::create_scene;
use futures::{SinkExt, StreamExt};
use serde::Serialize;
use tokio::sync::{broadcast, oneshot, watch};

pub use protocol::{decode_frame_packet, encode_frame_packet, ClientMessage, ServerMessage, StateMsg};
use runner::{Request, Runner};

/// Close code for text that does not parse as a client message.
pub const CLOSE_INVALID_PAYLOAD: u16 = 1007;
/// Close code for binary messages, which clients must not send.
pub const CLOSE_UNSUPPORTED: u16 = 1003;

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error(transparent)]
    Core(#[from] cannula_core::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("simulation thread is gone")]
    SimulationStopped,
}

pub struct GatewayConfig {
    pub sandbox: SandboxConfig,
    pub scene_seed: u64,
    pub trial_seed: u64,
    pub tick_period: Duration,
    pub model: Option<Arc<PunctureModel>>,
}

#[derive(Clone)]
pub struct AppState {
    requests: mpsc::Sender<Request>,
    frames: watch::Receiver<Option<Bytes>>,
    messages: broadcast::Sender<ServerMessage>,
    finished: Arc<Mutex<Vec<TrialMetrics>>>,
    sandbox: Arc<SandboxConfig>,
}

impl AppState {
    async fn request(&self, message: ClientMessage) -> Result<(), String> {
        let (reply, rx) = oneshot::channel();
        self.requests.send(Request { message, reply }).map_err(|_| GatewayError::SimulationStopped.to_string())?;
        rx.await.map_err(|_| GatewayError::SimulationStopped.to_string())?
    }
}

/// A running simulation thread plus the state the HTTP layer needs.
pub struct Gateway {
    state: AppState,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Gateway {
    pub fn start(cfg: GatewayConfig) -> Result<Self, GatewayError> {
        cfg.sandbox.validate()?;
        let scene = create_scene(&cfg.sandbox.scene, cfg.scene_seed)?;
        let (req_tx, req_rx) = mpsc::channel();
        let (frame_tx, frame_rx) = watch::channel(None);
        let (msg_tx, _) = broadcast::channel(1024);
        let finished = Arc::new(Mutex::new(Vec::new()));
        let shutdown = Arc::new(AtomicBool::new(false));
        let runner = Runner {
            sandbox: cfg.sandbox.clone(),
            scene,
            model: cfg.model,
            period: cfg.tick_period,
            requests: req_rx,
            frames: frame_tx,
            messages: msg_tx.clone(),
            finished: finished.clone(),
            shutdown: shutdown.clone(),
            seq: 0,
        };
        let first = cfg.trial_seed;
        let thread = std::thread::Builder::new().name("simulation".into()).spawn(move || runner.run(first))?;
        Ok(Self {
            state: AppState {
                requests: req_tx,
                frames: frame_rx,
                messages: msg_tx,
                finished,
                sandbox: Arc::new(cfg.sandbox),
            },
            shutdown,
            thread: Some(thread),
        })
    }

    pub fn router(&self) -> Router {
        Router::new()
            .route("/ws", get(ws_handler))
            .route("/health", get(health))
            .route("/report", get(report))
            .with_state(self.state.clone())
    }

    /// Serves until `shutdown` resolves, then stops the simulation thread.
    pub async fn serve(
        mut self,
        listener: tokio::net::TcpListener,
        shutdown: impl std::future::Future<Output = ()> + Send + 'static,
    ) -> Result<(), GatewayError> {
        log::info!("gateway listening on {}", listener.local_addr()?);
        axum::serve(listener, self.router()).with_graceful_shutdown(shutdown).await?;
        self.stop();
        Ok(())
    }

    pub fn stop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Binds `addr` and serves until ctrl-c.
pub async fn run(addr: SocketAddr, cfg: GatewayConfig) -> Result<(), GatewayError> {
    let gateway = Gateway::start(cfg)?;
    let listener = tokio::net::TcpListener::bind(addr).await?;
    gateway
        .serve(listener, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

#[derive(Serialize)]
struct Health {
    status: &'static str,
    trials_finished: usize,
}

async fn health(State(app): State<AppState>) -> Json<Health> {
    let n = app.finished.lock().expect("report lock").len();
    Json(Health { status: "ok", trials_finished: n })
}

async fn report(State(app): State<AppState>) -> Response {
    let trials = app.finished.lock().expect("report lock").clone();
    match CampaignReport::from_trials(&app.sandbox, trials, None) {
        Ok(r) => Json(r).into_response(),
        Err(e) => (axum::http::StatusCode::INTERNAL_SERVER_ERROR, e.to_string()).into_response(),
    }
}

async fn ws_handler(ws: WebSocketUpgrade, State(app): State<AppState>) -> Response {
    ws.on_upgrade(move |socket| client_session(socket, app))
}

fn text(msg: &ServerMessage) -> Message {
    Message::Text(serde_json::to_string(msg).expect("server messages serialize").into())
}

async fn client_session(socket: WebSocket, app: AppState) {
    let (mut tx, mut rx) = socket.split();
    let mut frames = app.frames.clone();
    let mut messages = app.messages.subscribe();
    loop {
        tokio::select! {
            changed = frames.changed() => {
                if changed.is_err() {
                    break;
                }
                let packet = frames.borrow_and_update().clone();
                if let Some(bytes) = packet {
                    if tx.send(Message::Binary(bytes)).await.is_err() {
                        break;
                    }
                }
            }
            msg = messages.recv() => match msg {
                Ok(m) => {
                    if tx.send(text(&m)).await.is_err() {
                        break;
                    }
                }
                Err(broadcast::error::RecvError::Lagged(n)) => log::warn!("client fell {n} messages behind"),
                Err(broadcast::error::RecvError::Closed) => break,
            },
            incoming = rx.next() => {
                let close = |code: u16, reason: String| Message::Close(Some(CloseFrame { code, reason: reason.into() }));
                match incoming {
                    None | Some(Err(_)) | Some(Ok(Message::Close(_))) => break,
                    Some(Ok(Message::Text(t))) => match serde_json::from_str::<ClientMessage>(t.as_str()) {
                        Ok(m) => {
                            if let Err(reason) = app.request(m).await {
                                if tx.send(text(&ServerMessage::Rejected { reason })).await.is_err() {
                                    break;
                                }
                            }
                        }
                        Err(e) => {
                            let _ = tx.send(close(CLOSE_INVALID_PAYLOAD, format!("malformed message: {e}"))).await;
                            break;
                        }
                    },
                    Some(Ok(Message::Binary(_))) => {
                        let _ = tx.send(close(CLOSE_UNSUPPORTED, "binary messages are not accepted".into())).await;
                        break;
                    }
                    Some(Ok(_)) => {}
                }
            }
        }
    }
}
