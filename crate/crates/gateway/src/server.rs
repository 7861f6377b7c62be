use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use tokio::net::TcpListener;
use tokio::sync::mpsc;
use tokio::sync::mpsc::error::TrySendError;

use asyncagent_core::peripherals::ClockMode;

use crate::config::GatewayConfig;
use crate::frames::ServerFrame;
use crate::session::Session;

pub const OVERFLOW_DETAIL: &str = "outgoing frame buffer overflow; closing session";

pub fn router(cfg: GatewayConfig) -> Router {
    Router::new()
        .route("/session", get(upgrade))
        .with_state(Arc::new(cfg))
}

pub async fn serve(listener: TcpListener, cfg: GatewayConfig) -> std::io::Result<()> {
    axum::serve(listener, router(cfg)).await
}

async fn upgrade(
    ws: WebSocketUpgrade,
    Query(params): Query<HashMap<String, String>>,
    State(cfg): State<Arc<GatewayConfig>>,
) -> Response {
    let model = params.get("model").cloned();
    ws.on_upgrade(move |socket| run_session(socket, cfg, model))
}

async fn run_session(socket: WebSocket, cfg: Arc<GatewayConfig>, model: Option<String>) {
    let (mut sink, mut stream) = socket.split();
    let (mut session, initial) = match Session::open(&cfg, model.as_deref(), ClockMode::Wall) {
        Ok(opened) => opened,
        Err(e) => {
            tracing::warn!(error = %e, "session refused");
            let frame = ServerFrame::error(format!("session refused: {e}"));
            let _ = sink.send(Message::Text(frame.to_json().into())).await;
            let _ = sink.close().await;
            return;
        }
    };

    let (tx, mut rx) = mpsc::channel::<ServerFrame>(cfg.frame_buffer);
    let overflow = Arc::new(AtomicBool::new(false));
    let writer_overflow = overflow.clone();
    let writer = tokio::spawn(async move {
        while let Some(frame) = rx.recv().await {
            if sink.send(Message::Text(frame.to_json().into())).await.is_err() {
                return;
            }
        }
        if writer_overflow.load(Ordering::SeqCst) {
            let frame = ServerFrame::error(OVERFLOW_DETAIL);
            let _ = sink.send(Message::Text(frame.to_json().into())).await;
        }
        let _ = sink.close().await;
    });

    let send_all = |frames: Vec<ServerFrame>| -> bool {
        for frame in frames {
            match tx.try_send(frame) {
                Ok(()) => {}
                Err(TrySendError::Full(_)) => {
                    tracing::warn!("frame buffer overflow, closing session");
                    overflow.store(true, Ordering::SeqCst);
                    return false;
                }
                Err(TrySendError::Closed(_)) => return false,
            }
        }
        true
    };

    if send_all(initial) {
        let mut ticker = tokio::time::interval(Duration::from_millis(cfg.step_ms.max(1)));
        ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        loop {
            let frames = tokio::select! {
                incoming = stream.next() => match incoming {
                    Some(Ok(Message::Text(text))) => session.handle_text(text.as_str()),
                    Some(Ok(Message::Binary(_))) => vec![ServerFrame::error("binary frames are not supported")],
                    Some(Ok(Message::Close(_))) | None | Some(Err(_)) => break,
                    Some(Ok(_)) => continue,
                },
                _ = ticker.tick() => session.advance_live(),
            };
            if !send_all(frames) {
                break;
            }
        }
    }
    drop(tx);
    let _ = writer.await;
}
