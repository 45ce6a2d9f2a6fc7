//! A local chat-completions server that records concurrency and request counts.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::State;
use axum::http::StatusCode;
use axum::routing::post;
use axum::{Json, Router};
use serde_json::{json, Value};

#[derive(Clone, Copy, Debug)]
pub enum Behaviour {
    /// Reply 200 after the delay.
    Reply(Duration),
    /// Sleep far longer than any client timeout.
    Hang,
    /// Reply with this status and an error body.
    Status(u16),
}

#[derive(Default)]
pub struct Counters {
    pub in_flight: AtomicUsize,
    pub peak: AtomicUsize,
    pub hits: AtomicUsize,
}

pub struct FakeServer {
    pub addr: SocketAddr,
    pub counters: Arc<Counters>,
}

impl FakeServer {
    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }
    pub fn peak(&self) -> usize {
        self.counters.peak.load(Ordering::SeqCst)
    }
    pub fn hits(&self) -> usize {
        self.counters.hits.load(Ordering::SeqCst)
    }
}

async fn handle(State((behaviour, c)): State<(Behaviour, Arc<Counters>)>, Json(body): Json<Value>) -> (StatusCode, Json<Value>) {
    c.hits.fetch_add(1, Ordering::SeqCst);
    let now = c.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
    c.peak.fetch_max(now, Ordering::SeqCst);
    let reply = match behaviour {
        Behaviour::Reply(d) => {
            tokio::time::sleep(d).await;
            let text = body.pointer("/messages/0/content/0/text").and_then(Value::as_str).unwrap_or("ok");
            let echo: String = text.chars().take(40).collect();
            (
                StatusCode::OK,
                Json(json!({"choices": [{"message": {"role": "assistant", "content": format!("echo: {echo}")}}],
                            "usage": {"prompt_tokens": 3, "completion_tokens": 2, "total_tokens": 5}})),
            )
        }
        Behaviour::Hang => {
            tokio::time::sleep(Duration::from_secs(600)).await;
            (StatusCode::OK, Json(json!({})))
        }
        Behaviour::Status(s) => (StatusCode::from_u16(s).unwrap(), Json(json!({"error": {"message": "scripted failure"}}))),
    };
    c.in_flight.fetch_sub(1, Ordering::SeqCst);
    reply
}

pub async fn spawn(behaviour: Behaviour) -> FakeServer {
    let counters = Arc::new(Counters::default());
    let app = Router::new()
        .route("/chat/completions", post(handle))
        .with_state((behaviour, Arc::clone(&counters)));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move {
        axum::serve(listener, app).await.unwrap();
    });
    FakeServer { addr, counters }
}
