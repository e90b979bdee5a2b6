//! Read-only top-k retrieval service over a line-oriented TCP protocol.
//!
//! One JSON request per line, one JSON response per line:
//!   {"k": 3, "id": "note-007"}            lookup by pool id
//!   {"k": 3, "note": {..note fields..}}   embed raw note fields on the fly
//! responses:
//!   {"ok":{"results":[{"id":"note-001","similarity":0.93}, ..]}}
//!   {"err":{"code":"unknown_id","message":".."}}
//! Error codes: `malformed_request`, `invalid_k`, `unknown_id`, `internal`.
//! A failed request leaves the connection usable.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Note;
use crate::eval::rank;
use crate::model::{embed_tokens, ModelParams};
use crate::prompt::{build_embedding_prompt, TruncationConfig};
use crate::store::{EmbeddingStore, StoreError};

#[derive(Debug, Error)]
pub enum ServeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Deserialize)]
struct QueryRequest {
    k: usize,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    note: Option<Note>,
}

#[derive(Debug, Serialize)]
struct Hit {
    id: String,
    similarity: f64,
}

#[derive(Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum Response {
    Ok { results: Vec<Hit> },
    Err { code: String, message: String },
}

struct Shared {
    store: EmbeddingStore,
    rows: Vec<Vec<f32>>,
    params: ModelParams<f32>,
    trunc: TruncationConfig,
}

fn error(code: &str, message: String) -> Response {
    Response::Err {
        code: code.into(),
        message,
    }
}

fn handle_request(shared: &Shared, line: &str) -> Response {
    let req: QueryRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return error("malformed_request", e.to_string()),
    };
    if req.k < 1 {
        return error("invalid_k", "k must be >= 1".into());
    }
    let (embedding, exclude) = match (&req.id, &req.note) {
        (Some(id), None) => match shared.store.index_of(id) {
            Some(idx) => (shared.store.vector(idx).to_vec(), id.clone()),
            None => return error("unknown_id", format!("note id {id:?} not in store")),
        },
        (None, Some(note)) => {
            let ep = build_embedding_prompt(note, &shared.trunc);
            match embed_tokens(&shared.params, &ep.token_ids, ep.compression_pos) {
                Ok(v) => (v, note.id.clone()),
                Err(e) => return error("internal", e.to_string()),
            }
        }
        _ => {
            return error(
                "malformed_request",
                "exactly one of `id` or `note` must be present".into(),
            )
        }
    };
    let ranked = rank(&embedding, &shared.store.ids, &shared.rows, &exclude);
    Response::Ok {
        results: ranked
            .into_iter()
            .take(req.k)
            .map(|(id, similarity)| Hit { id, similarity })
            .collect(),
    }
}

fn handle_connection(shared: &Shared, stream: TcpStream) {
    let peer = stream.peer_addr().ok();
    let reader = BufReader::new(match stream.try_clone() {
        Ok(s) => s,
        Err(_) => return,
    });
    let mut writer = BufWriter::new(stream);
    for line in reader.lines() {
        let line = match line {
            Ok(l) => l,
            Err(_) => break,
        };
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle_request(shared, &line);
        let mut body = serde_json::to_string(&resp).unwrap_or_else(|e| {
            format!("{{\"err\":{{\"code\":\"internal\",\"message\":{:?}}}}}", e.to_string())
        });
        body.push('\n');
        if writer.write_all(body.as_bytes()).is_err() || writer.flush().is_err() {
            break;
        }
    }
    log::debug!("connection closed: {peer:?}");
}

/// A bound, not-yet-running service. Splitting bind from run lets callers
/// learn the ephemeral port before any request arrives.
pub struct Server {
    listener: TcpListener,
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
}

/// Handle to a server running on a background thread.
pub struct RunningServer {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<std::thread::JoinHandle<()>>,
}

impl RunningServer {
    pub fn stop(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Drop for RunningServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(j) = self.join.take() {
            let _ = j.join();
        }
    }
}

impl Server {
    /// Bind to `addr` after verifying the store matches the checkpoint
    /// fingerprint it claims to be built from.
    pub fn bind(
        addr: &str,
        store: EmbeddingStore,
        params: ModelParams<f32>,
        trunc: TruncationConfig,
        checkpoint_fingerprint: u64,
    ) -> Result<Self, ServeError> {
        if store.fingerprint != checkpoint_fingerprint {
            return Err(ServeError::Store(StoreError::FingerprintMismatch {
                store: store.fingerprint,
                checkpoint: checkpoint_fingerprint,
            }));
        }
        let listener = TcpListener::bind(addr)?;
        let rows = store.vector_rows();
        Ok(Self {
            listener,
            shared: Arc::new(Shared {
                store,
                rows,
                params,
                trunc,
            }),
            stop: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, ServeError> {
        Ok(self.listener.local_addr()?)
    }

    /// Accept loop; one thread per connection over shared immutable state.
    /// Runs until the stop flag is set (see `spawn`).
    pub fn run(self) -> Result<(), ServeError> {
        self.listener.set_nonblocking(true)?;
        loop {
            if self.stop.load(Ordering::SeqCst) {
                return Ok(());
            }
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    let shared = Arc::clone(&self.shared);
                    std::thread::spawn(move || handle_connection(&shared, stream));
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    /// Run the accept loop on a background thread and return a stop handle.
    pub fn spawn(self) -> Result<RunningServer, ServeError> {
        let addr = self.local_addr()?;
        let stop = Arc::clone(&self.stop);
        let join = std::thread::spawn(move || {
            if let Err(e) = self.run() {
                log::error!("server error: {e}");
            }
        });
        Ok(RunningServer {
            addr,
            stop,
            join: Some(join),
        })
    }
}
