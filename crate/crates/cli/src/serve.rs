//! Line-oriented scoring service over TCP.
//!
//! Each request is one JSON object per line:
//! `{"id": ..., "clip_id": "..."}` scores an archived clip and
//! `{"id": ..., "latent": "<base64 LSPA tensor>"}` scores an inline latent.
//! An optional `"threshold"` overrides the configured τ. Every request gets
//! exactly one response line carrying the same `id`.

use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use base64::Engine;
use latentguard_core::guard::{guard_decision, probe_hook, GuardConfig};
use latentguard_core::store::{decode_tensor, Archive};
use latentguard_core::{Error, Tensor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::commands::{decision_str, load_probe, LoadedProbe};
use crate::config::RunConfig;
use crate::error::CliError;

const POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreRequest {
    pub id: Value,
    #[serde(default)]
    pub clip_id: Option<String>,
    #[serde(default)]
    pub latent: Option<String>,
    #[serde(default)]
    pub threshold: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct ScoreResponse {
    pub id: Value,
    pub score: f64,
    pub decision: &'static str,
    pub checkpoint: String,
    pub elapsed_ms: f64,
}

#[derive(Debug, Serialize)]
pub struct ErrorResponse {
    pub id: Value,
    pub error: String,
}

struct Shared {
    probe: LoadedProbe,
    archive: Option<Archive>,
    guard: GuardConfig,
    max_inline_bytes: usize,
}

impl Shared {
    /// Longest accepted request line: the base64 of the payload cap plus
    /// room for the JSON around it.
    fn max_line_bytes(&self) -> usize {
        self.max_inline_bytes.div_ceil(3) * 4 + 4096
    }

    fn handle_line(&self, line: &[u8]) -> String {
        let started = Instant::now();
        let req: ScoreRequest = match serde_json::from_slice(line) {
            Ok(r) => r,
            Err(e) => return error_line(Value::Null, format!("malformed request: {e}")),
        };
        let id = req.id.clone();
        match self.score(&req) {
            Ok((score, decision)) => to_line(&ScoreResponse {
                id,
                score,
                decision,
                checkpoint: self.probe.id.clone(),
                elapsed_ms: started.elapsed().as_secs_f64() * 1e3,
            }),
            Err(e) => error_line(id, e),
        }
    }

    fn score(&self, req: &ScoreRequest) -> Result<(f64, &'static str), String> {
        let latent: Tensor<f32> = match (&req.clip_id, &req.latent) {
            (Some(clip), None) => {
                let archive = self.archive.as_ref().ok_or("no archive is loaded; send an inline latent")?;
                archive.read_tensor(clip).map_err(|e| e.to_string())?
            }
            (None, Some(b64)) => {
                if b64.len() > self.max_inline_bytes.div_ceil(3) * 4 {
                    return Err(self.oversize());
                }
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b64)
                    .map_err(|e| format!("latent is not valid base64: {e}"))?;
                if bytes.len() > self.max_inline_bytes {
                    return Err(self.oversize());
                }
                decode_tensor(&bytes).map_err(|e| e.to_string())?
            }
            _ => return Err("request needs exactly one of clip_id or latent".into()),
        };
        let guard = match req.threshold {
            Some(t) => GuardConfig {
                threshold: t,
                ..self.guard.clone()
            },
            None => self.guard.clone(),
        };
        let s = probe_hook(&latent, &self.probe.model).map_err(|e| e.to_string())?;
        let d = guard_decision(s, &guard).map_err(|e: Error| e.to_string())?;
        Ok((s, decision_str(d)))
    }

    fn oversize(&self) -> String {
        format!("inline latent exceeds the {} byte limit", self.max_inline_bytes)
    }
}

fn to_line<S: Serialize>(v: &S) -> String {
    serde_json::to_string(v).unwrap_or_else(|e| format!("{{\"id\":null,\"error\":\"serialization failed: {e}\"}}"))
}

fn error_line(id: Value, error: impl Into<String>) -> String {
    to_line(&ErrorResponse { id, error: error.into() })
}

enum Line {
    Complete(Vec<u8>),
    TooLong,
    Closed,
}

/// Reads one `\n`-terminated line of at most `limit` bytes. An overlong line
/// is consumed and discarded. Read timeouts are retried until `stop` is set.
fn read_line(reader: &mut BufReader<TcpStream>, limit: usize, stop: &AtomicBool) -> io::Result<Line> {
    let mut buf = Vec::new();
    let mut overflow = false;
    loop {
        let chunk = match reader.fill_buf() {
            Ok(c) => c,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                if stop.load(Ordering::SeqCst) && buf.is_empty() && !overflow {
                    return Ok(Line::Closed);
                }
                continue;
            }
            Err(e) => return Err(e),
        };
        if chunk.is_empty() {
            return Ok(if buf.is_empty() && !overflow { Line::Closed } else if overflow { Line::TooLong } else { Line::Complete(buf) });
        }
        let (take, done) = match chunk.iter().position(|&b| b == b'\n') {
            Some(i) => (i + 1, true),
            None => (chunk.len(), false),
        };
        if !overflow {
            buf.extend_from_slice(&chunk[..take]);
            if buf.len() > limit + 1 {
                overflow = true;
                buf = Vec::new();
            }
        }
        reader.consume(take);
        if done {
            if overflow {
                return Ok(Line::TooLong);
            }
            while matches!(buf.last(), Some(b'\n' | b'\r')) {
                buf.pop();
            }
            return Ok(Line::Complete(buf));
        }
    }
}

fn handle_connection(stream: TcpStream, shared: Arc<Shared>, stop: Arc<AtomicBool>) -> io::Result<()> {
    stream.set_read_timeout(Some(POLL))?;
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let limit = shared.max_line_bytes();
    loop {
        let response = match read_line(&mut reader, limit, &stop)? {
            Line::Closed => return Ok(()),
            Line::TooLong => error_line(Value::Null, shared.oversize()),
            Line::Complete(l) if l.iter().all(u8::is_ascii_whitespace) => continue,
            Line::Complete(l) => shared.handle_line(&l),
        };
        writer.write_all(response.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()?;
    }
}

/// Binds, prints the bound address, and serves until SIGINT or SIGTERM.
/// In-flight requests are answered before the process exits.
pub fn serve(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let probe = load_probe(cfg, false)?;
    let archive_root = &cfg.data.archive;
    let archive = if archive_root.join("manifest.jsonl").exists() {
        Some(Archive::open(archive_root)?)
    } else {
        None
    };
    let shared = Arc::new(Shared {
        probe,
        archive,
        guard: cfg.guard_config(),
        max_inline_bytes: cfg.serve.max_inline_bytes,
    });
    let listener = TcpListener::bind(&cfg.serve.bind).map_err(|e| CliError::runtime(format!("cannot bind {}: {e}", cfg.serve.bind)))?;
    listener.set_nonblocking(true).map_err(|e| CliError::runtime(e.to_string()))?;
    let addr = listener.local_addr().map_err(|e| CliError::runtime(e.to_string()))?;

    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).map_err(|e| CliError::runtime(format!("cannot install signal handler: {e}")))?;

    writeln!(out, "listening on {addr} checkpoint {}", shared.probe.id).map_err(|e| CliError::runtime(e.to_string()))?;
    out.flush().map_err(|e| CliError::runtime(e.to_string()))?;

    let mut workers = Vec::new();
    while !stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                // Accepted sockets can inherit non-blocking mode.
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                let (shared, stop) = (shared.clone(), stop.clone());
                workers.push(thread::spawn(move || {
                    let _ = handle_connection(stream, shared, stop);
                }));
                workers.retain(|w| !w.is_finished());
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => return Err(CliError::runtime(format!("accept failed: {e}"))),
        }
    }
    for w in workers {
        let _ = w.join();
    }
    writeln!(out, "shut down").map_err(|e| CliError::runtime(e.to_string()))?;
    Ok(())
}
