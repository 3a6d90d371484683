//! Client for an out-of-process language model speaking line-delimited JSON.
//!
//! Wire format, one UTF-8 JSON object per `\n`-terminated line:
//!
//! ```text
//! -> {"id": 7, "op": "next_token_logprobs", "payload": {"context": [2, 15]}}
//! <- {"id": 7, "ok": true, "payload": {"logprobs": [-3.1, ...]}}
//! <- {"id": 8, "ok": false, "error": "bad context"}
//! ```
//!
//! Ops: `meta`, `next_token_logprobs`, `tokenize`, `detokenize`. The client
//! works entirely in the bridge's token-id space; text crosses the boundary
//! as strings.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::LanguageModel;
use crate::corpus::TokenId;
use crate::error::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

/// Environment variable naming the bridge: a `host:port` address or a command line to spawn.
pub const BRIDGE_ENV: &str = "COOP_EXPLAIN_BRIDGE";

const LOGPROB_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeMeta {
    pub protocol_version: u32,
    pub vocab_size: usize,
    #[serde(default)]
    pub bos_id: Option<TokenId>,
    pub eos_id: TokenId,
    #[serde(default)]
    pub model_name: String,
}

#[derive(Deserialize)]
struct Response {
    id: u64,
    ok: bool,
    #[serde(default)]
    payload: Value,
    #[serde(default)]
    error: Option<String>,
}

struct Connection {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    next_id: u64,
    child: Option<Child>,
}

/// One connection to a bridge server. Requests are serialized; use one
/// client per worker for parallel generation.
pub struct LmBridgeClient {
    conn: Mutex<Connection>,
    meta: BridgeMeta,
    timeout: Duration,
}

impl std::fmt::Debug for LmBridgeClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LmBridgeClient")
            .field("meta", &self.meta)
            .field("timeout", &self.timeout)
            .finish()
    }
}

fn protocol(message: impl Into<String>, raw: impl Into<String>) -> Error {
    Error::BridgeProtocol {
        message: message.into(),
        raw: raw.into(),
    }
}

impl LmBridgeClient {
    /// Wraps an already-open transport and performs the `meta` handshake.
    pub fn from_streams<R, W>(reader: R, writer: W, timeout: Duration) -> Result<Self>
    where
        R: Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::with_child(reader, Box::new(writer), None, timeout)
    }

    /// Spawns `command_line` through `sh -c` and talks to it over stdio.
    pub fn spawn(command_line: &str, timeout: Duration) -> Result<Self> {
        let mut child = Command::new("sh")
            .arg("-c")
            .arg(command_line)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");
        Self::with_child(stdout, Box::new(stdin), Some(child), timeout)
    }

    pub fn connect_tcp(addr: impl ToSocketAddrs, timeout: Duration) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        Self::from_streams(reader, stream, timeout)
    }

    /// Connects to the endpoint in `COOP_EXPLAIN_BRIDGE`, if set.
    pub fn from_env(timeout: Duration) -> Option<Result<Self>> {
        let endpoint = std::env::var(BRIDGE_ENV).ok()?;
        Some(Self::connect(&endpoint, timeout))
    }

    /// `host:port` (no whitespace) connects over TCP; anything else is spawned.
    pub fn connect(endpoint: &str, timeout: Duration) -> Result<Self> {
        let endpoint = endpoint.trim();
        let looks_like_addr = !endpoint.contains(char::is_whitespace)
            && endpoint.contains(':')
            && !endpoint.contains('/');
        if looks_like_addr {
            if let Ok(mut addrs) = endpoint.to_socket_addrs() {
                if let Some(addr) = addrs.next() {
                    return Self::connect_tcp(addr, timeout);
                }
            }
        }
        Self::spawn(endpoint, timeout)
    }

    fn with_child<R>(
        reader: R,
        writer: Box<dyn Write + Send>,
        child: Option<Child>,
        timeout: Duration,
    ) -> Result<Self>
    where
        R: Read + Send + 'static,
    {
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let stop = line.is_err();
                if tx.send(line).is_err() || stop {
                    break;
                }
            }
        });
        let mut conn = Connection {
            writer,
            lines: rx,
            next_id: 0,
            child,
        };
        let payload = request(
            &mut conn,
            timeout,
            "meta",
            json!({ "protocol_version": PROTOCOL_VERSION }),
        )?;
        let raw = payload.to_string();
        let meta: BridgeMeta = serde_json::from_value(payload)
            .map_err(|e| protocol(format!("bad meta payload: {e}"), raw.clone()))?;
        if meta.protocol_version != PROTOCOL_VERSION {
            return Err(protocol(
                format!(
                    "protocol version {} unsupported (client speaks {PROTOCOL_VERSION})",
                    meta.protocol_version
                ),
                raw,
            ));
        }
        if meta.vocab_size < 2 || meta.eos_id as usize >= meta.vocab_size {
            return Err(protocol("meta reports an unusable vocabulary", raw));
        }
        Ok(LmBridgeClient {
            conn: Mutex::new(conn),
            meta,
            timeout,
        })
    }

    pub fn meta(&self) -> &BridgeMeta {
        &self.meta
    }

    fn call(&self, op: &str, payload: Value) -> Result<Value> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        request(&mut conn, self.timeout, op, payload)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        let payload = self.call("tokenize", json!({ "text": text }))?;
        let raw = payload.to_string();
        serde_json::from_value(payload["ids"].clone())
            .map_err(|e| protocol(format!("bad tokenize payload: {e}"), raw))
    }

    /// Raw log-probabilities as sent by the server (`null` read as -inf).
    pub fn next_token_logprobs(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let payload = self.call("next_token_logprobs", json!({ "context": context }))?;
        let raw = || payload.to_string();
        let items = payload["logprobs"]
            .as_array()
            .ok_or_else(|| protocol("missing logprobs array", raw()))?;
        if items.len() != self.meta.vocab_size {
            return Err(protocol(
                format!(
                    "expected {} logprobs, got {}",
                    self.meta.vocab_size,
                    items.len()
                ),
                raw(),
            ));
        }
        items
            .iter()
            .map(|v| match v {
                Value::Null => Ok(f64::NEG_INFINITY),
                Value::Number(n) => n
                    .as_f64()
                    .filter(|x| !x.is_nan() && *x <= 1e-9)
                    .ok_or_else(|| protocol(format!("invalid logprob {n}"), raw())),
                other => Err(protocol(format!("invalid logprob {other}"), raw())),
            })
            .collect()
    }
}

fn request(conn: &mut Connection, timeout: Duration, op: &str, payload: Value) -> Result<Value> {
    let id = conn.next_id;
    conn.next_id += 1;
    let mut line = serde_json::to_vec(&json!({ "id": id, "op": op, "payload": payload }))?;
    line.push(b'\n');
    conn.writer.write_all(&line)?;
    conn.writer.flush()?;

    let raw = match conn.lines.recv_timeout(timeout) {
        Ok(Ok(raw)) => raw,
        Ok(Err(e)) => return Err(e.into()),
        Err(RecvTimeoutError::Timeout) => return Err(Error::BridgeTimeout(timeout)),
        Err(RecvTimeoutError::Disconnected) => {
            return Err(protocol("bridge closed the connection", ""))
        }
    };
    let response: Response = serde_json::from_str(&raw)
        .map_err(|e| protocol(format!("unparseable response: {e}"), raw.clone()))?;
    if response.id != id {
        return Err(protocol(
            format!("response id {} does not match request id {id}", response.id),
            raw,
        ));
    }
    if !response.ok {
        let msg = response.error.unwrap_or_else(|| "unspecified error".into());
        return Err(protocol(format!("bridge error: {msg}"), raw));
    }
    Ok(response.payload)
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(child) = self.child.as_mut() {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

impl LanguageModel for LmBridgeClient {
    fn vocab_size(&self) -> usize {
        self.meta.vocab_size
    }

    fn eos_id(&self) -> TokenId {
        self.meta.eos_id
    }

    fn next_token_dist(&self, context: &[TokenId]) -> Result<Vec<f64>> {
        let mut probs: Vec<f64> = self
            .next_token_logprobs(context)?
            .into_iter()
            .map(f64::exp)
            .collect();
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > LOGPROB_SUM_TOLERANCE {
            return Err(protocol(
                format!("exp(logprobs) sums to {total}, outside 1 ± {LOGPROB_SUM_TOLERANCE}"),
                format!("{probs:?}"),
            ));
        }
        for p in &mut probs {
            *p /= total;
        }
        Ok(probs)
    }

    fn detokenize(&self, tokens: &[TokenId]) -> Result<String> {
        let eos = self.meta.eos_id;
        let ids: Vec<TokenId> = tokens.iter().copied().filter(|&t| t != eos).collect();
        let payload = self.call("detokenize", json!({ "ids": ids }))?;
        payload["text"]
            .as_str()
            .map(str::to_owned)
            .ok_or_else(|| protocol("missing text in detokenize payload", payload.to_string()))
    }
}
