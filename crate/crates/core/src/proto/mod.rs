//! Agent ↔ environment wire protocol.
//!
//! Each frame is a 4-byte big-endian length followed by a UTF-8 JSON object
//! whose first field is `"kind"`. Floats are written with 17 significant
//! digits, which round-trips every finite double exactly, so a remote
//! environment is bit-for-bit substitutable for an in-process one.
//!
//! The client drives a strict request/response exchange:
//!
//! | request                       | response                  |
//! |-------------------------------|---------------------------|
//! | `hello{version}`              | `hello_ack{..spec}`       |
//! | `reset{seed, record_baseline}`| `observation`             |
//! | `action{values}`              | `observation`             |
//! | `episode_end`                 | `reward_info{baseline}`   |
//! | `shutdown`                    | `shutdown`, server exits  |
//!
//! Any request can instead be answered by `error{code, message}`.

mod client;
mod server;

pub use client::RemoteEnv;
pub use server::{serve_session, Server, SessionEnd};

use std::io::{Read, Write};
use std::time::Duration;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::env::{BaselineTrace, EnvError, EnvSpec, Observation};

pub const PROTOCOL_VERSION: u32 = 1;
pub const MAX_FRAME: usize = 64 << 20;
pub const DEFAULT_PORT: u16 = 7654;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);

#[derive(Debug, Error)]
pub enum ProtoError {
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("connection closed")]
    Closed,
    #[error("truncated frame: expected {expected} bytes, got {got}")]
    Truncated { expected: usize, got: usize },
    #[error("frame of {0} bytes exceeds the {MAX_FRAME}-byte limit")]
    FrameTooLarge(usize),
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown message kind `{0}`")]
    UnknownKind(String),
    #[error("field `{field}`: {msg}")]
    Field { field: String, msg: String },
    #[error("protocol version mismatch: expected {expected}, got {found}")]
    Version { expected: u32, found: u32 },
    #[error("unexpected `{found}` message (expected {expected})")]
    Unexpected { expected: &'static str, found: String },
    #[error("server error ({code}): {message}")]
    Server { code: String, message: String },
}

impl ProtoError {
    fn field(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Self::Field { field: field.into(), msg: msg.into() }
    }
}

impl From<ProtoError> for EnvError {
    fn from(e: ProtoError) -> Self {
        match e {
            ProtoError::Server { code, message } if code == error_code::STEP_FAILED => EnvError::Remote(message),
            other => EnvError::Transport(other.to_string()),
        }
    }
}

pub mod error_code {
    pub const VERSION: &str = "version_mismatch";
    pub const PROTOCOL: &str = "protocol";
    /// The simulator failed inside a step; the episode is aborted.
    pub const STEP_FAILED: &str = "step_failed";
    /// The environment rejected a well-formed request.
    pub const REJECTED: &str = "rejected";
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Hello { version: u32 },
    HelloAck { version: u32, spec: EnvSpec },
    Reset { seed: u64, record_baseline: bool },
    Observation(Observation),
    Action { values: Vec<f64> },
    RewardInfo { baseline: Option<BaselineTrace> },
    EpisodeEnd,
    Shutdown,
    Error { code: String, message: String },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Hello { .. } => "hello",
            Self::HelloAck { .. } => "hello_ack",
            Self::Reset { .. } => "reset",
            Self::Observation(_) => "observation",
            Self::Action { .. } => "action",
            Self::RewardInfo { .. } => "reward_info",
            Self::EpisodeEnd => "episode_end",
            Self::Shutdown => "shutdown",
            Self::Error { .. } => "error",
        }
    }

    /// JSON body without the length prefix.
    pub fn to_json(&self) -> Result<String, ProtoError> {
        let mut w = JsonWriter::new(self.kind());
        match self {
            Self::Hello { version } => w.uint("version", *version as u64),
            Self::HelloAck { version, spec } => {
                w.uint("version", *version as u64);
                w.uint("n_actions", spec.n_actions as u64);
                w.uint("obs_size", spec.obs_size as u64);
                w.uint("episode_len", spec.episode_len as u64);
                w.float("action_low", spec.action_low)?;
                w.float("action_high", spec.action_high)?;
                w.float("kappa_scale", spec.kappa_scale)?;
                w.points("nodes", &spec.nodes)?;
            }
            Self::Reset { seed, record_baseline } => {
                w.uint("seed", *seed);
                w.bool("record_baseline", *record_baseline);
            }
            Self::Observation(o) => {
                w.uint("step", o.step as u64);
                w.floats("state", &o.state)?;
                w.float("norm_c", o.norm_c)?;
                w.float("norm_kappa", o.norm_kappa)?;
                w.float("reward", o.reward)?;
                w.bool("done", o.done);
                w.floats("action", &o.action)?;
            }
            Self::Action { values } => w.floats("values", values)?,
            Self::RewardInfo { baseline } => match baseline {
                None => w.raw("baseline", "null"),
                Some(b) => {
                    let mut inner = JsonWriter::object();
                    inner.floats("norm_c_bef", &b.norm_c_bef)?;
                    inner.floats("norm_kappa_bef", &b.norm_kappa_bef)?;
                    inner.float("norm_c0", b.norm_c0)?;
                    inner.float("norm_kappa0", b.norm_kappa0)?;
                    w.raw("baseline", &inner.finish());
                }
            },
            Self::EpisodeEnd | Self::Shutdown => {}
            Self::Error { code, message } => {
                w.string("code", code);
                w.string("message", message);
            }
        }
        Ok(w.finish())
    }

    pub fn from_json(text: &[u8]) -> Result<Self, ProtoError> {
        let value: Value = serde_json::from_slice(text).map_err(|e| ProtoError::Malformed(e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(ProtoError::Malformed("top level is not an object".into()));
        };
        let kind = match map.get("kind") {
            Some(Value::String(k)) => k.clone(),
            Some(_) => return Err(ProtoError::field("kind", "not a string")),
            None => return Err(ProtoError::field("kind", "missing")),
        };
        let f = Fields { map: &map, prefix: "" };
        let msg = match kind.as_str() {
            "hello" => {
                f.only(&["version"])?;
                Self::Hello { version: f.u32("version")? }
            }
            "hello_ack" => {
                f.only(&["version", "n_actions", "obs_size", "episode_len", "action_low", "action_high", "kappa_scale", "nodes"])?;
                Self::HelloAck {
                    version: f.u32("version")?,
                    spec: EnvSpec {
                        n_actions: f.usize("n_actions")?,
                        obs_size: f.usize("obs_size")?,
                        episode_len: f.usize("episode_len")?,
                        action_low: f.f64("action_low")?,
                        action_high: f.f64("action_high")?,
                        kappa_scale: f.f64("kappa_scale")?,
                        nodes: f.points("nodes")?,
                    },
                }
            }
            "reset" => {
                f.only(&["seed", "record_baseline"])?;
                Self::Reset { seed: f.u64("seed")?, record_baseline: f.bool("record_baseline")? }
            }
            "observation" => {
                f.only(&["step", "state", "norm_c", "norm_kappa", "reward", "done", "action"])?;
                Self::Observation(Observation {
                    step: f.usize("step")?,
                    state: f.f64s("state")?,
                    norm_c: f.f64("norm_c")?,
                    norm_kappa: f.f64("norm_kappa")?,
                    reward: f.f64("reward")?,
                    done: f.bool("done")?,
                    action: f.f64s("action")?,
                })
            }
            "action" => {
                f.only(&["values"])?;
                Self::Action { values: f.f64s("values")? }
            }
            "reward_info" => {
                f.only(&["baseline"])?;
                let baseline = match f.get("baseline")? {
                    Value::Null => None,
                    Value::Object(inner) => {
                        let g = Fields { map: inner, prefix: "baseline." };
                        g.only(&["norm_c_bef", "norm_kappa_bef", "norm_c0", "norm_kappa0"])?;
                        Some(BaselineTrace {
                            norm_c_bef: g.f64s("norm_c_bef")?,
                            norm_kappa_bef: g.f64s("norm_kappa_bef")?,
                            norm_c0: g.f64("norm_c0")?,
                            norm_kappa0: g.f64("norm_kappa0")?,
                        })
                    }
                    _ => return Err(ProtoError::field("baseline", "expected object or null")),
                };
                Self::RewardInfo { baseline }
            }
            "episode_end" => {
                f.only(&[])?;
                Self::EpisodeEnd
            }
            "shutdown" => {
                f.only(&[])?;
                Self::Shutdown
            }
            "error" => {
                f.only(&["code", "message"])?;
                Self::Error { code: f.string("code")?, message: f.string("message")? }
            }
            _ => return Err(ProtoError::UnknownKind(kind)),
        };
        Ok(msg)
    }

    /// Length-prefixed frame.
    pub fn encode(&self) -> Result<Vec<u8>, ProtoError> {
        let body = self.to_json()?;
        if body.len() > MAX_FRAME {
            return Err(ProtoError::FrameTooLarge(body.len()));
        }
        let mut out = Vec::with_capacity(4 + body.len());
        out.extend_from_slice(&(body.len() as u32).to_be_bytes());
        out.extend_from_slice(body.as_bytes());
        Ok(out)
    }

    /// Decodes exactly one frame.
    pub fn decode(bytes: &[u8]) -> Result<Self, ProtoError> {
        let mut r = bytes;
        let msg = read_frame(&mut r)?;
        if !r.is_empty() {
            return Err(ProtoError::Malformed(format!("{} trailing bytes after frame", r.len())));
        }
        Ok(msg)
    }
}

pub fn write_frame(w: &mut impl Write, msg: &Message) -> Result<(), ProtoError> {
    w.write_all(&msg.encode()?)?;
    w.flush()?;
    Ok(())
}

/// Reads one frame, however the bytes are split across reads.
pub fn read_frame(r: &mut impl Read) -> Result<Message, ProtoError> {
    let mut len = [0u8; 4];
    match read_full(r, &mut len)? {
        0 => return Err(ProtoError::Closed),
        4 => {}
        got => return Err(ProtoError::Truncated { expected: 4, got }),
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_FRAME {
        return Err(ProtoError::FrameTooLarge(n));
    }
    let mut body = vec![0u8; n];
    let got = read_full(r, &mut body)?;
    if got != n {
        return Err(ProtoError::Truncated { expected: n, got });
    }
    Message::from_json(&body)
}

/// Like `read_exact`, but reports how much arrived before end of stream.
fn read_full(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(k) => filled += k,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

struct JsonWriter {
    buf: String,
    first: bool,
}

impl JsonWriter {
    fn object() -> Self {
        Self { buf: "{".into(), first: true }
    }

    fn new(kind: &str) -> Self {
        let mut w = Self::object();
        w.string("kind", kind);
        w
    }

    fn key(&mut self, key: &str) {
        if !self.first {
            self.buf.push(',');
        }
        self.first = false;
        self.buf.push('"');
        self.buf.push_str(key);
        self.buf.push_str("\":");
    }

    fn raw(&mut self, key: &str, value: &str) {
        self.key(key);
        self.buf.push_str(value);
    }

    fn uint(&mut self, key: &str, v: u64) {
        self.raw(key, &v.to_string());
    }

    fn bool(&mut self, key: &str, v: bool) {
        self.raw(key, if v { "true" } else { "false" });
    }

    fn string(&mut self, key: &str, v: &str) {
        self.raw(key, &Value::String(v.to_owned()).to_string());
    }

    fn push_float(&mut self, key: &str, v: f64) -> Result<(), ProtoError> {
        if !v.is_finite() {
            return Err(ProtoError::field(key, format!("non-finite value {v}")));
        }
        self.buf.push_str(&format!("{v:.16e}"));
        Ok(())
    }

    fn float(&mut self, key: &str, v: f64) -> Result<(), ProtoError> {
        self.key(key);
        self.push_float(key, v)
    }

    fn floats(&mut self, key: &str, vs: &[f64]) -> Result<(), ProtoError> {
        self.key(key);
        self.buf.push('[');
        for (i, &v) in vs.iter().enumerate() {
            if i > 0 {
                self.buf.push(',');
            }
            self.push_float(key, v)?;
        }
        self.buf.push(']');
        Ok(())
    }

    fn points(&mut self, key: &str, ps: &[[f64; 2]]) -> Result<(), ProtoError> {
        self.key(key);
        self.buf.push('[');
        for (i, p) in ps.iter().enumerate() {
            if i > 0 {
                self.buf.push(',');
            }
            self.buf.push('[');
            self.push_float(key, p[0])?;
            self.buf.push(',');
            self.push_float(key, p[1])?;
            self.buf.push(']');
        }
        self.buf.push(']');
        Ok(())
    }

    fn finish(mut self) -> String {
        self.buf.push('}');
        self.buf
    }
}

struct Fields<'a> {
    map: &'a Map<String, Value>,
    prefix: &'static str,
}

impl<'a> Fields<'a> {
    fn name(&self, key: &str) -> String {
        format!("{}{key}", self.prefix)
    }

    fn err(&self, key: &str, msg: impl Into<String>) -> ProtoError {
        ProtoError::field(self.name(key), msg)
    }

    /// Rejects fields other than `kind` and `allowed`.
    fn only(&self, allowed: &[&str]) -> Result<(), ProtoError> {
        match self.map.keys().find(|k| !(self.prefix.is_empty() && *k == "kind") && !allowed.contains(&k.as_str())) {
            Some(k) => Err(self.err(k, "unexpected field")),
            None => Ok(()),
        }
    }

    fn get(&self, key: &str) -> Result<&'a Value, ProtoError> {
        self.map.get(key).ok_or_else(|| self.err(key, "missing"))
    }

    fn u64(&self, key: &str) -> Result<u64, ProtoError> {
        self.get(key)?.as_u64().ok_or_else(|| self.err(key, "expected a non-negative integer"))
    }

    fn u32(&self, key: &str) -> Result<u32, ProtoError> {
        u32::try_from(self.u64(key)?).map_err(|_| self.err(key, "out of range"))
    }

    fn usize(&self, key: &str) -> Result<usize, ProtoError> {
        usize::try_from(self.u64(key)?).map_err(|_| self.err(key, "out of range"))
    }

    fn bool(&self, key: &str) -> Result<bool, ProtoError> {
        self.get(key)?.as_bool().ok_or_else(|| self.err(key, "expected a boolean"))
    }

    fn string(&self, key: &str) -> Result<String, ProtoError> {
        self.get(key)?.as_str().map(str::to_owned).ok_or_else(|| self.err(key, "expected a string"))
    }

    fn f64(&self, key: &str) -> Result<f64, ProtoError> {
        self.get(key)?.as_f64().ok_or_else(|| self.err(key, "expected a number"))
    }

    fn array(&self, key: &str) -> Result<&'a Vec<Value>, ProtoError> {
        self.get(key)?.as_array().ok_or_else(|| self.err(key, "expected an array"))
    }

    fn f64s(&self, key: &str) -> Result<Vec<f64>, ProtoError> {
        self.array(key)?
            .iter()
            .enumerate()
            .map(|(i, v)| v.as_f64().ok_or_else(|| self.err(&format!("{key}[{i}]"), "expected a number")))
            .collect()
    }

    fn points(&self, key: &str) -> Result<Vec<[f64; 2]>, ProtoError> {
        self.array(key)?
            .iter()
            .enumerate()
            .map(|(i, v)| match v.as_array().map(|a| a.as_slice()) {
                Some([x, y]) => match (x.as_f64(), y.as_f64()) {
                    (Some(x), Some(y)) => Ok([x, y]),
                    _ => Err(self.err(&format!("{key}[{i}]"), "expected two numbers")),
                },
                _ => Err(self.err(&format!("{key}[{i}]"), "expected a pair")),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests;
