use std::io::{BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::{error_code, read_frame, write_frame, Message, ProtoError, DEFAULT_TIMEOUT, PROTOCOL_VERSION};
use crate::env::{EnvError, EnvHandle};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionEnd {
    /// The client asked the server to exit.
    Shutdown,
    /// The connection ended or was dropped; the server keeps accepting.
    Disconnected,
}

/// Single-session environment server.
#[derive(Debug)]
pub struct Server {
    listener: TcpListener,
    timeout: Option<Duration>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        Ok(Self { listener: TcpListener::bind(addr)?, timeout: Some(DEFAULT_TIMEOUT) })
    }

    /// I/O timeout per read or write; `None` blocks indefinitely.
    pub fn with_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Serves one agent at a time until a client sends `shutdown`. The
    /// listening socket is closed when this returns.
    pub fn serve(self, env: &mut dyn EnvHandle) -> Result<(), ProtoError> {
        loop {
            let (stream, peer) = self.listener.accept()?;
            log::info!("agent connected from {peer}");
            stream.set_nodelay(true)?;
            stream.set_read_timeout(self.timeout)?;
            stream.set_write_timeout(self.timeout)?;
            let reader = BufReader::new(stream.try_clone()?);
            let writer = BufWriter::new(stream);
            match serve_session(reader, writer, env) {
                Ok(SessionEnd::Shutdown) => {
                    log::info!("shutdown requested by {peer}");
                    return Ok(());
                }
                Ok(SessionEnd::Disconnected) => log::info!("agent {peer} disconnected"),
                Err(e) => log::warn!("session with {peer} ended: {e}"),
            }
        }
    }
}

fn reply_error(w: &mut impl Write, code: &str, message: impl Into<String>) -> Result<(), ProtoError> {
    write_frame(w, &Message::Error { code: code.into(), message: message.into() })
}

fn env_error(w: &mut impl Write, e: &EnvError) -> Result<(), ProtoError> {
    let code = match e {
        EnvError::Fem(_) => error_code::STEP_FAILED,
        _ => error_code::REJECTED,
    };
    reply_error(w, code, e.to_string())
}

/// Runs one session over an already-connected byte stream.
pub fn serve_session(
    mut reader: impl Read,
    mut writer: impl Write,
    env: &mut dyn EnvHandle,
) -> Result<SessionEnd, ProtoError> {
    let mut greeted = false;
    loop {
        let msg = match read_frame(&mut reader) {
            Ok(m) => m,
            Err(ProtoError::Closed) => return Ok(SessionEnd::Disconnected),
            Err(e @ (ProtoError::Io(_) | ProtoError::Truncated { .. })) => return Err(e),
            Err(e) => {
                // the stream is still framed correctly, but we cannot trust the peer
                reply_error(&mut writer, error_code::PROTOCOL, e.to_string())?;
                return Err(e);
            }
        };
        if !greeted {
            match msg {
                Message::Hello { version } if version == PROTOCOL_VERSION => {
                    greeted = true;
                    write_frame(&mut writer, &Message::HelloAck { version, spec: env.spec() })?;
                    continue;
                }
                Message::Hello { version } => {
                    let e = ProtoError::Version { expected: PROTOCOL_VERSION, found: version };
                    reply_error(&mut writer, error_code::VERSION, e.to_string())?;
                    return Err(e);
                }
                Message::Shutdown => {}
                other => {
                    let e = ProtoError::Unexpected { expected: "hello", found: other.kind().into() };
                    reply_error(&mut writer, error_code::PROTOCOL, e.to_string())?;
                    return Err(e);
                }
            }
        }
        match msg {
            Message::Reset { seed, record_baseline } => match env.reset(seed, record_baseline) {
                Ok(obs) => write_frame(&mut writer, &Message::Observation(obs))?,
                Err(e) => env_error(&mut writer, &e)?,
            },
            Message::Action { values } => match env.step(&values) {
                Ok(obs) => write_frame(&mut writer, &Message::Observation(obs))?,
                Err(e) => env_error(&mut writer, &e)?,
            },
            Message::EpisodeEnd => match env.baseline() {
                Ok(baseline) => write_frame(&mut writer, &Message::RewardInfo { baseline })?,
                Err(e) => env_error(&mut writer, &e)?,
            },
            Message::Shutdown => {
                write_frame(&mut writer, &Message::Shutdown)?;
                return Ok(SessionEnd::Shutdown);
            }
            other => {
                let e = ProtoError::Unexpected { expected: "a request", found: other.kind().into() };
                reply_error(&mut writer, error_code::PROTOCOL, e.to_string())?;
                return Err(e);
            }
        }
    }
}

/// Connects with the given timeout on each read and write.
pub(super) fn connect_stream(addr: impl ToSocketAddrs, timeout: Option<Duration>) -> Result<TcpStream, ProtoError> {
    let stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(timeout)?;
    stream.set_write_timeout(timeout)?;
    Ok(stream)
}
