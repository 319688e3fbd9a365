use std::io::{BufReader, BufWriter};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::server::connect_stream;
use super::{read_frame, write_frame, Message, ProtoError, PROTOCOL_VERSION};
use crate::env::{BaselineTrace, EnvError, EnvHandle, EnvSpec, Observation};

/// Environment living in another process.
#[derive(Debug)]
pub struct RemoteEnv {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
    spec: EnvSpec,
}

impl RemoteEnv {
    pub fn connect(addr: impl ToSocketAddrs, timeout: Option<Duration>) -> Result<Self, ProtoError> {
        Self::connect_with_version(addr, timeout, PROTOCOL_VERSION)
    }

    #[doc(hidden)]
    pub fn connect_with_version(
        addr: impl ToSocketAddrs,
        timeout: Option<Duration>,
        version: u32,
    ) -> Result<Self, ProtoError> {
        let stream = connect_stream(addr, timeout)?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut writer = BufWriter::new(stream);
        write_frame(&mut writer, &Message::Hello { version })?;
        match read_frame(&mut reader)? {
            Message::HelloAck { version: v, spec } if v == version => Ok(Self { reader, writer, spec }),
            Message::HelloAck { version: v, .. } => Err(ProtoError::Version { expected: version, found: v }),
            Message::Error { code, message } => Err(ProtoError::Server { code, message }),
            other => Err(ProtoError::Unexpected { expected: "hello_ack", found: other.kind().into() }),
        }
    }

    fn request(&mut self, msg: &Message) -> Result<Message, ProtoError> {
        write_frame(&mut self.writer, msg)?;
        match read_frame(&mut self.reader)? {
            Message::Error { code, message } => Err(ProtoError::Server { code, message }),
            reply => Ok(reply),
        }
    }

    fn observation(&mut self, msg: &Message) -> Result<Observation, EnvError> {
        match self.request(msg)? {
            Message::Observation(obs) => Ok(obs),
            other => Err(ProtoError::Unexpected { expected: "observation", found: other.kind().into() }.into()),
        }
    }

    /// Asks the server to exit and waits for its acknowledgement.
    pub fn shutdown(mut self) -> Result<(), ProtoError> {
        match self.request(&Message::Shutdown)? {
            Message::Shutdown => Ok(()),
            other => Err(ProtoError::Unexpected { expected: "shutdown", found: other.kind().into() }),
        }
    }
}

impl EnvHandle for RemoteEnv {
    fn spec(&self) -> EnvSpec {
        self.spec.clone()
    }

    fn reset(&mut self, seed: u64, record_baseline: bool) -> Result<Observation, EnvError> {
        self.observation(&Message::Reset { seed, record_baseline })
    }

    fn step(&mut self, action: &[f64]) -> Result<Observation, EnvError> {
        self.observation(&Message::Action { values: action.to_vec() })
    }

    fn baseline(&mut self) -> Result<Option<BaselineTrace>, EnvError> {
        match self.request(&Message::EpisodeEnd)? {
            Message::RewardInfo { baseline } => Ok(baseline),
            other => Err(ProtoError::Unexpected { expected: "reward_info", found: other.kind().into() }.into()),
        }
    }
}
