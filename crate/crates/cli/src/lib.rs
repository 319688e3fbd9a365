//! Configuration-driven experiment runner: in-process training, the
//! environment server, the remote agent, trace comparison and mesh
//! generation. The `rdc` binary is a thin layer over this library.

pub mod compare;
pub mod config;
pub mod experiment;

use thiserror::Error;

pub use compare::{compare, Comparison, Summary};
pub use config::{ExperimentConfig, MeshSpec, Mode, Sources};
pub use experiment::{run, serve, SeedRun};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration or arguments; exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Failure while running; exit code 1.
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}
