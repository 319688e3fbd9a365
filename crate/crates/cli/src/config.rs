//! Experiment configuration: presets, TOML files and command-line overrides.
//!
//! Resolution order, later wins: preset, config file, `RDC_ADDR`/`RDC_PORT`,
//! `--set key=value` style overrides. Everything is merged as TOML tables
//! and deserialized once, so unknown keys are rejected wherever they occur.

use std::path::{Path, PathBuf};

use rdc_core::env::{EnvConfig, InitialCondition, Objective, RewardWeights};
use rdc_core::fem::SimParams;
use rdc_core::policy::AgentConfig;
use rdc_core::proto::DEFAULT_PORT;
use rdc_core::Mesh;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::CliError;

pub const PRESETS: [&str; 2] = ["square", "regions"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum MeshSpec {
    /// Unit square, `n x n` cells, `patches x patches` control regions.
    Square { n: usize, patches: usize },
    Rectangle { width: f64, height: f64, nx: usize, ny: usize, patches_x: usize, patches_y: usize },
    /// Mesh in the text format written by `rdc mesh gen`.
    File { path: PathBuf },
}

impl MeshSpec {
    pub fn build(&self) -> Result<Mesh, CliError> {
        let mesh = match self {
            Self::Square { n, patches } => Mesh::unit_square(*n, *n, *patches, *patches),
            Self::Rectangle { width, height, nx, ny, patches_x, patches_y } => {
                Mesh::rectangle(*width, *height, *nx, *ny, *patches_x, *patches_y)
            }
            Self::File { path } => Mesh::load(path),
        };
        mesh.map_err(|e| CliError::Config(format!("mesh: {e}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSettings {
    pub episodes: usize,
    pub seed: u64,
    /// Independent trainings with seeds `seed, seed+1, ...`.
    #[serde(default = "one")]
    pub seeds: usize,
    /// Checkpoint to continue training from.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<PathBuf>,
    #[serde(default)]
    pub policy: AgentConfig,
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    InProcess,
    Serve,
    Connect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSettings {
    pub mode: Mode,
    /// Output directory; not echoed into the manifest.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Bind address (serve) or server host (connect).
    pub addr: String,
    pub port: u16,
    pub timeout_secs: u64,
    /// Leave the server running after a connected training finishes.
    #[serde(default)]
    pub keep_server: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub mesh: MeshSpec,
    pub sim: SimParams,
    pub env: EnvConfig,
    pub agent: AgentSettings,
    pub run: RunSettings,
}

impl ExperimentConfig {
    /// Desk-scale square case: 16×16 mesh, 8×8 patches, 200 episodes.
    pub fn square() -> Self {
        Self {
            preset: "square".into(),
            mesh: MeshSpec::Square { n: 16, patches: 8 },
            sim: SimParams { beta: 2.5, gamma: 1.0, rho: 1.0, dt: 5e-4, n_steps: 60, flux: 0.0 },
            env: EnvConfig {
                objective: Objective::Diff,
                weights: RewardWeights::default(),
                action_low: 0.1,
                action_high: 5.0,
                kappa_scale: 1.0,
                episode_len: 60,
                ic: InitialCondition::Disk { center: [0.5, 0.5], radius: 0.3, inside: 1.0, outside: 0.0 },
            },
            agent: AgentSettings { episodes: 200, seed: 0, seeds: 1, resume: None, policy: AgentConfig::default() },
            run: RunSettings {
                mode: Mode::InProcess,
                out: None,
                addr: "127.0.0.1".into(),
                port: DEFAULT_PORT,
                timeout_secs: 300,
                keep_server: false,
            },
        }
    }

    /// Fifteen regions on a 5×3 grid, infection seeded in the central one.
    pub fn regions() -> Self {
        let base = Self::square();
        Self {
            preset: "regions".into(),
            mesh: MeshSpec::Rectangle { width: 200.0, height: 120.0, nx: 40, ny: 24, patches_x: 5, patches_y: 3 },
            sim: SimParams { beta: 50.0, dt: 0.01, n_steps: 40, ..base.sim },
            env: EnvConfig {
                kappa_scale: 1e4,
                episode_len: 40,
                ic: InitialCondition::Region { region: 7, inside: 1.0, outside: 0.0 },
                ..base.env
            },
            agent: AgentSettings { episodes: 1000, ..base.agent },
            ..base
        }
    }

    pub fn preset(name: &str) -> Result<Self, CliError> {
        match name {
            "square" => Ok(Self::square()),
            "regions" => Ok(Self::regions()),
            _ => Err(CliError::Config(format!("unknown preset {name:?} (expected one of {})", PRESETS.join(", ")))),
        }
    }

    /// Checks everything that can be checked without running, including
    /// building the mesh.
    pub fn validate(&self) -> Result<Mesh, CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.sim.validate().map_err(|e| CliError::Config(format!("sim: {e}")))?;
        self.env.validate().map_err(|e| CliError::Config(format!("env: {e}")))?;
        if self.sim.n_steps != self.env.episode_len {
            return bad(format!(
                "sim.n_steps ({}) and env.episode_len ({}) disagree",
                self.sim.n_steps, self.env.episode_len
            ));
        }
        if self.agent.seeds == 0 {
            return bad("agent.seeds must be at least 1".into());
        }
        if self.agent.seed.checked_add(self.agent.seeds as u64 - 1).is_none() {
            return bad("agent.seed + agent.seeds overflows".into());
        }
        if let Some(path) = &self.agent.resume {
            if !path.is_file() {
                return bad(format!("agent.resume: {} does not exist", path.display()));
            }
            if self.agent.seeds != 1 {
                return bad("agent.resume needs agent.seeds = 1".into());
            }
            if self.run.mode == Mode::Connect {
                return bad("agent.resume is only supported in-process (the baseline lives in the checkpoint)".into());
            }
        }
        if let MeshSpec::File { path } = &self.mesh {
            if !path.is_file() {
                return bad(format!("mesh.path: {} does not exist", path.display()));
            }
        }
        if self.run.timeout_secs == 0 {
            return bad("run.timeout_secs must be positive".into());
        }
        let mesh = self.mesh.build()?;
        self.env.ic.nodal_values(&mesh).map_err(|e| CliError::Config(format!("env.ic: {e}")))?;
        Ok(mesh)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }

    /// The config as recorded in a manifest: everything except the output
    /// location, so reruns elsewhere produce the same bytes.
    pub fn echo(&self) -> Result<String, CliError> {
        let mut c = self.clone();
        c.run.out = None;
        c.to_toml()
    }
}

/// Where a config comes from, besides the preset.
#[derive(Clone, Debug, Default)]
pub struct Sources {
    pub preset: Option<String>,
    /// TOML config, or a run manifest whose config echo is reused.
    pub file: Option<PathBuf>,
    /// Dotted keys with TOML-literal values (bare words become strings).
    pub overrides: Vec<(String, String)>,
}

/// Builds the final config; `env_var` is `std::env::var` outside tests.
pub fn resolve(sources: &Sources, env_var: impl Fn(&str) -> Option<String>) -> Result<ExperimentConfig, CliError> {
    let file = match &sources.file {
        Some(path) => Some(read_table(path)?),
        None => None,
    };
    let from_file = file.as_ref().and_then(|t| t.get("preset")).map(|v| match v {
        Value::String(s) => Ok(s.clone()),
        other => Err(CliError::Config(format!("preset must be a string, got {other}"))),
    });
    let preset = match (&sources.preset, from_file) {
        (Some(p), _) => p.clone(),
        (None, Some(p)) => p?,
        (None, None) => "square".into(),
    };
    let mut table = Table::try_from(ExperimentConfig::preset(&preset)?)
        .map_err(|e| CliError::Config(format!("preset {preset}: {e}")))?;
    if let Some(file) = file {
        merge(&mut table, file);
    }
    table.insert("preset".into(), Value::String(preset));

    if let Some(addr) = env_var("RDC_ADDR") {
        set_path(&mut table, "run.addr", Value::String(addr))?;
    }
    if let Some(port) = env_var("RDC_PORT") {
        let port: u16 = port.trim().parse().map_err(|_| CliError::Config(format!("RDC_PORT={port:?} is not a port")))?;
        set_path(&mut table, "run.port", Value::Integer(port.into()))?;
    }
    for (key, raw) in &sources.overrides {
        set_path(&mut table, key, parse_literal(raw))?;
    }
    Value::Table(table).try_into().map_err(|e: toml::de::Error| CliError::Config(e.message().trim().to_string()))
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    let toml_text = if is_json {
        let manifest: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        match manifest.get("config") {
            Some(serde_json::Value::String(s)) => s.clone(),
            _ => return Err(CliError::Config(format!("{} has no config echo", path.display()))),
        }
    } else {
        text
    };
    toml_text.parse::<Table>().map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Recursive table merge. A table carrying `kind` replaces its target
/// instead of merging, since fields of one variant are invalid in another.
fn merge(base: &mut Table, over: Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(Value::Table(b)), Value::Table(o)) if !o.contains_key("kind") => merge(b, o),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn set_path(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("malformed key {key:?}")));
    }
    let mut t = table;
    for part in &parts[..parts.len() - 1] {
        let entry = t.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        t = match entry {
            Value::Table(inner) => inner,
            _ => return Err(CliError::Config(format!("{key}: {part} is not a table"))),
        };
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}
