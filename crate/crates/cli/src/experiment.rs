//! Running experiments and writing their artifacts.
//!
//! One output directory per training seed (the output directory itself when
//! there is a single seed) holding
//!
//! * `baseline.csv`, `traces.csv`: episode traces (see `rdc_core::trace`)
//! * `field_{before,after}_{step0,final}.csv`: nodal states
//! * `kappa_{before,after}_{step0,final}.csv`: regional diffusivities
//! * `compare.csv`, `compare.txt`: baseline vs. final decile
//! * `checkpoint.json`, `manifest.json`
//!
//! plus `summary.csv` with decile statistics per seed at the top level.
//! "Before" is the baseline episode, "after" the last training episode.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rdc_core::env::{BaselineTrace, EnvError, EnvHandle, EnvSpec, Environment, Observation};
use rdc_core::fem::write_control_csv;
use rdc_core::policy::{Agent, Checkpoint, PolicyError, UpdateReport};
use rdc_core::proto::{RemoteEnv, Server};
use rdc_core::trace::{self, EpisodeTrace};
use serde::Serialize;

use crate::compare::{compare, Summary};
use crate::config::{ExperimentConfig, Mode};
use crate::CliError;

pub const MANIFEST_VERSION: u32 = 1;

/// Passes calls through, remembering the first and latest observation of
/// the current episode.
struct Recorder<'a> {
    inner: &'a mut dyn EnvHandle,
    first: Option<Observation>,
    last: Option<Observation>,
}

impl EnvHandle for Recorder<'_> {
    fn spec(&self) -> EnvSpec {
        self.inner.spec()
    }

    fn reset(&mut self, seed: u64, record_baseline: bool) -> Result<Observation, EnvError> {
        self.first = None;
        self.last = None;
        let obs = self.inner.reset(seed, record_baseline)?;
        self.first = Some(obs.clone());
        self.last = Some(obs.clone());
        Ok(obs)
    }

    fn step(&mut self, action: &[f64]) -> Result<Observation, EnvError> {
        let obs = self.inner.step(action)?;
        self.last = Some(obs.clone());
        Ok(obs)
    }

    fn baseline(&mut self) -> Result<Option<BaselineTrace>, EnvError> {
        self.inner.baseline()
    }
}

/// Result of one training seed.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub baseline: BaselineTrace,
    /// Absent when resuming from a checkpoint.
    pub baseline_episode: Option<EpisodeTrace>,
    pub traces: Vec<EpisodeTrace>,
    pub updates: Vec<UpdateReport>,
    pub summary: Option<Summary>,
}

impl SeedRun {
    /// Whether every line search kept the batch loss from increasing.
    pub fn monotone(&self) -> bool {
        self.updates.iter().all(UpdateReport::is_monotone)
    }
}

#[derive(Serialize)]
struct MeshInfo {
    nodes: usize,
    regions: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: u32,
    tool: String,
    status: &'a str,
    error: Option<String>,
    partial: bool,
    mode: Mode,
    seed: u64,
    episodes_requested: usize,
    episodes_completed: usize,
    episodes_aborted: usize,
    non_monotone_updates: usize,
    resumed_from_episode: Option<usize>,
    mesh: MeshInfo,
    artifacts: Vec<String>,
    /// Echo of the resolved configuration (TOML), sufficient to rerun.
    config: String,
    /// Not reproducible; everything above is.
    wall_time_s: f64,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    File::create(&path).map(BufWriter::new).map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", path.display())))
}

fn write_with(
    dir: &Path,
    name: &str,
    artifacts: &mut Vec<String>,
    body: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    body(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::Runtime(format!("writing {name}: {e}")))?;
    artifacts.push(name.to_string());
    Ok(())
}

fn write_field(w: &mut impl Write, nodes: &[[f64; 2]], state: &[f64]) -> std::io::Result<()> {
    writeln!(w, "node_id,x,y,c")?;
    for (i, (p, c)) in nodes.iter().zip(state).enumerate() {
        writeln!(w, "{i},{},{},{c}", p[0], p[1])?;
    }
    Ok(())
}

fn write_snapshots(
    dir: &Path,
    spec: &EnvSpec,
    label: &str,
    first: &Observation,
    last: &Observation,
    artifacts: &mut Vec<String>,
) -> Result<(), CliError> {
    for (when, obs) in [("step0", first), ("final", last)] {
        write_with(dir, &format!("field_{label}_{when}.csv"), artifacts, |w| write_field(w, &spec.nodes, &obs.state))?;
        let control = spec.scale_action(&obs.action).map_err(|e| CliError::Runtime(e.to_string()))?;
        write_with(dir, &format!("kappa_{label}_{when}.csv"), artifacts, |w| write_control_csv(w, &control))?;
    }
    Ok(())
}

fn prepare_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("output directory {}: {e}", dir.display())))?;
    let probe = dir.join(".rdc-write-test");
    File::create(&probe)
        .and_then(|_| std::fs::remove_file(&probe))
        .map_err(|e| CliError::Config(format!("output directory {} is not writable: {e}", dir.display())))
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

struct SeedContext<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    dir: PathBuf,
    resume: Option<Checkpoint>,
}

/// Trains one seed, writing artifacts as it goes. The manifest is written
/// even when training fails, flagged as partial.
fn run_seed(ctx: SeedContext<'_>, env: &mut dyn EnvHandle) -> Result<SeedRun, CliError> {
    let started = Instant::now();
    let spec = env.spec();
    let mut artifacts = Vec::new();
    let mut run = SeedRun {
        seed: ctx.seed,
        dir: ctx.dir.clone(),
        baseline: BaselineTrace::default(),
        baseline_episode: None,
        traces: Vec::new(),
        updates: Vec::new(),
        summary: None,
    };
    let resumed_from = ctx.resume.as_ref().map(|cp| cp.episodes_done);
    let outcome = train_seed(&ctx, env, &spec, &mut run, &mut artifacts);

    let (status, error) = match &outcome {
        Ok(()) => ("complete", None),
        Err(e) => ("failed", Some(e.to_string())),
    };
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        tool: format!("rdc {}", env!("CARGO_PKG_VERSION")),
        status,
        error,
        partial: outcome.is_err(),
        mode: ctx.config.run.mode,
        seed: ctx.seed,
        episodes_requested: ctx.config.agent.episodes,
        episodes_completed: run.traces.iter().filter(|t| !t.aborted()).count(),
        episodes_aborted: run.traces.iter().filter(|t| t.aborted()).count(),
        non_monotone_updates: run.updates.iter().filter(|u| !u.is_monotone()).count(),
        resumed_from_episode: resumed_from,
        mesh: MeshInfo { nodes: spec.obs_size, regions: spec.n_actions },
        artifacts: artifacts.clone(),
        config: ctx.config.echo()?,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(runtime)?;
    let mut w = create(&ctx.dir, "manifest.json")?;
    writeln!(w, "{text}").and_then(|_| w.flush()).map_err(runtime)?;
    outcome.map(|_| run)
}

fn train_seed(
    ctx: &SeedContext<'_>,
    env: &mut dyn EnvHandle,
    spec: &EnvSpec,
    run: &mut SeedRun,
    artifacts: &mut Vec<String>,
) -> Result<(), CliError> {
    let cfg = ctx.config;
    let dir = ctx.dir.as_path();
    let mut agent = match &ctx.resume {
        Some(cp) => Agent::from_checkpoint(cp).map_err(|e| CliError::Config(format!("agent.resume: {e}")))?,
        None => Agent::new(cfg.agent.policy.clone(), spec.obs_size, spec.n_actions, ctx.seed),
    };
    if (agent.policy.n_in, agent.policy.n_out) != (spec.obs_size, spec.n_actions) {
        return Err(CliError::Config(format!(
            "checkpoint policy is {}→{}, environment needs {}→{}",
            agent.policy.n_in, agent.policy.n_out, spec.obs_size, spec.n_actions
        )));
    }
    let mut rec = Recorder { inner: env, first: None, last: None };

    run.baseline = match &ctx.resume {
        Some(cp) => cp.baseline.clone().ok_or_else(|| CliError::Config("agent.resume: checkpoint has no baseline".into()))?,
        None => {
            let (episode, baseline) = agent.record_baseline(&mut rec).map_err(|e| runtime(format!("baseline episode: {e}")))?;
            write_with(dir, "baseline.csv", artifacts, |w| trace::write_csv(w, std::slice::from_ref(&episode)))?;
            let (first, last) = (rec.first.take().unwrap(), rec.last.take().unwrap());
            write_snapshots(dir, spec, "before", &first, &last, artifacts)?;
            run.baseline_episode = Some(episode);
            baseline
        }
    };
    if cfg.agent.episodes == 0 {
        return Ok(());
    }

    let mut traces = Vec::new();
    let mut updates = Vec::new();
    let every = (cfg.agent.episodes / 10).max(1);
    let result = agent.train(&mut rec, cfg.agent.episodes, |t, u| {
        if (t.episode + 1) % every == 0 {
            log::info!("seed {} episode {}: mean reward {:.6}", ctx.seed, t.episode + 1, t.mean_reward());
        }
        traces.push(t.clone());
        updates.extend(u.cloned());
    });
    run.traces = traces;
    run.updates = updates;
    if !run.traces.is_empty() {
        write_with(dir, "traces.csv", artifacts, |w| trace::write_csv(w, &run.traces))?;
    }
    if let Err(e) = result {
        return Err(match e {
            PolicyError::Env(e) => runtime(format!("environment: {e}")),
            e => runtime(e),
        });
    }

    if let (Some(first), Some(last)) = (rec.first.take(), rec.last.take()) {
        write_snapshots(dir, spec, "after", &first, &last, artifacts)?;
    }
    agent.checkpoint(Some(run.baseline.clone())).save(dir.join("checkpoint.json")).map_err(runtime)?;
    artifacts.push("checkpoint.json".into());

    let before: Vec<EpisodeTrace> = run.baseline_episode.iter().cloned().collect();
    if !before.is_empty() {
        match compare(&before, &run.traces) {
            Ok(c) => {
                write_with(dir, "compare.csv", artifacts, |w| c.write_csv(w))?;
                write_with(dir, "compare.txt", artifacts, |w| w.write_all(c.to_text().as_bytes()))?;
            }
            Err(e) => log::warn!("no comparison for seed {}: {e}", ctx.seed),
        }
    }
    run.summary = Summary::new(&run.baseline, &run.traces);
    Ok(())
}

/// Trains in-process or against a remote environment, per `run.mode`.
pub fn run(config: &ExperimentConfig) -> Result<Vec<SeedRun>, CliError> {
    let mesh = config.validate()?;
    let out = config.run.out.clone().unwrap_or_else(|| PathBuf::from("rdc-out"));
    prepare_dir(&out)?;
    let resume = match &config.agent.resume {
        Some(path) => Some(Checkpoint::load(path).map_err(|e| CliError::Config(format!("agent.resume: {e}")))?),
        None => None,
    };
    let seeds: Vec<u64> = (0..config.agent.seeds as u64).map(|k| config.agent.seed + k).collect();
    let dir_for = |seed: u64| if seeds.len() == 1 { out.clone() } else { out.join(format!("seed-{seed}")) };

    let mut runs = Vec::new();
    let mut failure = None;
    match config.run.mode {
        Mode::Serve => return Err(CliError::Config("run.mode = serve: use `rdc serve`".into())),
        Mode::InProcess => {
            let mesh = Arc::new(mesh);
            for &seed in &seeds {
                let mut env = Environment::new(mesh.clone(), config.sim.clone(), config.env.clone())
                    .map_err(|e| CliError::Config(e.to_string()))?;
                if let Some(b) = resume.as_ref().and_then(|cp| cp.baseline.clone()) {
                    env.set_baseline(b);
                }
                let dir = dir_for(seed);
                prepare_dir(&dir)?;
                let ctx = SeedContext { config, seed, dir, resume: resume.clone() };
                match run_seed(ctx, &mut env) {
                    Ok(r) => runs.push(r),
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
        }
        Mode::Connect => {
            let addr = format!("{}:{}", config.run.addr, config.run.port);
            let timeout = Some(Duration::from_secs(config.run.timeout_secs));
            let mut remote =
                RemoteEnv::connect(&addr, timeout).map_err(|e| runtime(format!("connecting to {addr}: {e}")))?;
            log::info!("connected to environment at {addr}");
            for &seed in &seeds {
                let dir = dir_for(seed);
                prepare_dir(&dir)?;
                match run_seed(SeedContext { config, seed, dir, resume: None }, &mut remote) {
                    Ok(r) => runs.push(r),
                    Err(e) => {
                        failure = Some(e);
                        break;
                    }
                }
            }
            if failure.is_none() && !config.run.keep_server {
                remote.shutdown().map_err(|e| runtime(format!("shutting down server: {e}")))?;
            }
        }
    }
    write_summary(&out, &runs)?;
    match failure {
        Some(e) => Err(e),
        None => Ok(runs),
    }
}

fn write_summary(out: &Path, runs: &[SeedRun]) -> Result<(), CliError> {
    let rows: Vec<_> = runs.iter().filter_map(|r| r.summary.as_ref().map(|s| (r.seed, s))).collect();
    if rows.is_empty() {
        return Ok(());
    }
    let mut w = create(out, "summary.csv")?;
    let mut body = format!("{}\n", Summary::CSV_HEADER);
    for (seed, s) in &rows {
        body += &s.csv_row(&seed.to_string());
        body.push('\n');
    }
    if rows.len() > 1 {
        let n = rows.len() as f64;
        let avg = |f: fn(&Summary) -> f64| rows.iter().map(|(_, s)| f(s)).sum::<f64>() / n;
        let mean = Summary {
            episodes: rows[0].1.episodes,
            aborted: rows.iter().map(|(_, s)| s.aborted).sum(),
            window: rows[0].1.window,
            reward_first: avg(|s| s.reward_first),
            reward_last: avg(|s| s.reward_last),
            norm_c_last: avg(|s| s.norm_c_last),
            norm_kappa_last: avg(|s| s.norm_kappa_last),
            norm_c_baseline: avg(|s| s.norm_c_baseline),
            norm_kappa_baseline: avg(|s| s.norm_kappa_baseline),
        };
        body += &mean.csv_row("mean");
        body.push('\n');
    }
    w.write_all(body.as_bytes()).and_then(|_| w.flush()).map_err(runtime)
}

/// Serves the configured environment until a client sends `shutdown`.
/// `on_bound` sees the bound address before the first accept.
pub fn serve(config: &ExperimentConfig, on_bound: impl FnOnce(SocketAddr)) -> Result<(), CliError> {
    let mesh = config.validate()?;
    let mut env = Environment::new(Arc::new(mesh), config.sim.clone(), config.env.clone())
        .map_err(|e| CliError::Config(e.to_string()))?;
    let addr = format!("{}:{}", config.run.addr, config.run.port);
    let server = Server::bind(&addr)
        .map_err(|e| runtime(format!("cannot bind {addr}: {e}")))?
        .with_timeout(Some(Duration::from_secs(config.run.timeout_secs)));
    on_bound(server.local_addr().map_err(runtime)?);
    server.serve(&mut env).map_err(runtime)
}
