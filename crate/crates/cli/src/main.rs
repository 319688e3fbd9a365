use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rdc::{CliError, ExperimentConfig, MeshSpec, Mode, Sources};
use rdc_core::trace;

/// Learned diffusivity control for a spatial SIS epidemic model.
#[derive(Parser)]
#[command(name = "rdc", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train in-process (or as configured by `run.mode`) and write artifacts.
    Run(Common),
    /// Host the environment for a remote agent.
    Serve(Common),
    /// Train against an environment served by `rdc serve`.
    Train {
        /// Server address, `host:port`.
        #[arg(long)]
        connect: String,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a baseline trace with a training trace.
    Compare {
        before: PathBuf,
        after: PathBuf,
        /// Directory for compare.csv and compare.txt.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mesh utilities.
    Mesh {
        #[command(subcommand)]
        command: MeshCommand,
    },
}

#[derive(Subcommand)]
enum MeshCommand {
    /// Write a structured rectangle mesh (or a preset's mesh) to a file.
    Gen {
        /// Use the mesh of this preset.
        #[arg(long, conflicts_with_all = ["width", "height", "nx", "ny", "patches_x", "patches_y"])]
        preset: Option<String>,
        #[arg(long, default_value_t = 1.0)]
        width: f64,
        #[arg(long, default_value_t = 1.0)]
        height: f64,
        #[arg(long, default_value_t = 16)]
        nx: usize,
        #[arg(long, default_value_t = 16)]
        ny: usize,
        #[arg(long, default_value_t = 8)]
        patches_x: usize,
        #[arg(long, default_value_t = 8)]
        patches_y: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// TOML config file, or a manifest.json to rerun.
    #[arg(long)]
    config: Option<PathBuf>,
    /// square | regions
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Independent trainings with consecutive seeds.
    #[arg(long)]
    seeds: Option<usize>,
    /// diff | state
    #[arg(long)]
    objective: Option<String>,
    #[arg(long)]
    dt: Option<f64>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    addr: Option<String>,
    #[arg(long)]
    port: Option<u16>,
    /// I/O timeout in seconds for socket reads and writes.
    #[arg(long)]
    timeout: Option<u64>,
    /// Any config key, e.g. `--set sim.beta=3 --set env.weights.w2=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,
}

fn quoted(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

impl Common {
    fn resolve(&self, mode: Option<Mode>) -> Result<ExperimentConfig, CliError> {
        let mut overrides = Vec::new();
        for s in &self.sets {
            let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config(format!("--set {s:?}: expected KEY=VALUE")))?;
            overrides.push((k.trim().to_string(), v.trim().to_string()));
        }
        let mut push = |k: &str, v: Option<String>| overrides.extend(v.map(|v| (k.to_string(), v)));
        push("run.out", self.out.as_ref().map(|p| quoted(&p.to_string_lossy())));
        push("agent.episodes", self.episodes.map(|v| v.to_string()));
        push("agent.seed", self.seed.map(|v| v.to_string()));
        push("agent.seeds", self.seeds.map(|v| v.to_string()));
        push("env.objective", self.objective.as_deref().map(quoted));
        push("agent.resume", self.resume.as_ref().map(|p| quoted(&p.to_string_lossy())));
        push("run.addr", self.addr.as_deref().map(quoted));
        push("run.port", self.port.map(|v| v.to_string()));
        push("run.timeout_secs", self.timeout.map(|v| v.to_string()));
        if let Some(dt) = self.dt {
            // keep f64 formatting exact and always a TOML float
            push("sim.dt", Some(format!("{dt:e}")));
        }
        let sources = Sources { preset: self.preset.clone(), file: self.config.clone(), overrides };
        let mut cfg = rdc::config::resolve(&sources, |k| std::env::var(k).ok())?;
        if let Some(mode) = mode {
            cfg.run.mode = mode;
        }
        Ok(cfg)
    }
}

fn print_or<T>(common: &Common, cfg: &ExperimentConfig, f: impl FnOnce() -> Result<T, CliError>) -> Result<(), CliError> {
    if common.print_config {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    f().map(|_| ())
}

fn run_command(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(common) => {
            let cfg = common.resolve(None)?;
            print_or(&common, &cfg, || match cfg.run.mode {
                Mode::Serve => serve(&cfg),
                _ => report(rdc::run(&cfg)?),
            })
        }
        Command::Serve(common) => {
            let cfg = common.resolve(Some(Mode::Serve))?;
            print_or(&common, &cfg, || serve(&cfg))
        }
        Command::Train { connect, mut common } => {
            let (host, port) = connect
                .rsplit_once(':')
                .ok_or_else(|| CliError::Config(format!("--connect {connect:?}: expected host:port")))?;
            let port: u16 = port.parse().map_err(|_| CliError::Config(format!("--connect {connect:?}: bad port")))?;
            common.addr = Some(host.trim_matches(['[', ']']).to_string());
            common.port = Some(port);
            let cfg = common.resolve(Some(Mode::Connect))?;
            print_or(&common, &cfg, || report(rdc::run(&cfg)?))
        }
        Command::Compare { before, after, out } => compare_files(&before, &after, out),
        Command::Mesh { command: MeshCommand::Gen { preset, width, height, nx, ny, patches_x, patches_y, output } } => {
            let spec = match preset {
                Some(name) => ExperimentConfig::preset(&name)?.mesh,
                None => MeshSpec::Rectangle { width, height, nx, ny, patches_x, patches_y },
            };
            let mesh = spec.build()?;
            mesh.save(&output).map_err(|e| CliError::Runtime(format!("{}: {e}", output.display())))?;
            println!("{}: {} nodes, {} elements, {} regions", output.display(), mesh.n_nodes(), mesh.n_elements(), mesh.n_regions());
            Ok(())
        }
    }
}

fn serve(cfg: &ExperimentConfig) -> Result<(), CliError> {
    rdc::serve(cfg, |addr| {
        // scripts read this line to find the port when binding port 0
        println!("listening on {addr}");
        let _ = std::io::stdout().flush();
    })
}

fn report(runs: Vec<rdc::SeedRun>) -> Result<(), CliError> {
    for r in &runs {
        match &r.summary {
            Some(s) => println!(
                "seed {}: reward {:.6} -> {:.6}, |c| ratio {:.4}, |kappa| {:.4} (baseline {:.4}) -> {}",
                r.seed,
                s.reward_first,
                s.reward_last,
                s.norm_c_ratio(),
                s.norm_kappa_last,
                s.norm_kappa_baseline,
                r.dir.display()
            ),
            None => println!("seed {}: baseline only -> {}", r.seed, r.dir.display()),
        }
    }
    Ok(())
}

fn read_traces(path: &PathBuf) -> Result<Vec<trace::EpisodeTrace>, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    trace::read_csv(std::io::BufReader::new(file)).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn compare_files(before: &PathBuf, after: &PathBuf, out: Option<PathBuf>) -> Result<(), CliError> {
    let c = rdc::compare(&read_traces(before)?, &read_traces(after)?).map_err(|e| CliError::Config(e.to_string()))?;
    let text = c.to_text();
    print!("{text}");
    if let Some(dir) = out {
        let io = |e: std::io::Error| CliError::Runtime(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(&dir).map_err(io)?;
        let mut csv = Vec::new();
        c.write_csv(&mut csv).map_err(io)?;
        std::fs::write(dir.join("compare.csv"), csv).map_err(io)?;
        std::fs::write(dir.join("compare.txt"), text).map_err(io)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run_command(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rdc: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
