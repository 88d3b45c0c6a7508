use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aotnse::io::config::{describe, Config};
use aotnse::pipeline::{self, Command, EXIT_CONFIG, EXIT_FAILURE};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aotnse", version, about = "2D Navier-Stokes with nudging data assimilation and viscosity recovery")]
struct Cli {
    /// Overrides the forcing seed of commands that generate a force.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel sweeps (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    /// Directory under which `out_dir` is created.
    #[arg(long, global = true, env = "AOTNSE_OUT_ROOT", default_value = ".")]
    out_root: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings; these win over the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args)]
struct ObsArgs {
    /// Reference output directory holding the observations.
    #[arg(long)]
    obs: Option<PathBuf>,
    /// Reference output directory used as ground truth.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Integrate the forced equations from rest.
    Reference(Common),
    /// Run a nudged model against stored observations.
    Assimilate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        obs: ObsArgs,
    },
    /// Recover the viscosity from stored observations.
    Recover {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        obs: ObsArgs,
        /// 1 (stall-triggered) or 2 (windowed).
        #[arg(long)]
        algorithm: Option<u8>,
    },
    /// Difference-quotient convergence study of the viscosity sensitivity.
    Sensitivity(Common),
    /// Time-averaged energy spectrum of stored snapshots.
    Spectrum(Common),
    /// Assimilation sweep over viscosity errors.
    Experiment(Common),
    /// Rerun a previous run from its manifest.
    Replay {
        manifest: PathBuf,
    },
    /// List the config keys of a command.
    Keys {
        command: String,
    },
}

fn overrides(common: &Common, extra: Vec<(&str, String)>, seed: Option<u64>, cmd: Command) -> Result<Vec<(String, String)>, String> {
    let mut out = Vec::new();
    if let Some(s) = seed {
        if cmd.schema().key("seed").is_some() {
            out.push(("seed".to_string(), s.to_string()));
        }
    }
    for (k, v) in extra {
        out.push((k.to_string(), v));
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn load(cmd: Command, common: &Common, extra: Vec<(&str, String)>, seed: Option<u64>) -> aotnse::Result<Config> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| aotnse::Error::Io {
            path: p.clone(),
            source: e,
        })?,
        None => String::new(),
    };
    let o = overrides(common, extra, seed, cmd).map_err(|m| aotnse::Error::Config {
        key: "--set".into(),
        msg: m,
    })?;
    Config::parse_with(&text, cmd.schema(), &o)
}

fn path_arg(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.to_string_lossy().into_owned())
}

fn run(cli: Cli, out_root: &Path) -> aotnse::Result<i32> {
    let (cmd, cfg) = match cli.cmd {
        Cmd::Keys { command } => {
            let Some(c) = Command::from_name(&command) else {
                eprintln!("unknown command `{command}`");
                return Ok(EXIT_CONFIG);
            };
            print!("{}", describe(c.schema()));
            return Ok(0);
        }
        Cmd::Replay { manifest } => {
            let o = pipeline::replay(&manifest, out_root)?;
            report(&o);
            return Ok(o.exit_code);
        }
        Cmd::Reference(c) => (Command::Reference, load(Command::Reference, &c, vec![], cli.seed)?),
        Cmd::Sensitivity(c) => (Command::Sensitivity, load(Command::Sensitivity, &c, vec![], cli.seed)?),
        Cmd::Spectrum(c) => (Command::Spectrum, load(Command::Spectrum, &c, vec![], cli.seed)?),
        Cmd::Experiment(c) => (Command::Experiment, load(Command::Experiment, &c, vec![], cli.seed)?),
        Cmd::Assimilate { common, obs } => {
            let mut extra = vec![];
            extra.extend(path_arg(&obs.obs).map(|v| ("obs", v)));
            extra.extend(path_arg(&obs.truth).map(|v| ("truth", v)));
            (Command::Assimilate, load(Command::Assimilate, &common, extra, cli.seed)?)
        }
        Cmd::Recover { common, obs, algorithm } => {
            let mut extra = vec![];
            extra.extend(path_arg(&obs.obs).map(|v| ("obs", v)));
            extra.extend(path_arg(&obs.truth).map(|v| ("truth", v)));
            extra.extend(algorithm.map(|a| ("algorithm", a.to_string())));
            (Command::Recover, load(Command::Recover, &common, extra, cli.seed)?)
        }
    };
    let o = pipeline::execute(cmd, cfg, out_root)?;
    report(&o);
    Ok(o.exit_code)
}

fn report(o: &pipeline::Outcome) {
    log::info!("{} finished with status {} in {}", o.manifest.command, o.exit_code, o.out_dir.display());
    println!("{}", o.out_dir.display());
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_FAILURE as u8);
        }
    }
    let out_root = cli.out_root.clone();
    let code = match run(cli, &out_root) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            pipeline::exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
