//! `dsmcsg`: runs the configured experiments and writes CSV outputs.
//!
//! Exit codes: 0 success, 1 a result check failed, 2 configuration error,
//! 3 runtime error.

mod config;
mod experiments;

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use dsmcsg::analysis::{write_observables_csv, NodeRule};
use dsmcsg::dsmc::{replay, EventLog};

use config::ExperimentConfig;
use experiments::{run_experiment, Sink};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl From<dsmcsg::Error> for CliError {
    fn from(e: dsmcsg::Error) -> Self {
        match e {
            dsmcsg::Error::Config(m) => CliError::Config(m),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "dsmcsg", version, about = "Stochastic-Galerkin DSMC experiments")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug)]
struct ConfigArgs {
    /// TOML file merged over the experiment defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override as `section.key=value`; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment: test1, test2, test3, spectral, mc-rate or bounds.
    Run {
        /// Experiment name; may also come from the config file.
        experiment: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (default: `$DSMCSG_OUTPUT_DIR/<experiment>`, else `output/<experiment>`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Resolve and check a configuration, then print it.
    Validate {
        experiment: Option<String>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Re-run a recorded event log with another polynomial order.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Polynomial order in every random dimension.
        #[arg(long)]
        order: usize,
        #[arg(long, value_enum, default_value_t = Nodes::Interpolatory)]
        nodes: Nodes,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Nodes {
    Oversampled,
    Interpolatory,
}

impl From<Nodes> for NodeRule {
    fn from(n: Nodes) -> Self {
        match n {
            Nodes::Oversampled => NodeRule::Oversampled,
            Nodes::Interpolatory => NodeRule::Interpolatory,
        }
    }
}

fn resolve(experiment: Option<String>, args: &ConfigArgs) -> Result<ExperimentConfig, CliError> {
    let mut overrides = Vec::new();
    if let Some(e) = experiment {
        overrides.push(format!("experiment=\"{e}\""));
    }
    overrides.extend(args.set.iter().cloned());
    ExperimentConfig::load(args.config.as_deref(), &overrides)
}

fn experiment_name(cfg: &ExperimentConfig) -> String {
    toml::Value::try_from(cfg.experiment)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_else(|| "experiment".into())
}

fn output_dir(cfg: &ExperimentConfig, out: Option<PathBuf>) -> PathBuf {
    if let Some(o) = out {
        return o;
    }
    if let Some(o) = &cfg.output_dir {
        return PathBuf::from(o);
    }
    let base = std::env::var_os("DSMCSG_OUTPUT_DIR").map(PathBuf::from).unwrap_or_else(|| "output".into());
    base.join(experiment_name(cfg))
}

fn header(hash: &str) -> String {
    format!("# config-sha256: {hash}\n")
}

fn cmd_run(experiment: Option<String>, args: &ConfigArgs, out: Option<PathBuf>) -> Result<bool, CliError> {
    let cfg = resolve(experiment, args)?;
    let dir = output_dir(&cfg, out);
    let hash = cfg.hash();
    let sink = Sink::new(&dir, &hash)?;
    sink.text("config.toml", &format!("{}{}", header(&hash), cfg.to_toml()))?;
    info!("running {} into {}", experiment_name(&cfg), dir.display());
    let report = run_experiment(&cfg, &sink)?;
    print!("{}", report.render());
    println!("outputs in {}", dir.display());
    Ok(report.passed())
}

fn cmd_validate(experiment: Option<String>, args: &ConfigArgs) -> Result<(), CliError> {
    let cfg = resolve(experiment, args)?;
    print!("{}{}", header(&cfg.hash()), cfg.to_toml());
    Ok(())
}

#[derive(Serialize)]
struct ReplayConfig {
    log_sha256: String,
    order: usize,
    nodes: Nodes,
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

fn cmd_replay(log_path: &Path, order: usize, nodes: Nodes, out: Option<PathBuf>) -> Result<(), CliError> {
    let rc = ReplayConfig {
        log_sha256: sha256_file(log_path)?,
        order,
        nodes,
    };
    let text = toml::to_string(&rc).expect("replay config serializes");
    let hash: String = Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    let f = File::open(log_path).map_err(|e| CliError::Config(format!("cannot open {}: {e}", log_path.display())))?;
    let log = EventLog::read(BufReader::new(f)).map_err(|e| CliError::Config(e.to_string()))?;
    let basis = NodeRule::from(nodes).basis(&log.header.param_spec, order)?;
    let res = replay(&log, &basis, None, None, None)?;
    let dir = out.unwrap_or_else(|| {
        let base = std::env::var_os("DSMCSG_OUTPUT_DIR").map(PathBuf::from).unwrap_or_else(|| "output".into());
        base.join(format!("replay-M{order}"))
    });
    let sink = Sink::new(&dir, &hash)?;
    sink.text("replay.toml", &format!("{}{text}", header(&hash)))?;
    sink.csv("observables.csv", |w| write_observables_csv(w, &res.trajectory))?;
    let mut stdout = std::io::stdout().lock();
    writeln!(
        stdout,
        "replayed {} steps of {} particles at order {order}; outputs in {}",
        res.stats.steps,
        res.ensemble.len(),
        dir.display()
    )?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Run { experiment, cfg, out } => cmd_run(experiment, &cfg, out),
        Command::Validate { experiment, cfg } => cmd_validate(experiment, &cfg).map(|_| true),
        Command::Replay { log, order, nodes, out } => cmd_replay(&log, order, nodes, out).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("one or more checks failed");
            ExitCode::from(1)
        }
        Err(e @ CliError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e @ CliError::Runtime(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(3)
        }
    }
}
