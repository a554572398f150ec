mod commands;
mod config;
mod output;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;
use sha2::{Digest, Sha256};

use config::{Command, RunConfig};

/// Differentiable projective-dynamics soft-body simulator.
#[derive(Parser, Debug)]
#[command(name = "softpd", version)]
struct Args {
    /// simulate | benchmark | gradcheck | optimize; overrides the config's
    /// `command`.
    command: Option<String>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads for element-parallel work.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Solver tolerance.
    #[arg(long)]
    tol: Option<f64>,
}

#[derive(Debug)]
pub enum Failure {
    /// Exit code 2.
    Invalid(String),
    /// Exit code 1.
    Numerical(String),
}

impl Failure {
    pub fn message(&self) -> &str {
        match self {
            Failure::Invalid(m) | Failure::Numerical(m) => m,
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 2,
            Failure::Numerical(_) => 1,
        }
    }
}

impl From<softpd::Error> for Failure {
    fn from(e: softpd::Error) -> Self {
        match e {
            softpd::Error::InvalidArgument(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

fn load(args: &Args) -> Result<RunConfig, Failure> {
    let command = match &args.command {
        Some(c) => Some(Command::parse(c).ok_or_else(|| Failure::Invalid(format!("unknown command '{c}'")))?),
        None => None,
    };
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
            let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Failure::Invalid(e.to_string()))?;
            if let Some(c) = &args.command {
                table.insert("command".into(), toml::Value::String(c.clone()));
            }
            table.try_into::<RunConfig>().map_err(|e| Failure::Invalid(e.to_string()))?
        }
        None => RunConfig::with_command(command.ok_or_else(|| Failure::Invalid("no command given and no --config".into()))?),
    };
    if let Some(t) = args.threads {
        cfg.threads = t;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(o) = &args.out {
        cfg.out = o.clone();
    }
    if let Some(t) = args.tol {
        cfg.solver.tol = t;
    }
    cfg.validate().map_err(Failure::Invalid)?;
    Ok(cfg)
}

#[derive(Serialize)]
struct RunMetadata<'a> {
    command: Command,
    config_sha256: String,
    seed: u64,
    threads: usize,
    build: String,
    config: &'a RunConfig,
}

fn run(args: &Args) -> Result<(), Failure> {
    let cfg = load(args)?;
    fs::create_dir_all(&cfg.out).map_err(|e| Failure::Invalid(format!("cannot create {}: {e}", cfg.out.display())))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build_global()
        .map_err(|e| Failure::Invalid(e.to_string()))?;
    let text = cfg.to_toml();
    let meta = RunMetadata {
        command: cfg.command,
        config_sha256: format!("{:x}", Sha256::digest(text.as_bytes())),
        seed: cfg.seed,
        threads: cfg.threads,
        build: format!("softpd {}", env!("CARGO_PKG_VERSION")),
        config: &cfg,
    };
    output::write_json(&cfg.out.join("run.json"), &meta)?;
    match cfg.command {
        Command::Simulate => commands::simulate(&cfg),
        Command::Benchmark => commands::benchmark(&cfg),
        Command::Gradcheck => commands::gradcheck(&cfg),
        Command::Optimize => commands::optimize(&cfg),
    }
}

fn main() -> ExitCode {
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
