use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hypolab::commands::{self, error_kind, CommandOutput, COMMANDS};
use hypolab::config::{ExperimentConfig, Overrides};
use hypolab::output::{run_dir, to_pretty, write_run, RunHeaderInfo};
use serde_json::json;

const EXIT_GATE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

const DEFAULTS: &str = "\
Config defaults (TOML or JSON; a manifest.json from an earlier run is accepted):
  label = \"default\"          grid.horizon = 1.0         grid.steps = 1000
  seeds.master = 42           projection = identity
  monte_carlo: simulate_paths = 10, samples = 10000, gamma_paths = 100, picard_iterations = 7
  brackets: depth = 2, cap = 500
  flows: formulation = \"conjugated\" (or \"direct\", \"auto\"), fd_eps = 1e-5, refinements = 3
  tolerances: fd_relative = 5e-3, right_inverse = 1e-3, route_relative = 1e-2,
              quadratic_form = 1e-10, rank = 1e-8, gamma_min = 1e-6, kde_l1 = 0.1,
              atom = 1e-9, kde_mass = 1e-3, semimartingale = 5e-2
  output_dir = \"out\"

Exit codes: 0 all gates pass, 1 a gate failed, 2 configuration error, 3 numerical error.";

#[derive(Debug, Parser)]
#[command(name = "hypolab", version, about = "Hypoelliptic stochastic evolution equations under Galerkin truncation", after_help = DEFAULTS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment configuration (TOML, JSON, or a run manifest).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Path or sample count for the command.
    #[arg(long, global = true, value_name = "N")]
    paths: Option<usize>,
    /// Time step; the step count becomes round(horizon / dt).
    #[arg(long, global = true, value_name = "FLOAT")]
    dt: Option<f64>,
    /// Bracket depth.
    #[arg(long, global = true, value_name = "INT")]
    depth: Option<usize>,
    /// Output root.
    #[arg(long, global = true, value_name = "PATH")]
    outdir: Option<String>,
    /// Print the report to stdout.
    #[arg(long, global = true)]
    json: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve sample paths; writes paths.csv and the Picard diagnostic.
    Simulate,
    /// First variation against finite differences and the right-inverse residual.
    FlowCheck,
    /// Malliavin derivative routes, covariance and the Malliavin matrix.
    Malliavin,
    /// Bracket rank at the initial point and the semimartingale identity.
    Hormander,
    /// Monte Carlo law of F X_T: kernel density stability and atoms.
    Density,
    /// Every command in turn.
    All,
}

impl Command {
    fn names(&self) -> Vec<&'static str> {
        match self {
            Command::Simulate => vec!["simulate"],
            Command::FlowCheck => vec!["flow-check"],
            Command::Malliavin => vec!["malliavin"],
            Command::Hormander => vec!["hormander"],
            Command::Density => vec!["density"],
            Command::All => COMMANDS.to_vec(),
        }
    }
}

fn config_error(msg: &str) -> ExitCode {
    eprintln!("{}", json!({ "error": { "kind": "config", "message": msg } }));
    ExitCode::from(EXIT_CONFIG)
}

fn write(outdir: &Path, name: &str, cfg: &ExperimentConfig, out: &CommandOutput) -> std::io::Result<PathBuf> {
    let info = RunHeaderInfo {
        command: name,
        model: &out.header.model,
        n: out.header.n,
        m: out.header.m,
    };
    write_run(outdir, &info, cfg, &out.csvs, &out.report)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Some(path) = cli.config.as_deref() else {
        return config_error("--config PATH is required");
    };
    let base = match ExperimentConfig::load(path) {
        Ok(c) => c,
        Err(e) => return config_error(&e.0),
    };
    let overrides = Overrides {
        seed: cli.seed,
        paths: cli.paths,
        dt: cli.dt,
        depth: cli.depth,
        outdir: cli.outdir.clone(),
    };
    let mut code = 0u8;
    for name in cli.command.names() {
        let mut cfg = base.clone();
        if let Err(e) = cfg.apply(&overrides, name) {
            return config_error(&e.0);
        }
        let outdir = PathBuf::from(cfg.output_dir.clone().unwrap_or_else(|| "out".into()));
        let out = match commands::run(name, &cfg) {
            Ok(o) => o,
            Err(e) => {
                let kind = if matches!(e, hypolab_core::Error::InvalidConfig(_)) { EXIT_CONFIG } else { EXIT_RUNTIME };
                eprintln!(
                    "{}",
                    json!({ "command": name, "error": { "kind": error_kind(&e), "message": e.to_string() } })
                );
                code = code.max(kind);
                continue;
            }
        };
        match write(&outdir, name, &cfg, &out) {
            Ok(dir) => eprintln!("{name}: wrote {}", dir.display()),
            Err(e) => {
                eprintln!("{}", json!({ "command": name, "error": { "kind": "io", "message": format!("{}: {e}", run_dir(&outdir, name, &cfg.label).display()) } }));
                code = code.max(EXIT_RUNTIME);
                continue;
            }
        }
        if cli.json {
            let bytes = to_pretty(&out.report).expect("report serializes");
            print!("{}", String::from_utf8_lossy(&bytes));
        }
        if !out.pass() {
            eprintln!("{}", json!({ "command": name, "failures": out.failures() }));
            code = code.max(EXIT_GATE);
        }
    }
    ExitCode::from(code)
}
