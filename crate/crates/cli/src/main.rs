use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dasmooth::experiment::{self, run_experiment, validate_config, ExperimentConfig, Scheme};

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "dasmooth", version, about = "Twin experiments with the HMC sampling smoother, 4D-Var and the EnKS")]
struct Cli {
    /// Repeat for more detail (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a twin experiment described by a TOML file.
    Run {
        config: PathBuf,
        /// Override the experiment seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the run directory.
        #[arg(long, short)]
        output: Option<PathBuf>,
        /// Run only one scheme: hmc_smoother, fourdvar, enks or all.
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<Scheme>,
    },
    /// Check a configuration and list every problem found.
    Validate { config: PathBuf },
    /// Print a shipped configuration (double_well or lorenz96).
    Preset { name: String },
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    Scheme::parse(s).ok_or_else(|| format!("unknown scheme `{s}` (expected hmc_smoother, fourdvar, enks or all)"))
}

fn load(path: &PathBuf) -> Result<ExperimentConfig, ExitCode> {
    let raw = match std::fs::read_to_string(path) {
        Ok(raw) => raw,
        Err(e) => {
            eprintln!("error: cannot read {}: {e}", path.display());
            return Err(ExitCode::from(EXIT_VALIDATION));
        }
    };
    validate_config(&raw).map_err(|errors| {
        eprintln!("error: {} problem(s) in {}", errors.len(), path.display());
        for e in errors {
            eprintln!("  {e}");
        }
        ExitCode::from(EXIT_VALIDATION)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        2 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match cli.command {
        Command::Validate { config } => match load(&config) {
            Ok(_) => {
                println!("{}: ok", config.display());
                ExitCode::SUCCESS
            }
            Err(code) => code,
        },
        Command::Preset { name } => match experiment::preset(&name) {
            Some(text) => {
                print!("{text}");
                ExitCode::SUCCESS
            }
            None => {
                eprintln!("error: unknown preset `{name}` (available: {})", experiment::PRESETS.join(", "));
                ExitCode::from(EXIT_VALIDATION)
            }
        },
        Command::Run { config, seed, output, scheme } => {
            let mut cfg = match load(&config) {
                Ok(cfg) => cfg,
                Err(code) => return code,
            };
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            if let Some(dir) = output {
                cfg.output_dir = dir;
            }
            if let Some(scheme) = scheme {
                cfg.scheme = scheme;
            }
            match run_experiment(&cfg) {
                Ok(outcome) => {
                    print!("{}", outcome.cost.text_table());
                    println!("results written to {}", outcome.run_dir.display());
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: run failed: {e}");
                    eprintln!("partial results and a failure manifest are in {}", cfg.output_dir.display());
                    ExitCode::from(EXIT_RUNTIME)
                }
            }
        }
    }
}
