use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use bipstab::experiments::{run, CheckKind, Experiment, ExperimentConfig};
use bipstab::transport::w1_1d_oracle;
use bipstab::ParticleMeasure;
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bipstab", version, about = "Posterior stability experiments and transport oracles")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a study and write rates.csv, bounds.jsonl and manifest.json.
    Run {
        /// One of: empirical_prior, matern_hyper, pushforward, surrogate,
        /// data_perturbation, likelihood_perturbation, prior_shift.
        experiment: String,
        /// JSON config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory (overrides the config's output_dir).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Root seed (overrides the config's seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse and validate a config without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the default config of a study as JSON.
    Defaults { experiment: String },
    /// Standalone transport oracles.
    Oracle {
        #[command(subcommand)]
        oracle: Oracle,
    },
}

#[derive(Subcommand)]
enum Oracle {
    /// W_p between two 1D measures given as `w,x1` CSV files.
    Ot1d {
        #[arg(long = "in", num_args = 1, required = true)]
        inputs: Vec<PathBuf>,
        #[arg(short, default_value_t = 1.0)]
        p: f64,
    },
}

fn load_config(path: &PathBuf) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    ExperimentConfig::from_json(&text).with_context(|| format!("invalid config {}", path.display()))
}

fn default_experiment(name: &str) -> Result<Experiment> {
    match Experiment::default_for(name) {
        Some(e) => Ok(e),
        None => bail!("unknown experiment `{name}`; expected one of {}", Experiment::NAMES.join(", ")),
    }
}

fn run_command(experiment: String, config: Option<PathBuf>, out: Option<PathBuf>, seed: Option<u64>) -> Result<bool> {
    let mut cfg = match &config {
        Some(path) => load_config(path)?,
        None => ExperimentConfig::new(default_experiment(&experiment)?, 0),
    };
    if cfg.experiment.name() != experiment {
        bail!("config describes `{}` but `{experiment}` was requested", cfg.experiment.name());
    }
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.output_dir = Some(out);
    }
    let dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("results").join(&experiment));
    let outcome = run(&cfg)?;
    outcome.write_outputs(&dir, &cfg)?;
    for check in &outcome.checks {
        let kind = match check.kind {
            CheckKind::Bound => "bound",
            CheckKind::Rate => "rate",
            CheckKind::Sanity => "sanity",
        };
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!("{status} [{kind}] {}: {}", check.name, check.detail);
    }
    println!("wrote {}", dir.display());
    Ok(outcome.bounds_hold())
}

fn oracle_ot1d(inputs: &[PathBuf], p: f64) -> Result<()> {
    let [a, b] = inputs else {
        bail!("expected exactly two --in files, got {}", inputs.len());
    };
    let read = |path: &PathBuf| -> Result<ParticleMeasure> {
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        ParticleMeasure::read_csv(file).with_context(|| format!("parsing {}", path.display()))
    };
    println!("{}", w1_1d_oracle(&read(a)?, &read(b)?, p)?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { experiment, config, out, seed } => run_command(experiment, config, out, seed),
        Command::Validate { config } => load_config(&config).map(|cfg| {
            println!("ok: {}", cfg.experiment.name());
            true
        }),
        Command::Defaults { experiment } => default_experiment(&experiment).and_then(|e| {
            println!("{}", serde_json::to_string_pretty(&ExperimentConfig::new(e, 0))?);
            Ok(true)
        }),
        Command::Oracle { oracle: Oracle::Ot1d { inputs, p } } => oracle_ot1d(&inputs, p).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
