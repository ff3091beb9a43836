//! Command-line entry point: parse flags, load and validate the config,
//! dispatch to the pipeline, and report failures as machine-readable
//! JSON on standard error.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use varkit::config::{ConfigError, PipelineConfig};
use varkit::pipeline::{self, Command, StageError};

const CONFIG_ENV: &str = "VARKIT_CONFIG";

#[derive(Debug, Parser)]
#[command(
    name = "varkit",
    about = "Volatility forecasting, risk classification, and adjusted-VaR backtesting pipeline",
    version
)]
struct Cli {
    /// Path to the TOML config (falls back to $VARKIT_CONFIG)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's master seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the config's output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output on stdout
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Load prices, compute returns and normalized features, fix the split
    Ingest,
    /// Fit the volatility model on the training window and emit VaR series
    FitGarch,
    /// Select the risk threshold and label every return
    Label,
    /// Train the DDQN classifier and emit predictions
    TrainAgent,
    /// Calibrate the (b1, b2) adjustment coefficients
    Calibrate,
    /// Apply the calibrated adjustment to the VaR series
    Adjust,
    /// Run the coverage and rank-test battery on the test window
    Backtest,
    /// Fit a GPD to VaR exceedances and run the bootstrap KS test
    Evt,
    /// Collate all artifacts into report.json
    Report,
    /// Generate a simulated price CSV with the ingest schema
    Simulate,
    /// Run every stage in order
    All,
}

impl Cmd {
    fn to_pipeline(&self) -> Command {
        match self {
            Cmd::Ingest => Command::Ingest,
            Cmd::FitGarch => Command::FitGarch,
            Cmd::Label => Command::Label,
            Cmd::TrainAgent => Command::TrainAgent,
            Cmd::Calibrate => Command::Calibrate,
            Cmd::Adjust => Command::Adjust,
            Cmd::Backtest => Command::Backtest,
            Cmd::Evt => Command::Evt,
            Cmd::Report => Command::Report,
            Cmd::Simulate => Command::Simulate,
            Cmd::All => Command::All,
        }
    }
}

fn config_error(message: String, context: String) -> StageError {
    StageError {
        stage: "config".to_string(),
        code: "config_invalid".to_string(),
        message,
        context,
    }
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, StageError> {
    let path = cli
        .config
        .clone()
        .or_else(|| std::env::var(CONFIG_ENV).ok().map(PathBuf::from))
        .ok_or_else(|| {
            config_error(
                format!("no config given; pass --config or set ${CONFIG_ENV}"),
                String::new(),
            )
        })?;
    let mut cfg = PipelineConfig::from_path(&path).map_err(|e| {
        let context = path.display().to_string();
        match e {
            ConfigError::Io { source, .. } => config_error(source.to_string(), context),
            other => config_error(other.to_string(), context),
        }
    })?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn run() -> Result<(), StageError> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let cmd = cli.command.to_pipeline();
    if !cli.quiet {
        println!("varkit {} -> {}", cmd.stage_name(), cfg.output_dir.display());
    }
    pipeline::run(cmd, &cfg)?;
    if !cli.quiet {
        println!("done");
    }
    Ok(())
}

fn main() {
    if let Err(err) = run() {
        let json = serde_json::to_string(&err)
            .unwrap_or_else(|_| format!("{{\"stage\":\"{}\",\"code\":\"{}\"}}", err.stage, err.code));
        eprintln!("{json}");
        std::process::exit(err.exit_code());
    }
}
