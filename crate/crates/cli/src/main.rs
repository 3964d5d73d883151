use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use stratflow_cli::{run_pipeline, PipelineError, RunConfig, Stage};

#[derive(Parser)]
#[command(name = "stratflow", version, about = "Harmonic map flow and singular-set analysis pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the flow and record a trajectory.
    Simulate(Common),
    /// Densities and strata.
    Analyze(Common),
    /// Moment spectra, displacement and the Jones functional of the flagged set.
    Gmt(Common),
    /// Good/bad-tree covering of a stratum sample.
    Cover(Common),
    /// Aggregate existing artifacts into a summary.
    Report(Common),
    /// Every stage with a config section, or those named by --stages.
    All(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output root; defaults to [output] dir.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated stage list overriding the subcommand's default.
    #[arg(long)]
    stages: Option<String>,
}

fn run(cli: Cli) -> Result<PathBuf, PipelineError> {
    let (common, default): (Common, Vec<Stage>) = match cli.cmd {
        Command::Simulate(c) => (c, vec![Stage::Simulate]),
        Command::Analyze(c) => (c, vec![Stage::Densities, Stage::Strata]),
        Command::Gmt(c) => (c, vec![Stage::Gmt]),
        Command::Cover(c) => (c, vec![Stage::Cover]),
        Command::Report(c) => (c, vec![Stage::Report]),
        Command::All(c) => (c, Vec::new()),
    };
    let mut cfg = RunConfig::load(&common.config)?;
    let default = if default.is_empty() { Stage::configured(&cfg) } else { default };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    let stages = match &common.stages {
        Some(s) => Stage::parse_list(s)?,
        None => default,
    };
    let out = common.out.unwrap_or_else(|| PathBuf::from(&cfg.output.dir));
    run_pipeline(&cfg, &out, &stages)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
