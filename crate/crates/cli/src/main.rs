use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use rsdgan_cli::{run, CliError, ExperimentConfig, Stage};

#[derive(Parser)]
#[command(name = "rsdgan", about = "Run the defense experiment pipeline")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides experiment.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides experiment.out_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restricts `run` to these stages (repeatable).
    #[arg(long, global = true)]
    stage: Vec<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Stages listed in the config, or those given with --stage.
    Run,
    Corpus,
    TrainVictim,
    TrainGan,
    Attack,
    Defend,
    Evaluate,
    Report,
}

fn configure(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config <path> is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.experiment.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.experiment.out_dir = out.clone();
    }
    let single = match cli.verb {
        Verb::Run => None,
        Verb::Corpus => Some(Stage::Corpus),
        Verb::TrainVictim => Some(Stage::TrainVictim),
        Verb::TrainGan => Some(Stage::TrainGan),
        Verb::Attack => Some(Stage::Attack),
        Verb::Defend => Some(Stage::Defend),
        Verb::Evaluate => Some(Stage::Evaluate),
        Verb::Report => Some(Stage::Report),
    };
    if let Some(s) = single {
        cfg.experiment.stages = vec![s];
    } else if !cli.stage.is_empty() {
        cfg.experiment.stages = cli
            .stage
            .iter()
            .map(|s| Stage::parse(s).ok_or_else(|| CliError::Config(format!("unknown stage {s:?}"))))
            .collect::<Result<_, _>>()?;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure(&cli).and_then(|cfg| run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
