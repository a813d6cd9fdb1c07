use std::path::PathBuf;
use std::process::ExitCode;

use biembed_cli::report::cmd_report;
use biembed_cli::{run_command, CliError, Command, PipelineConfig, RunDir};
use clap::{Args, Parser, Subcommand};

/// Bilingual sentence-embedding pipeline.
#[derive(Parser)]
#[command(name = "biembed", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Pipeline config (TOML). Omitted: built-in defaults.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Run directory; each command writes to its own subdirectory.
    #[arg(short, long)]
    run_dir: PathBuf,
    /// Override a config value, e.g. `--set stage1.lr=1e-3`. Repeatable;
    /// applied after the file, later ones win.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Replace this command's existing output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the bilingual BPE tokenizer.
    TokenizerTrain(Common),
    /// Filter, refine and deduplicate raw pairs.
    Curate(Common),
    /// Masked-LM pretraining with alternating languages.
    Pretrain(Common),
    /// Contrastive training on pair datasets.
    TrainPairs(Common),
    /// Multi-task training (pairs, retrieval, STS).
    TrainMultitask(Common),
    /// Evaluate the newest model on the configured tasks.
    Eval(Common),
    /// Write the seeded synthetic corpora and tasks plus a toy pipeline config.
    SynthData(Common),
    /// Summarize one or more run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Where to write the loss-curve CSV.
        #[arg(long, default_value = "loss_curves.csv")]
        csv: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let (cmd, common) = match cli.cmd {
        Cmd::Report { runs, csv } => {
            let (table, _) = cmd_report(&runs, &csv)?;
            print!("{table}");
            eprintln!("loss curves written to {}", csv.display());
            return Ok(());
        }
        Cmd::TokenizerTrain(c) => (Command::TokenizerTrain, c),
        Cmd::Curate(c) => (Command::Curate, c),
        Cmd::Pretrain(c) => (Command::Pretrain, c),
        Cmd::TrainPairs(c) => (Command::TrainPairs, c),
        Cmd::TrainMultitask(c) => (Command::TrainMultitask, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::SynthData(c) => (Command::SynthData, c),
    };
    let cfg = PipelineConfig::load(common.config.as_deref(), &common.overrides)?;
    let dir = run_command(cmd, &cfg, &RunDir::new(common.run_dir, common.force))?;
    eprintln!("{}: wrote {}", cmd.name(), dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
