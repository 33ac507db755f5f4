mod commands;
mod error;
mod plot;
mod rundir;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use xmodal_core::downstream::ProjectionMethod;

/// Paired H&E / SIM representation learning on a synthetic corpus.
#[derive(Debug, Parser)]
#[command(name = "xmodal", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus.
    Synth(commands::SynthArgs),
    /// Write the default training config.
    Config {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run the staged curriculum.
    Pretrain(commands::PretrainArgs),
    /// Embed every patch of a corpus with a checkpoint.
    Embed(commands::EmbedArgs),
    /// Run a downstream task on a checkpoint.
    Eval(commands::EvalArgs),
    /// Train and evaluate every ablation row for several seeds.
    Ablation(commands::AblationArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Task {
    Mil,
    Cluster,
    Align,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Projection {
    Pca,
    Tsne,
}

impl From<Projection> for ProjectionMethod {
    fn from(p: Projection) -> Self {
        match p {
            Projection::Pca => ProjectionMethod::Pca,
            Projection::Tsne => ProjectionMethod::NeighborEmbedding,
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Config { out, force } => commands::write_default_config(&out, force),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Embed(a) => commands::embed(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablation(a) => commands::ablation(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
