//! `stnas`: generate a synthetic corpus, search a cell, train and evaluate
//! the resulting network, and tabulate runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "stnas", version, about = "Spatio-temporal cell search for video classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic clip corpus and its manifests.
    Gen(GenArgs),
    /// Search a cell on the training split; writes genotype and trace.
    Search(SearchArgs),
    /// Train the network built from a genotype from scratch.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split, intact and temporally ablated.
    Eval(EvalArgs),
    /// Parameter counts of the network built from a genotype.
    Params(ParamsArgs),
    /// Compare evaluated runs by accuracy.
    Table(TableArgs),
}

#[derive(Args, Clone, Debug, Default)]
pub struct Common {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, created fresh for this invocation.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Allow writing into an existing output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Clone, Debug, Default)]
pub struct NetArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub depth: Option<usize>,
    /// Channels of the first cell.
    #[arg(long)]
    pub channels: Option<usize>,
}

#[derive(Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub net: NetArgs,
    /// Corpus directory (overrides data.dir).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_parser = ["first", "second"])]
    pub order: Option<String>,
    /// Intermediate nodes per cell.
    #[arg(long)]
    pub nodes: Option<usize>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub genotype: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub net: NetArgs,
    #[arg(long)]
    pub genotype: PathBuf,
    /// Classifier outputs (defaults to data.classes).
    #[arg(long)]
    pub classes: Option<usize>,
}

#[derive(Args)]
pub struct TableArgs {
    /// Run directories, or directories whose subdirectories are runs.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Also write the table to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::init_threads() {
        eprintln!("stnas: {e:#}");
        return ExitCode::FAILURE;
    }
    let result = match cli.command {
        Command::Gen(a) => commands::gen(a),
        Command::Search(a) => commands::search(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Params(a) => commands::params(a),
        Command::Table(a) => commands::table(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("stnas: {e:#}");
            ExitCode::FAILURE
        }
    }
}
