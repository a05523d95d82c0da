mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "iclmsr",
    version,
    about = "Interventional contrastive pretraining with a meta-learned semantic regularizer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain one model and write metrics, checkpoints and the resolved config.
    Train(RunArgs),
    /// Four-setting study of baseline and regularized training on confounded data.
    Toy(RunArgs),
    /// Linear probe and k-NN accuracy of a checkpoint.
    Eval(RunArgs),
    /// Finite-difference, fixture and invariant self-checks.
    Verify(VerifyArgs),
    /// Write the synthetic confounded dataset to a file.
    GenData(RunArgs),
}

#[derive(Args, Clone)]
pub struct RunArgs {
    /// Config file with `[section]` headers and `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` or `section.key=value`, applied after the config file.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Comma-separated seeds; each gets its own output directory.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Evaluate the directional acceptance check after `toy`.
    #[arg(long)]
    pub check: bool,
    /// Force deterministic mode.
    #[arg(long)]
    pub deterministic: bool,
}

#[derive(Args, Clone)]
pub struct VerifyArgs {
    /// Also write the report as JSON into this directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, hide = true)]
    pub inject_exp_fault: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Toy(a) => commands::toy(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Verify(a) => commands::verify(&a),
        Command::GenData(a) => commands::gen_data(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
