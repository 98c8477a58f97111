use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ratematch_cli::commands;
use ratematch_cli::config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(name = "ratematch", version, about = "Rate-change estimation by matching policies across years")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate the portfolio CSV and write the clean rows and rejects.
    Ingest(Common),
    /// Match target-year policies to comparison-year policies and check balance.
    Match(Common),
    /// Search metric weights with the genetic algorithm and match with them.
    Genmatch(Common),
    /// Estimate the rate change with every configured method.
    Estimate(Common),
    /// Summarize balance and estimates from earlier runs.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Worker threads; overrides RATEMATCH_WORKERS and the config.
    #[arg(long)]
    workers: Option<usize>,
    /// Global seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn error_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<ratematch::Error>())
        .map_or("config", |e| e.kind());
    let mut message = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !message.contains(&text) {
            if !message.is_empty() {
                message.push_str(": ");
            }
            message.push_str(&text);
        }
    }
    format!("error: {kind}: {}", message.replace('\n', " "))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (run, common): (fn(&RunConfig) -> anyhow::Result<String>, Common) = match cli.command {
        Command::Ingest(c) => (commands::cmd_ingest, c),
        Command::Match(c) => (commands::cmd_match, c),
        Command::Genmatch(c) => (commands::cmd_genmatch, c),
        Command::Estimate(c) => (commands::cmd_estimate, c),
        Command::Report(c) => (commands::cmd_report, c),
    };
    let overrides = Overrides {
        seed: common.seed,
        workers: common.workers,
        out: common.out,
    };
    match RunConfig::load(&common.config, &overrides).and_then(|cfg| run(&cfg)) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_line(&err));
            ExitCode::FAILURE
        }
    }
}
