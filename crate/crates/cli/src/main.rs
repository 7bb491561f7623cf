//! `carryon`: pretrain a base, serve its taps, train and evaluate carry-ons.
//!
//! Every setting can come from a flag, a `CARRYON_*` variable, or the JSON
//! file given to `--config`, in that order of precedence. Exit status is 0 on
//! success, 1 on a runtime failure and 2 on a usage or configuration error.

mod commands;
mod manifest;
mod settings;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AlphaReportArgs, EvalArgs, GenDataArgs, PretrainArgs, ServeArgs, TrainArgs};
use settings::UsageError;

#[derive(Parser)]
#[command(
    name = "carryon",
    version = concat!(env!("CARGO_PKG_VERSION"), " (", env!("CARRYON_GIT_DESCRIBE"), ")"),
    about = "Carry-on adaptors on a frozen base model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the bundled synthetic corpora.
    GenData(GenDataArgs),
    /// Pretrain a small base model on a text corpus.
    PretrainBase(PretrainArgs),
    /// Serve a frozen base model's taps over TCP.
    Serve(ServeArgs),
    /// Train a carry-on, locally or against a running `serve`.
    Train(Box<TrainArgs>),
    /// Exact-match accuracy of base and carry-on on a QA set.
    Eval(EvalArgs),
    /// Validation loss per α and a quasi-convexity verdict.
    AlphaReport(AlphaReportArgs),
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match e.downcast_ref::<carryon_core::Error>() {
        Some(carryon_core::Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let r = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::PretrainBase(a) => commands::pretrain(a),
        Command::Serve(a) => commands::serve(a),
        Command::Train(a) => commands::train(*a),
        Command::Eval(a) => commands::eval(a),
        Command::AlphaReport(a) => commands::alpha_report(a),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
