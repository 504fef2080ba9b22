//! Command-line surface: dataset synthesis, training, evaluation,
//! complexity benchmarks, gradient checks, and energy reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 data/format error, 3 failed
//! verification check.

mod args;
mod commands;

use std::process::ExitCode;

use lsformer_core::error::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_CHECK: u8 = 3;

fn usage() -> String {
    "lsformer - local structure-aware spiking transformer toolkit

USAGE:
    lsformer <COMMAND> [FLAGS]

COMMANDS:
    gen-data    synthesize a labelled binary-image dataset container
    train       train a model on a dataset container
    eval        evaluate a checkpoint on a dataset
    bench       attention complexity scaling (counted FLOPs + wall time)
    gradcheck   finite-difference check of every parameter group
    energy      per-block synaptic-operation and energy report
    help        show this message

Run `lsformer <COMMAND> --help` for per-command flags."
        .to_string()
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let Some(cmd) = argv.first() else {
        eprintln!("{}", usage());
        return ExitCode::from(EXIT_USAGE);
    };
    let rest = &argv[1..];
    let outcome = match cmd.as_str() {
        "gen-data" => commands::gen_data(rest),
        "train" => commands::train(rest),
        "eval" => commands::eval(rest),
        "bench" => commands::bench(rest),
        "gradcheck" => commands::gradcheck(rest),
        "energy" => commands::energy(rest),
        "help" | "--help" | "-h" => {
            println!("{}", usage());
            return ExitCode::from(EXIT_OK);
        }
        other => {
            eprintln!("unknown command `{other}`\n\n{}", usage());
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match outcome {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(CmdError::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CmdError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

/// Command failures split into usage problems (exit 1) and everything the
/// core error type describes.
#[derive(Debug)]
pub enum CmdError {
    Usage(String),
    Core(Error),
}

impl From<Error> for CmdError {
    fn from(e: Error) -> Self {
        CmdError::Core(e)
    }
}

pub type CmdResult = Result<(), CmdError>;

pub fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::CheckFailed(_) => EXIT_CHECK,
        Error::Io(_) | Error::Format(_) => EXIT_DATA,
        Error::Config(_) | Error::Shape(_) | Error::Contract(_) => EXIT_DATA,
    }
}
