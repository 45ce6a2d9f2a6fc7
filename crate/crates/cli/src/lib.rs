//! Command-line orchestration of the renal CT pipeline.
//!
//! Stages exchange data only through files in their output directories, so
//! any stage can be replaced by an external tool writing the same formats.

pub mod args;
pub mod config;
pub mod error;
mod generation;
mod scoring;
mod stages;
mod util;

use args::{Cli, Command, PhantomCommand};
pub use error::{CliError, ErrorKind};

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Phantom(PhantomCommand::Gen(a)) => stages::phantom_gen(a),
        Command::Ingest(a) => stages::ingest(a),
        Command::Preprocess(a) => stages::preprocess(a),
        Command::Split(a) => stages::split_cmd(a),
        Command::Generate(a) => generation::generate(a),
        Command::Extract(a) => generation::extract(a),
        Command::Evaluate(a) => scoring::evaluate(a),
        Command::Report(a) => scoring::report(a),
    }
}
