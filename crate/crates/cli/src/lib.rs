//! The `neat` command line: data generation, pretraining, adaptation,
//! evaluation, diagnostics, layer-norm transplant and a one-shot
//! reproduction run. Every command writes its products under `--out` and
//! finishes by writing a `<command>.manifest.json` atomically.

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;
pub mod profile;
pub mod repro;

pub use args::{Cli, Command};
pub use error::{CliError, Result};

/// Runs one parsed command.
pub fn run(command: &Command) -> Result<manifest::RunManifest> {
    match command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Adapt(a) => commands::adapt_cmd(a),
        Command::Eval(a) => commands::eval_cmd(a),
        Command::Diagnose(a) => commands::diagnose_cmd(a),
        Command::Transplant(a) => commands::transplant_cmd(a),
        Command::Repro(a) => repro::repro(a),
    }
}
