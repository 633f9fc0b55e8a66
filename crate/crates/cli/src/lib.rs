//! Command-line frontend for epgt-core: run generation, estimation,
//! probing, attention analysis, interventions and robustness studies.

mod args;
mod commands;
mod config;
mod error;

use std::ffi::OsString;

use clap::error::ErrorKind;
use clap::Parser;

pub use args::Cli;
use args::Command;
use config::Context;
pub use error::CliError;
use error::Result;

fn run(cli: &Cli) -> Result<String> {
    let ctx = Context::new(&cli.global)?;
    if let Some(jobs) = ctx.jobs {
        if jobs == 0 {
            return Err(CliError::usage("--jobs must be at least 1"));
        }
        // A second call in one process keeps the first pool.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global();
    }
    match &cli.command {
        Command::Generate(a) => commands::generate::run(&ctx, a),
        Command::Estimate(a) => commands::estimate::run(&ctx, a),
        Command::ProbeTrain(a) => commands::probe::train(&ctx, a),
        Command::ProbeEval(a) => commands::probe::evaluate(&ctx, a),
        Command::AttnMatch(a) => commands::attn::run(&ctx, a),
        Command::InterveneSpec(a) => commands::intervene::spec(&ctx, a),
        Command::InterveneEval(a) => commands::intervene::evaluate(&ctx, a),
        Command::Study(a) => commands::study::run(&ctx, a),
        Command::Report(a) => commands::render::run(&ctx, a),
    }
}

/// Parses `argv` (program name first), runs the command and prints its
/// one-line summary or error. Returns the process exit code.
pub fn dispatch<I, T>(argv: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}
