mod cli;
mod cmd;
mod config;

use std::process::ExitCode;

use clap::Parser;

use cli::{Cli, Command};

/// Exit status for input and configuration errors.
const EXIT_INPUT: u8 = 1;
/// Exit status when training diverged.
const EXIT_DIVERGED: u8 = 2;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_INPUT) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd::synth::run(a),
        Command::Fit(a) => cmd::fit::run(a),
        Command::Render(a) => cmd::render::run(a),
        Command::Export(a) => cmd::export::run(a),
        Command::GradHist(a) => cmd::grad_hist::run(a),
        Command::Eval(a) => cmd::eval::run(a),
        Command::AttnTest(a) => cmd::attn::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let diverged = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<splat4d_core::Error>(), Some(splat4d_core::Error::Diverged { .. })));
            ExitCode::from(if diverged { EXIT_DIVERGED } else { EXIT_INPUT })
        }
    }
}
