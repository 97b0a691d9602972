use std::process::ExitCode;

use clap::Parser;
use fla::cli::{run, Cli};

fn main() -> ExitCode {
    run(Cli::parse())
}
