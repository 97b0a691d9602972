//! The `fla` command-line harness: file formats, the benchmark, the
//! invariant suites behind `fla verify`, and the subcommand handlers.

pub mod bench;
pub mod cli;
pub mod io;
pub mod suites;
