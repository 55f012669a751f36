//! Command-line front end for the benchmarking stack: run configuration,
//! benchmark orchestration across tasks and model variants, and leaderboard
//! rendering, wired into the `smallbench` binary's subcommands.

pub mod bench;
pub mod commands;
pub mod config;
pub mod leaderboard;

use std::ffi::OsString;

use clap::Parser;

/// Parses `argv` and runs the selected subcommand. Returns the process exit
/// code: 0 on success, 1 on runtime failures (one `error:` line on stderr),
/// 2 on usage errors (clap's usage text).
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match commands::Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests print to stdout and exit 0; usage
            // errors print to stderr and exit 2. clap routes both.
            let _ = e.print();
            return e.exit_code();
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
