//! Command-line driver: environment generation, single runs, benchmark
//! grids with aggregate tables, 1DSfM import and evaluation of saved
//! estimates.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.

pub mod aggregate;
pub mod commands;
pub mod error;
pub mod source;

use std::ffi::OsString;
use std::panic::{catch_unwind, AssertUnwindSafe};

use clap::Parser;

pub use commands::Cli;
pub use error::CliError;

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match catch_unwind(AssertUnwindSafe(|| commands::dispatch(cli))) {
        Ok(Ok(())) => 0,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
        Err(_) => 3,
    }
}
