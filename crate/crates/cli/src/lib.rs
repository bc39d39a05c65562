pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;

use error::{CliError, Result};

/// Reads the `STIV_THREADS` parallelism cap. Every command runs on one thread, which
/// satisfies any cap; the variable is still validated so a typo is reported.
pub fn threads_from_env() -> Result<Option<usize>> {
    match std::env::var("STIV_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("STIV_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(None),
    }
}
