//! Command-line front end for `horse-core`: strict JSON run configs, the
//! experiment subcommands and their output files.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod output;

use horse_core::EditError;

pub use commands::{run, Cli};
pub use config::RunConfig;

/// 2 for configuration and input problems, 3 for numerical failures.
pub fn exit_code(err: &EditError) -> i32 {
    if err.is_numerical() {
        3
    } else {
        2
    }
}

/// Log level from `HORSE_EDIT_LOG` (`error`, `info` or `debug`; `info` when
/// unset).
pub fn log_level(value: Option<&str>) -> Result<log::LevelFilter, EditError> {
    match value {
        None => Ok(log::LevelFilter::Info),
        Some("error") => Ok(log::LevelFilter::Error),
        Some("info") => Ok(log::LevelFilter::Info),
        Some("debug") => Ok(log::LevelFilter::Debug),
        Some(other) => Err(EditError::Config(format!(
            "HORSE_EDIT_LOG must be one of error, info, debug; got {other:?}"
        ))),
    }
}
