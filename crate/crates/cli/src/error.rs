use std::path::PathBuf;

use selfrefine::Error;

/// Exit codes, one per error class.
pub mod code {
    pub const OK: u8 = 0;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const MISSING_ARTIFACT: u8 = 4;
    pub const IO: u8 = 5;
    pub const DATA: u8 = 6;
    pub const TEACHER: u8 = 7;
    pub const TRAINING: u8 = 8;
    pub const LOCKED: u8 = 9;
}

pub const EXIT_CODES_HELP: &str = "\
Exit codes:
  0  success
  2  invalid command line
  3  invalid configuration
  4  missing or out-of-date upstream artifact (the message names the command to run)
  5  file system error
  6  malformed or invalid data (corpus, splits, pairs, checkpoints)
  7  teacher or judge failure
  8  training or generation failure (divergence, no pairs, context overflow)
  9  run directory locked by another command";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),

    #[error("missing {what} ({}); run `selfrefine {command}` first", .path.display())]
    Missing {
        what: String,
        path: PathBuf,
        command: &'static str,
    },

    #[error("{what} ({}) was built from a different configuration; rerun `selfrefine {command}`", .path.display())]
    Stale {
        what: String,
        path: PathBuf,
        command: &'static str,
    },

    #[error("run directory is locked by {} (another command is writing; remove the file if none is)", .0.display())]
    Locked(PathBuf),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Missing { .. } | CliError::Stale { .. } => code::MISSING_ARTIFACT,
            CliError::Locked(_) => code::LOCKED,
            CliError::Core(e) => match e {
                Error::Config(_) => code::CONFIG,
                Error::Io { .. } => code::IO,
                Error::Validation(_)
                | Error::Parse { .. }
                | Error::Alignment(_)
                | Error::Checkpoint(_)
                | Error::QuarantineLimit { .. } => code::DATA,
                Error::Annotation { .. } | Error::Judge(_) => code::TEACHER,
                Error::ContextOverflow { .. }
                | Error::NonFinite { .. }
                | Error::NoPairs(_)
                | Error::Precondition(_) => code::TRAINING,
            },
        }
    }
}

pub fn io(path: impl Into<PathBuf>, e: std::io::Error) -> CliError {
    CliError::Core(Error::io(path, e))
}
