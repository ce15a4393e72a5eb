use splatbev_core::error::FormatError;

/// Process exit codes. Clap reports usage errors with code 2.
pub mod code {
    pub const OK: i32 = 0;
    pub const USAGE: i32 = 2;
    pub const CONFIG: i32 = 3;
    pub const INPUT: i32 = 4;
    pub const FORMAT: i32 = 5;
    pub const NUMERIC: i32 = 6;
    pub const CHECK_FAILED: i32 = 7;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),

    #[error("{0}")]
    Input(String),

    #[error("{0} gradient check(s) above tolerance")]
    CheckFailed(usize),

    #[error(transparent)]
    Core(#[from] splatbev_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use splatbev_core::Error as E;
        match self {
            CliError::Config(_) => code::CONFIG,
            CliError::Input(_) => code::INPUT,
            CliError::CheckFailed(_) => code::CHECK_FAILED,
            CliError::Core(E::InvalidConfig(_) | E::InvalidCamera(_)) => code::CONFIG,
            CliError::Core(E::Format(FormatError::Io { .. })) => code::INPUT,
            CliError::Core(E::Format(_)) => code::FORMAT,
            CliError::Core(_) => code::NUMERIC,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            code::CONFIG => "config",
            code::INPUT => "input",
            code::FORMAT => "format",
            code::CHECK_FAILED => "check",
            _ => "numeric",
        }
    }
}
