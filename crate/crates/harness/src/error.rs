//! Harness errors with process exit-code semantics.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, HarnessError>;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error{}: {msg}", fmt_line(*line))]
    Config { line: Option<usize>, msg: String },

    #[error(transparent)]
    Core(#[from] preempt_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn fmt_line(line: Option<usize>) -> String {
    line.map(|l| format!(" at line {l}")).unwrap_or_default()
}

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config {
            line: None,
            msg: msg.into(),
        }
    }

    pub fn config_at(line: usize, msg: impl Into<String>) -> Self {
        HarnessError::Config {
            line: Some(line),
            msg: msg.into(),
        }
    }

    /// 0 success, 2 config error, 3 numerical abort, 4 selftest failure
    /// (mapped by the caller), 1 everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } => 2,
            HarnessError::Core(preempt_core::Error::InvalidConfig(_)) => 2,
            HarnessError::Core(preempt_core::Error::Io(_)) => 1,
            HarnessError::Core(_) => 3,
            HarnessError::Io(_) => 1,
        }
    }
}
