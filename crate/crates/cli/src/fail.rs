//! Process exit codes and the mapping from errors to them.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Exit {
    Config = 1,
    Io = 2,
    Numeric = 3,
    GradCheck = 4,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Exit::Config => "configuration error",
            Exit::Io => "I/O error",
            Exit::Numeric => "numeric failure",
            Exit::GradCheck => "gradient check failed",
        })
    }
}

impl std::error::Error for Exit {}

pub fn config_error(msg: impl fmt::Display) -> anyhow::Error {
    anyhow::anyhow!("{msg}").context(Exit::Config)
}

fn classify_library(e: &freqmamba::Error) -> Exit {
    use freqmamba::Error as E;
    match e {
        E::NonFinite(_) => Exit::Numeric,
        E::Io(_) | E::MagicMismatch { .. } | E::VersionMismatch { .. } | E::Truncated(_) | E::Malformed(_) => Exit::Io,
        E::Shape { .. } | E::InvalidArgument { .. } | E::ConfigMismatch(_) => Exit::Config,
    }
}

/// The outermost explicit tag wins; otherwise the first recognised cause.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    // context values are only reachable through the error's own downcast
    if let Some(exit) = err.downcast_ref::<Exit>() {
        return *exit as i32;
    }
    if let Some(e) = err.downcast_ref::<freqmamba::Error>() {
        return classify_library(e) as i32;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<freqmamba::Error>() {
            return classify_library(e) as i32;
        }
        if cause.is::<std::io::Error>() {
            return Exit::Io as i32;
        }
    }
    Exit::Config as i32
}
