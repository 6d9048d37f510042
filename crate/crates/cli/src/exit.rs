//! Exit codes.
//!
//! | code | meaning |
//! |------|---------|
//! | 0 | success |
//! | 1 | any other failure (bad data, contract violation) |
//! | 2 | a required input file is missing |
//! | 3 | configuration error |
//! | 4 | training or evaluation diverged (NaN or infinite values) |

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Other,
    MissingFile,
    Config,
    Divergence,
}

impl ExitKind {
    pub fn code(self) -> u8 {
        match self {
            ExitKind::Other => 1,
            ExitKind::MissingFile => 2,
            ExitKind::Config => 3,
            ExitKind::Divergence => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ExitKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ExitKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn classify(e: &(dyn std::error::Error + 'static)) -> Option<ExitKind> {
    if let Some(c) = e.downcast_ref::<CliError>() {
        return Some(c.kind);
    }
    if let Some(l) = e.downcast_ref::<ldg::Error>() {
        return Some(match l {
            ldg::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => ExitKind::MissingFile,
            ldg::Error::Config(_) => ExitKind::Config,
            ldg::Error::NonFinite(_) => ExitKind::Divergence,
            _ => ExitKind::Other,
        });
    }
    if let Some(io) = e.downcast_ref::<std::io::Error>() {
        if io.kind() == std::io::ErrorKind::NotFound {
            return Some(ExitKind::MissingFile);
        }
    }
    None
}

/// Code for the first classifiable error in the chain.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    err.chain()
        .find_map(classify)
        .unwrap_or(ExitKind::Other)
        .code()
}
