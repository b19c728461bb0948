//! Command implementations behind the `unseg` binary.
//!
//! Each command is an ordinary function over explicit argument structs so
//! integration tests can drive them in-process; `main.rs` only parses flags
//! and maps errors to exit codes (0 success, 1 verification/metric failure,
//! 2 usage error, 3 I/O error).

pub mod commands;
pub mod record;
pub mod report;

use unseg::error::Error;

/// Exit-code policy for engine errors.
pub fn exit_code_for(err: &Error) -> u8 {
    match err {
        // usage: the operator asked for something malformed
        Error::UnknownPreset(_) | Error::InvalidConfig(_) | Error::EmptySplit(_) => 2,
        // I/O and file-format trouble
        Error::Io(_)
        | Error::MissingFile(_)
        | Error::DecodeError { .. }
        | Error::TruncatedFile
        | Error::BadMagic
        | Error::VersionMismatch(_)
        | Error::SplitOverlap { .. }
        | Error::SizeMismatch { .. } => 3,
        // everything else is a verification / numeric failure
        _ => 1,
    }
}

/// Numeric element width for the engine, selected via `UNSEG_PRECISION`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Reads `UNSEG_PRECISION` (`f32` default, `f64` for the double-precision
    /// engine used by gradient checking).
    pub fn from_env() -> Self {
        match std::env::var("UNSEG_PRECISION").as_deref() {
            Ok("f64") => Precision::F64,
            _ => Precision::F32,
        }
    }
}
