//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Errors surfaced by the core pipeline.
///
/// The variants map onto the CLI exit-code classes: `Shape`, `Config`,
/// `Parameter` and `Input` are caller mistakes; `Data` is malformed or
/// missing data; `NonFinite` and `Contract` are numerical failures.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor shapes do not conform for the named operation.
    Shape { op: &'static str, detail: String },
    /// Invalid model or run configuration.
    Config(String),
    /// A scalar parameter is outside its documented domain.
    Parameter(String),
    /// Invalid input data (image too small, empty sample, ...).
    Input(String),
    /// Malformed or insufficient data (empty split, missing class, ...).
    Data(String),
    /// An operation produced NaN or infinity; names the offending op.
    NonFinite { op: &'static str },
    /// An API contract was violated (e.g. backward on a non-scalar).
    Contract(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "shape error in {op}: {detail}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Parameter(msg) => write!(f, "parameter error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Data(msg) => write!(f, "data error: {msg}"),
            Error::NonFinite { op } => write!(f, "non-finite value produced by {op}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
