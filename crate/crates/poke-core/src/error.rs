//! Crate-wide error type.

use alloc::string::String;
use core::fmt;

/// Everything that can go wrong inside the core library.
///
/// All variants are programmer- or data-errors; none are recoverable by
/// retrying, so callers usually just propagate them.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Arena or model parameters violate a documented invariant.
    InvalidParams(String),
    /// Tensor shapes do not line up for the requested operation.
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    /// A class index fed to a loss or one-hot was out of range.
    ClassOutOfRange { index: usize, classes: usize },
    /// A gradient or loss became NaN/inf during an update.
    NonFinite { what: &'static str },
    /// Training loss became non-finite at the given epoch.
    Diverged { epoch: usize },
    /// Asked for the endpoints of a no-poke action.
    NoPokeEndpoints,
    /// Rejection sampling failed to find an admissible point.
    SamplingFailed { attempts: u32 },
    /// An image had no foreground pixels to detect.
    EmptyForeground,
    /// Relative location error is undefined: the initial pose already
    /// coincides with the goal.
    ZeroInitialDistance,
    /// Two images that must share a size do not.
    ImageSizeMismatch { a: usize, b: usize },
    /// A dataset or batch was empty where at least one sample is required.
    EmptyDataset,
}

pub type Result<T> = core::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidParams(msg) => write!(f, "invalid parameters: {msg}"),
            Error::ShapeMismatch { op, expected, got } => {
                write!(f, "{op}: shape mismatch, expected {expected}, got {got}")
            }
            Error::ClassOutOfRange { index, classes } => {
                write!(f, "class index {index} out of range for {classes} classes")
            }
            Error::NonFinite { what } => write!(f, "non-finite value in {what}"),
            Error::Diverged { epoch } => {
                write!(f, "training diverged: non-finite loss at epoch {epoch}")
            }
            Error::NoPokeEndpoints => write!(f, "a no-poke action has no endpoints"),
            Error::SamplingFailed { attempts } => {
                write!(f, "rejection sampling failed after {attempts} attempts")
            }
            Error::EmptyForeground => write!(f, "image has no foreground pixels"),
            Error::ZeroInitialDistance => {
                write!(f, "initial pose coincides with goal; relative error undefined")
            }
            Error::ImageSizeMismatch { a, b } => {
                write!(f, "image size mismatch: {a} vs {b}")
            }
            Error::EmptyDataset => write!(f, "empty dataset"),
        }
    }
}

impl core::error::Error for Error {}
