use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Operand shapes do not agree.
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    /// A fixed-size buffer or store is too small for the request.
    Capacity {
        what: &'static str,
        needed: usize,
        available: usize,
    },
    /// An index is outside the valid range.
    Range {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    /// Invalid configuration.
    Config(String),
    /// Integer arithmetic overflowed.
    Overflow(&'static str),
    /// A collective was used with mismatched or diverging participants.
    Protocol(String),
    /// A communication slot is already in flight.
    Contention { worker: usize, slot: usize },
    /// The transport has been shut down.
    Transport(String),
    /// A value that must be finite was NaN or infinite.
    NonFinite(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, lhs, rhs } => {
                write!(f, "{op}: dimension mismatch between {lhs:?} and {rhs:?}")
            }
            Error::Capacity {
                what,
                needed,
                available,
            } => write!(
                f,
                "{what}: capacity exceeded (need {needed}, have {available})"
            ),
            Error::Range { what, index, bound } => {
                write!(f, "{what}: index {index} out of range (bound {bound})")
            }
            Error::Config(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Overflow(what) => write!(f, "{what}: arithmetic overflow"),
            Error::Protocol(msg) => write!(f, "protocol error: {msg}"),
            Error::Contention { worker, slot } => {
                write!(f, "slot {slot} of worker {worker} is already in flight")
            }
            Error::Transport(msg) => write!(f, "transport error: {msg}"),
            Error::NonFinite(what) => write!(f, "{what}: non-finite value"),
        }
    }
}

impl core::error::Error for Error {}

pub(crate) fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}
