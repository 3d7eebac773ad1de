use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

pub type Result<T, E = Error> = core::result::Result<T, E>;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A kernel received operands whose shapes do not conform.
    Shape {
        kernel: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// Softmax row where every entry is masked out.
    AllMasked { kernel: &'static str, row: usize },
    /// `backward` called on a tensor that is not a scalar.
    NonScalarLoss { shape: Vec<usize> },
    /// The graph was already consumed by an earlier `backward`.
    GraphConsumed,
    /// A variable that does not belong to this graph.
    UnknownVar(usize),
    /// An empty input where at least one element is required.
    Empty(&'static str),
    /// A token id outside the vocabulary.
    TokenOutOfRange { id: usize, vocab: usize },
    /// A probability or gate outside `[0, 1]`.
    OutOfUnitRange { what: &'static str, value: f64 },
    /// A non-finite gradient entry.
    NonFiniteGradient { param: String },
    /// Invalid configuration value.
    Config(String),
    /// Mismatched lengths between paired inputs.
    Length {
        what: &'static str,
        expected: usize,
        found: usize,
    },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape {
                kernel,
                left,
                right,
            } => write!(f, "{kernel}: shape mismatch {left:?} vs {right:?}"),
            Error::AllMasked { kernel, row } => {
                write!(f, "{kernel}: row {row} has no unmasked element")
            }
            Error::NonScalarLoss { shape } => {
                write!(f, "backward needs a scalar loss, got shape {shape:?}")
            }
            Error::GraphConsumed => f.write_str("backward graph already consumed"),
            Error::UnknownVar(id) => write!(f, "variable {id} is not part of this graph"),
            Error::Empty(what) => write!(f, "{what} must not be empty"),
            Error::TokenOutOfRange { id, vocab } => {
                write!(f, "token id {id} out of range for vocabulary of {vocab}")
            }
            Error::OutOfUnitRange { what, value } => {
                write!(f, "{what} = {value} outside [0, 1]")
            }
            Error::NonFiniteGradient { param } => {
                write!(f, "non-finite gradient in parameter {param}")
            }
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Length {
                what,
                expected,
                found,
            } => write!(f, "{what}: expected length {expected}, found {found}"),
        }
    }
}

impl core::error::Error for Error {}
