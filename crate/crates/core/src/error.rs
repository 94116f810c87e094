use std::io;

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum NumericsError {
    #[error("vector norm is below the zero threshold")]
    ZeroVector,
    #[error("dimension mismatch: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("vector has a non-finite norm")]
    NonFinite,
}

/// Errors raised by any module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Numerics(#[from] NumericsError),

    #[error("image is {height}x{width}; rotations need a square grid")]
    NonSquare { height: usize, width: usize },

    #[error("protocol needs {needed} classes but only {available} are available")]
    InsufficientClasses { needed: usize, available: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed file at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("activation cache does not belong to the current parameters")]
    StaleCache,

    #[error("feature extractor is frozen")]
    Frozen,

    #[error("class {0} is not known to the classifier")]
    UnknownClass(u32),

    #[error("class {0} is already present")]
    DuplicateClass(u32),

    #[error("no embedding for class {0}")]
    MissingEmbedding(u32),

    #[error("class {0} has no samples")]
    EmptyClass(u32),

    #[error("no stored prototype for class {0}")]
    MissingPrototypes(u32),

    #[error("test sample of class {0} has no classifier")]
    UnknownTestClass(u32),

    #[error("accuracies mix fractions and percentages ({0} vs {1})")]
    UnitMismatch(f64, f64),

    #[error("training aborted at batch {batch}")]
    TrainingAborted {
        batch: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
