use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is singular to working precision (sigma_min/sigma_max = {ratio:e})")]
    SingularMatrix { ratio: f64 },

    #[error("zero vector where a direction is required")]
    ZeroVector,

    #[error("operation needs dimension >= 2, got {0}")]
    DimensionTooSmall(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("vector is not normalised (norm {0})")]
    NotNormalised(f64),

    #[error("non-finite entry in matrix or vector")]
    NonFinite,

    #[error("parse error: {0}")]
    Parse(String),

    #[error("validation error{}: {msg}", atom.map(|i| format!(" in atom {i}")).unwrap_or_default())]
    Validation { atom: Option<usize>, msg: String },

    #[error("unknown builtin ensemble `{0}`")]
    UnknownBuiltin(String),

    #[error("bad parameters: {0}")]
    BadParams(String),

    #[error("A is not invertible along the tracked direction")]
    NonInvertibleA,

    #[error("overflow: non-finite value produced; shorten the sequence")]
    Overflow,

    #[error("near-zero denominator in xi ratio")]
    NearZeroDenominator,

    #[error("hypothesis suspect: {rejected} of {total} samples rejected for near-zero denominators")]
    HypothesisSuspect { rejected: usize, total: usize },

    #[error("no tracked vector at index {0}")]
    NoTrackedVector(usize),

    #[error("derived product is zero at the engine threshold")]
    ZeroT,

    #[error("perturbed atom {atom} is singular at eps = {eps}")]
    SingularPerturbedAtom { atom: usize, eps: f64 },

    #[error("at step {step}: {source}")]
    AtStep {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub fn at_step(self, step: usize) -> Error {
        match self {
            e @ Error::AtStep { .. } => e,
            e => Error::AtStep { step, source: Box::new(e) },
        }
    }

    /// Innermost error with step wrappers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtStep { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for input problems (bad config, params, flags) as opposed to
    /// numerical aborts during a run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self.root(),
            Error::Parse(_)
                | Error::Validation { .. }
                | Error::UnknownBuiltin(_)
                | Error::BadParams(_)
                | Error::DimensionMismatch { .. }
                | Error::DimensionTooSmall(_)
                | Error::NotNormalised(_)
                | Error::ZeroVector
                | Error::SingularPerturbedAtom { .. }
                | Error::NoTrackedVector(_)
                | Error::Io(_)
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
