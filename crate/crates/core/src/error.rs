use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// Variants are named after the domain condition, not the module that raised
/// them, so the CLI can report `error[ShapeMismatch]: ...` uniformly.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("sequence of length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("input is degenerate: {0}")]
    DegenerateInput(String),
    #[error("article text is empty")]
    EmptyArticle,
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invariant violated at line {line}: {msg}")]
    Invariant { line: usize, msg: String },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("lambda > 0 requires token-level alignments and a knowledge base")]
    MissingAlignments,
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("hypotheses ({hyp}) and references ({reference}) differ in length")]
    LengthMismatch { hyp: usize, reference: usize },
    #[error("no response has grounded knowledge")]
    NoKnowledge,
    #[error("unknown token: {0}")]
    UnknownToken(String),
    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable name of the variant, used in CLI diagnostics.
    pub fn name(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::NotScalar(_) => "NotScalar",
            Error::NonFinite(_) => "NonFinite",
            Error::TooLong { .. } => "TooLong",
            Error::DegenerateInput(_) => "DegenerateInput",
            Error::EmptyArticle => "EmptyArticle",
            Error::Parse { .. } => "ParseError",
            Error::Invariant { .. } => "InvariantError",
            Error::EmptyCorpus => "EmptyCorpus",
            Error::MissingAlignments => "MissingAlignments",
            Error::InsufficientData(_) => "InsufficientData",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::NoKnowledge => "NoKnowledge",
            Error::UnknownToken(_) => "UnknownToken",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Config(_) => "ConfigError",
            Error::Io(_) => "IoError",
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
