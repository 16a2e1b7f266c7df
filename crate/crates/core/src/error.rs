use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("softmax row {row} has no valid column (attention over an empty key set)")]
    AllMasked { row: usize },
    #[error("{0}: sequence is empty")]
    EmptySequence(&'static str),
    #[error("unknown terminal {terminal:?} in language {language}")]
    Lexical { terminal: String, language: char },
    #[error("caption does not parse: {0}")]
    Parse(String),
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite sampler state at step {0}")]
    NonFiniteState(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training did not converge: {0}")]
    Convergence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors caused by bad user input rather than a failed run.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Lexical { .. } | Error::Parse(_) | Error::Config(_) | Error::Checkpoint(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
