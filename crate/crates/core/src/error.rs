use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("cannot encode character {0:?}: not in the tokenizer alphabet")]
    UnknownChar(char),

    #[error("cannot decode token id {0}: not in the vocabulary")]
    UnknownId(usize),

    #[error("token-type mismatch: {0}")]
    TokenTypeMismatch(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("malformed {kind}: {msg}")]
    Format { kind: &'static str, msg: String },

    #[error("invalid config field `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("non-finite loss at step {step} in component `{component}`")]
    NonFiniteLoss { step: usize, component: String },

    #[error("data generation failed: {0}")]
    Data(String),

    #[error("teacher reached held-out accuracy {accuracy:.4}, below the required {required}")]
    TeacherGate { accuracy: f64, required: f64 },

    #[error("metrics schema: {0}")]
    Schema(String),

    #[error("writing checkpoint {path} failed after completing [{completed}]: {source}")]
    CheckpointWrite {
        path: String,
        completed: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn format(kind: &'static str, msg: impl Into<String>) -> Self {
        Error::Format {
            kind,
            msg: msg.into(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            msg: msg.into(),
        }
    }
}
