use thiserror::Error;

use crate::layout::ValidityReport;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),
    #[error("invalid layout: {0}")]
    InvalidLayout(ValidityReport),
    #[error("layout syntax error at column {column}: {message}")]
    LayoutSyntax { column: usize, message: String },
    #[error("token {index} (`{token}`): {message}")]
    Binding {
        index: usize,
        token: String,
        message: String,
    },
    #[error("token {index} (`{token}`) is ambiguous: expected one object, found {found}")]
    Ambiguous {
        index: usize,
        token: String,
        found: usize,
    },
    #[error("count {0} exceeds the answer vocabulary")]
    CountOverflow(usize),
    #[error("template {0} is not applicable to this scene")]
    TemplateInapplicable(usize),
    #[error("module {kind} at node {path}: {message}")]
    Module {
        kind: String,
        path: String,
        message: String,
    },
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("unknown answer `{0}`")]
    UnknownAnswer(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("vocabulary mismatch: {0}")]
    VocabularyMismatch(String),
    #[error(transparent)]
    Tensor(#[from] dmn_autodiff::TensorError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
