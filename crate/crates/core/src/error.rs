use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("rank-deficient regression: coefficient `{coefficient}` is not identifiable from the data")]
    RankDeficient { coefficient: &'static str },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("routing integrity: {0}")]
    Routing(String),

    #[error("stage `{stage}` failed ({path}): {source}")]
    Stage {
        stage: String,
        path: PathBuf,
        #[source]
        source: Box<Error>,
    },

    #[error("missing artifacts: {0:?}")]
    MissingArtifacts(Vec<String>),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    TomlDe(#[from] toml::de::Error),

    #[error(transparent)]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
