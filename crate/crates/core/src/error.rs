use thiserror::Error;

use crate::record::Var;

#[derive(Debug, Error)]
pub enum Error {
    /// A term references a variable that the record schema does not carry.
    #[error("schema error: variable {var} is not part of the record schema")]
    Schema { var: Var },

    /// A term references a partially missing confounder on a row where it is absent.
    #[error("missing data: variable {var} is absent on row {row}")]
    MissingData { var: Var, row: usize },

    #[error("singular design: {0}")]
    Singular(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("state error: {0}")]
    State(String),

    #[error("conditioning-set violation: model `{model}` may not depend on {var}")]
    ConditioningSet { model: String, var: Var },

    #[error("parse error in {location}: {message}")]
    Parse { location: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// True for errors caused by a bad scenario definition rather than by the data.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Parse { .. } | Error::ConditioningSet { .. } | Error::Schema { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
