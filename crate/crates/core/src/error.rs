use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{name} = {value} is outside its domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("degenerate evidence: {0}")]
    DegenerateEvidence(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("coverage: {0}")]
    Coverage(String),

    #[error("insufficient training data for filter {filter}: {have} pairs, need {need}")]
    InsufficientData {
        filter: usize,
        have: usize,
        need: usize,
    },

    #[error("budget exhausted: {needed} votes required, budget is {budget}")]
    BudgetExhausted { needed: u64, budget: u64 },

    #[error("vote source exhausted for item {item}, filter {filter}")]
    VoteSourceExhausted { item: usize, filter: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn check_unit(name: &'static str, value: f64) -> Result<()> {
    if (0.0..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::Domain {
            name,
            value,
            domain: "[0, 1]",
        })
    }
}

pub(crate) fn check_accuracy(name: &'static str, value: f64) -> Result<()> {
    if (0.5..=1.0).contains(&value) {
        Ok(())
    } else {
        Err(Error::Domain {
            name,
            value,
            domain: "[0.5, 1]",
        })
    }
}
