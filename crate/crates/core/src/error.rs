use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error in {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    /// Header or schema disagreement between input files.
    #[error("schema error in {file}: field `{field}`: {message}")]
    Schema {
        file: PathBuf,
        field: String,
        message: String,
    },

    /// `row` and `column` are 1-based data-row and column positions.
    #[error("missing value in {file} at data row {row}, column {column}")]
    MissingValue {
        file: PathBuf,
        row: usize,
        column: usize,
    },

    #[error("unknown attribute `{value}` for field `{field}` in {file} at data row {row}")]
    UnknownAttribute {
        file: PathBuf,
        row: usize,
        field: String,
        value: String,
    },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("{function} is undefined at x = {x}")]
    Domain { function: &'static str, x: f64 },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("non-finite ELBO at sweep {sweep}: {stats}")]
    NumericalFailure { sweep: usize, stats: String },

    #[error("enumeration of {entities}^{records} assignments exceeds the budget of {budget}")]
    BudgetExceeded {
        entities: usize,
        records: usize,
        budget: u64,
    },

    #[error("malformed {what} in {path}: {message}")]
    Format {
        what: &'static str,
        path: PathBuf,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            what,
            path: path.into(),
            message: message.into(),
        }
    }
}
