use thiserror::Error;

#[derive(Debug, Error)]
pub enum CdteError {
    #[error("schema error: {0}")]
    Schema(String),

    /// `row` is the 1-based data row (the header is not counted).
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("validation error at row {row}: {message}")]
    Validation { row: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("degenerate split: {0}")]
    DegenerateSplit(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical error: {message} (last iterate {last_iterate})")]
    Numerical { message: String, last_iterate: f64 },

    #[error("singular design: column {column} (`{name}`) is linearly dependent on earlier columns")]
    SingularDesign { column: usize, name: String },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("non-finite value produced by nuisance `{0}`")]
    NonFiniteNuisance(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<CdteError>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CdteError {
    pub(crate) fn in_fold(self, fold: usize) -> Self {
        CdteError::Fold {
            fold,
            source: Box::new(self),
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        CdteError::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CdteError::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, CdteError>;
