use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {actual}")]
    Shape {
        op: &'static str,
        expected: String,
        actual: String,
    },
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("cannot discretize: no observed events")]
    NoObservedEvents,
    #[error("cannot stratify: stratum '{stratum}' has {count} patients, need at least {needed}")]
    Stratum {
        stratum: &'static str,
        count: usize,
        needed: usize,
    },
    #[error("degenerate common representation (norm {0:e})")]
    DegenerateCommon(f64),
    #[error("C-index undefined: no comparable pairs")]
    CIndexUndefined,
    #[error("degenerate stratification: all risks identical")]
    DegenerateStratification,
    #[error("log-rank test undefined: zero variance")]
    ZeroVariance,
    #[error("time bin {bin} out of range for {n_bins} bins")]
    TimeBin { bin: usize, n_bins: usize },
    #[error("invalid value for '{field}': {reason}")]
    Config { field: String, reason: String },
    #[error("non-finite loss component '{0}'")]
    NanLoss(&'static str),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("data error: {0}")]
    Data(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            op,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
