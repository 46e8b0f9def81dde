use thiserror::Error;

/// Errors raised anywhere in the training stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("target distribution row {row} sums to {sum}, expected 1")]
    TargetDistribution { row: usize, sum: f64 },

    #[error("{what} = {value} is outside {range}")]
    Range {
        what: &'static str,
        value: f64,
        range: &'static str,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("objective is not deterministic: two baseline evaluations gave {first} and {second}")]
    Determinism { first: f64, second: f64 },

    #[error("position {index} out of range for {len} patch tokens")]
    Index { index: usize, len: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(
        "non-finite loss at epoch {epoch}, step {step}: main {main}, sub {sub}, total {total}"
    )]
    NonFinite {
        epoch: usize,
        step: usize,
        main: f64,
        sub: f64,
        total: f64,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// True for errors caused by bad user input (flags, config, schema), as
    /// opposed to failures during a run.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Range { .. } | Error::Json(_)
        )
    }
}
