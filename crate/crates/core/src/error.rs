//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Malformed or inconsistent input data (schema violations, duplicate
    /// keys, asymmetric undirected panels, ...).
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A configuration value outside its admissible range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A kernel failed the moment conditions at registration.
    #[error("kernel '{name}' failed order verification: {detail}")]
    KernelOrder { name: String, detail: String },

    #[error("no switchers: no dyad changes selection status between periods")]
    EmptySwitchers,

    /// The conditional-logit objective is unbounded; detected when the
    /// parameter norm exceeds the configured cap.
    #[error("perfect separation in the selection equation (parameter norm exceeded {cap:.1e})")]
    PerfectSeparation { cap: f64 },

    #[error("rank-deficient regressors: {0}")]
    RankDeficient(String),

    /// The weighted cross-product matrix cannot be inverted at this
    /// bandwidth; either no rows fall in the kernel support or the
    /// condition number exceeds the guard.
    #[error(
        "singular weighted moment matrix (condition number {cond:.3e}, {rows_in_support} rows in support)"
    )]
    SingularMoments { cond: f64, rows_in_support: usize },

    #[error("{what} did not converge within {max_iter} iterations")]
    NonConvergence { what: &'static str, max_iter: usize },

    #[error("degenerate outcome: {0}")]
    DegenerateOutcome(String),
}

impl Error {
    /// True for errors caused by malformed input rather than numerical
    /// failure; the CLI maps these to a distinct exit code.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) | Error::Invalid(_) | Error::Config(_)
        )
    }
}
