use thiserror::Error;

/// Errors produced by the estimation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("no data")]
    NoData,
    #[error("out of support: {0} is not in [0, 1]")]
    OutOfSupport(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("diverged coefficients: non-finite log-density on the quadrature grid")]
    DivergedCoefficients,
    #[error("ill-conditioned: {0}")]
    IllConditioned(String),
    #[error("degenerate information: {0}")]
    DegenerateInformation(String),
    #[error("flat CDF at quantile {0}")]
    FlatCdf(f64),
    #[error("fluctuation search failed to bracket the score root within |eps| <= {0}")]
    BracketFailure(f64),
    #[error("every cross-validation cell failed")]
    AllCellsFailed,
    #[error("too many failed fits: {failed} of {total}")]
    TooManyFailures { failed: usize, total: usize },
    #[error("unknown data-generating process: {0}")]
    UnknownDgp(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures of the numerical routines, as opposed to bad input
    /// or I/O problems.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::DivergedCoefficients
                | Error::IllConditioned(_)
                | Error::DegenerateInformation(_)
                | Error::FlatCdf(_)
                | Error::BracketFailure(_)
                | Error::AllCellsFailed
                | Error::TooManyFailures { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
