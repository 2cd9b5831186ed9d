use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate scale: {0}")]
    DegenerateScale(String),

    #[error("no sign change found for the scale equation after {expansions} expansions (lo = {lo:e}, hi = {hi:e})")]
    BracketNotFound { expansions: usize, lo: f64, hi: f64 },

    #[error("variance function overflow at observation {observation}: exponent {exponent:e} exceeds {limit}")]
    Overflow {
        observation: usize,
        exponent: f64,
        limit: f64,
    },

    #[error("jacobian is rank deficient at every damping level")]
    RankDeficient,

    #[error("singular design in every candidate subset")]
    SubsetSearchFailed,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Config(e.to_string())
    }
}
