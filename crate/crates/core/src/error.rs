use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("rate overflow")]
    RateOverflow,
    #[error("rounds must be positive")]
    ZeroRounds,
    #[error("prompt positions immutable")]
    PromptImmutable,
    #[error("disjointness violated")]
    DisjointnessViolated,
    #[error("block already decoded")]
    BlockAlreadyDecoded,
    #[error("stalled decode")]
    StalledDecode,
    #[error("MBE disabled")]
    MbeDisabled,
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("no supervised positions")]
    NoSupervisedPositions,
    #[error("divergence at step {step}")]
    Divergence { step: usize },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("degenerate group")]
    DegenerateGroup,
    #[error("empty grid")]
    EmptyGrid,
    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 2 for missing inputs, 3 for
    /// configuration and layout problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingInput(_) => 2,
            Error::InvalidConfig(_)
            | Error::LayoutMismatch(_)
            | Error::Json(_)
            | Error::UnknownSymbol(_)
            | Error::EmptyGrid
            | Error::EmptyCorpus
            | Error::RateOverflow
            | Error::ZeroRounds
            | Error::MbeDisabled
            | Error::DegenerateGroup => 3,
            _ => 1,
        }
    }
}
