use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("invalid region: {0}")]
    InvalidRegion(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integration diverged at t = {time}")]
    IntegrationDiverged { time: f64 },

    #[error("sample time {time} lies beyond the horizon {horizon}")]
    OutOfHorizon { time: f64, horizon: f64 },

    #[error("zero time gap between samples {index} and {next}", next = .index + 1)]
    ZeroTimeGap { index: usize },

    #[error("empty grid: {0}")]
    EmptyGrid(&'static str),

    #[error("state loss could not be driven to zero within {iterations} iterations (last value {last_loss})")]
    StateLossNotSeparable { iterations: usize, last_loss: f64 },

    #[error("subgradient descent did not converge within {iterations} iterations")]
    NoConvergence { iterations: usize, best_params: Vec<f64> },

    #[error("all samples discarded; the problem is infeasible for this architecture")]
    AllSamplesDiscarded,

    #[error("outer discarding loop exceeded {iterations} iterations")]
    OuterCapExceeded { iterations: usize },

    #[error("missing constant {0}; estimate it with the lipschitz module or supply it analytically")]
    MustEstimate(&'static str),

    #[error(
        "no sign change bracketing the root for k = {k}, beta = {beta}, n = {n} (residuals {lower_residual} at lower end, {upper_residual} at upper end)"
    )]
    NumericalBracket {
        k: usize,
        beta: f64,
        n: usize,
        lower_residual: f64,
        upper_residual: f64,
    },

    #[error("{count} sign changes found on [k/N, 1) for k = {k}, n = {n}; brackets: {brackets:?}")]
    MultipleRoots {
        k: usize,
        n: usize,
        count: usize,
        brackets: Vec<(f64, f64)>,
    },

    #[error("compression size {bound_k} does not match the synthesized compression set of size {actual}")]
    CompressionMismatch { bound_k: usize, actual: usize },

    #[error("synthesis did not succeed; no guarantee can be issued")]
    SynthesisNotSuccessful,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
