use thiserror::Error;

/// Errors raised by the simulator.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid search space: {0}")]
    InvalidSpace(String),

    #[error("value for `{name}` is outside its domain: {detail}")]
    OutOfDomain { name: String, detail: String },

    #[error("missing hyperparameter `{0}`")]
    MissingHyperparameter(String),

    #[error("cannot average a loss over an empty dataset")]
    EmptyDataset,

    #[error("dataset shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss or gradient during local training (epoch {epoch})")]
    NonFinite { epoch: usize },

    #[error("local training diverged at round {round} (client {client:?})")]
    Divergence { round: usize, client: Option<usize> },

    #[error("aggregation needs a positive total training size")]
    ZeroTrainSize,

    #[error("aggregation needs a positive total validation size")]
    ZeroValidationSize,

    #[error("sampled configuration {index} has zero probability")]
    InvalidSampling { index: usize },

    #[error("infeasible elimination schedule: {0}")]
    InfeasibleSchedule(String),

    #[error("client has {0} examples; at least 10 are needed to split 80/10/10")]
    TooFewExamples(usize),

    #[error("point lies outside the feasible ball (distance {distance} > radius {radius})")]
    OutsideDomain { distance: f64, radius: f64 },

    #[error("federation format error on line {line}: {message}")]
    Format { line: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
