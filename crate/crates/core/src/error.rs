use thiserror::Error;

pub type Result<T, E = MfmcError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum MfmcError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("input has length {actual}, model expects {expected}")]
    InputLength { expected: usize, actual: usize },

    #[error("model {model} produced a non-finite output at sample {sample}")]
    NonFiniteOutput { model: usize, sample: usize },

    #[error("model {model} returned {actual} outputs, expected {expected}")]
    OutputLength {
        model: usize,
        expected: usize,
        actual: usize,
    },

    #[error("sample counts {0:?} are not a valid nested allocation")]
    InvalidAllocation(Vec<usize>),

    #[error("evaluations do not match the allocation plan: {0}")]
    PlanMismatch(String),

    #[error("need at least {required} samples, got {actual}")]
    TooFewSamples { required: usize, actual: usize },

    #[error("budget {budget} cannot pay for a single high-fidelity evaluation (cost {cost})")]
    InfeasibleBudget { budget: f64, cost: f64 },

    #[error("every output component has zero high-fidelity variance")]
    NoVariance,

    #[error("regressor has not been fitted")]
    NotFitted,

    #[error("cannot fit regressor: {0}")]
    DegenerateRegression(String),

    #[error("unknown hierarchy {0:?}")]
    UnknownHierarchy(String),

    #[error("unknown statistic {0:?}")]
    UnknownStatistic(String),

    #[error("no reference value for {statistic} on hierarchy {hierarchy}")]
    MissingReference { hierarchy: String, statistic: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
