use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in layer {layer} during {stage}")]
    NonFinite { layer: usize, stage: &'static str },

    #[error("non-finite gradient at parameter index {index}")]
    NonFiniteGradient { index: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("empty sample batch")]
    EmptyBatch,

    #[error("kernel denominator underflow at x = {x:?} (log E[k] = {log_den})")]
    DenominatorUnderflow { x: Vec<f64>, log_den: f64 },

    #[error("top-k selection needs k <= n (k = {k}, n = {n})")]
    TopKTooLarge { k: usize, n: usize },

    #[error("non-finite critic value at candidate {index}")]
    NonFiniteQ { index: usize },

    #[error("replay buffer is empty")]
    EmptyBuffer,

    #[error("replay buffer full: capacity {capacity}")]
    BufferFull { capacity: usize },

    #[error("environment fault at step {step}: {message}")]
    Environment { step: u64, message: String },

    #[error("step called after episode end without reset")]
    StepAfterDone,

    #[error("unknown environment id `{0}`")]
    UnknownEnv(String),

    #[error("demonstrator failure rate {rate:.3} exceeds 0.5")]
    DemonstratorFailure { rate: f64 },

    #[error("mode {mode} covers {fraction:.3} of episodes, outside [0.3, 0.7]")]
    ModeImbalance { mode: usize, fraction: f64 },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("bad file format: {0}")]
    Format(String),

    #[error("checksum mismatch")]
    Checksum,

    #[error("quadrature did not converge (estimate {estimate}, error {error})")]
    Quadrature { estimate: f64, error: f64 },

    #[error("rejection sampler acceptance rate {rate:e} below 1e-4")]
    RejectionRate { rate: f64 },

    #[error("stability guard violated at step {step}: displacement {displacement} > {limit}")]
    Stability {
        step: usize,
        displacement: f64,
        limit: f64,
    },

    #[error("quantile density {density:e} too small at level {level}")]
    QuantileInstability { level: f64, density: f64 },

    #[error("effective sample size {ess:.3} below {min}")]
    DegenerateWeights { ess: f64, min: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
