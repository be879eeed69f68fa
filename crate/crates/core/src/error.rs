use crate::netgraph::UnitId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("unknown unit {0}")]
    UnknownUnit(UnitId),

    #[error("unit ids must be dense 0..n-1; found id {found} at position {position}")]
    NonDenseIds { position: usize, found: UnitId },

    #[error("duplicate edge {from} -> {to}")]
    DuplicateEdge { from: UnitId, to: UnitId },

    #[error("self-loop on unit {0} is not supported")]
    SelfLoop(UnitId),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("input has {got} values, network has {expected} input units")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid activation: {0}")]
    InvalidActivation(String),

    #[error("scaling factor must be positive and finite, got {0}")]
    NonPositiveLambda(f64),

    #[error("unit {unit} cannot be scaled: {reason}")]
    NotScalable { unit: UnitId, reason: &'static str },

    #[error("unit {unit} is unbalanceable: all {side} weights are zero")]
    Degenerate { unit: UnitId, side: &'static str },

    #[error("cost derivative is undefined at w = 0 for exponent p = {p}")]
    DerivativeAtZero { p: f64 },

    #[error("cost spec: {0}")]
    CostSpec(String),

    #[error("invalid unit set: {0}")]
    InvalidSubset(String),

    #[error("invalid schedule: {0}")]
    Schedule(String),

    #[error("topology mismatch: {0}")]
    TopologyMismatch(String),

    #[error("weight on edge {from} -> {to} changed sign or vanished ({initial} -> {last})")]
    SignFlip {
        from: UnitId,
        to: UnitId,
        initial: f64,
        last: f64,
    },

    #[error("hidden unit {0} lies on no nonzero path between visible units")]
    Unidentifiable(UnitId),

    #[error("convex solver did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    SolverNonConvergence { iterations: usize, grad_norm: f64 },

    #[error("balancing run with seed {seed} did not converge in {steps} steps (residual {residual:e})")]
    BalancingNotConverged { seed: u64, steps: usize, residual: f64 },

    #[error("approximator: {0}")]
    Approximator(String),

    #[error("tied layer closed form: {0}")]
    TiedLayer(String),

    #[error("training config: {0}")]
    TrainConfig(String),

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged {
        epoch: usize,
        metrics: Vec<crate::training::MetricsRow>,
    },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("malformed IDX file at byte {offset}: {message}")]
    Idx { offset: u64, message: String },

    #[error("malformed CSV at line {line}: {message}")]
    CsvRow { line: u64, message: String },

    #[error("document parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("document: {0}")]
    Document(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
