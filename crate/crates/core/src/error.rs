use thiserror::Error;

pub type Result<T> = std::result::Result<T, M4nError>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum M4nError {
    #[error("invalid task: {0}")]
    InvalidTask(String),

    #[error("invalid label: {0}")]
    InvalidLabel(String),

    #[error("layout mismatch: expected {expected}, got {got}")]
    LayoutMismatch { expected: String, got: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sinkhorn did not converge after {iterations} iterations (residual {residual:.3e})")]
    SinkhornDiverged { iterations: usize, residual: f64 },

    #[error("oracle failed at iteration {iteration} ({player} player): {source}")]
    Oracle {
        iteration: usize,
        player: &'static str,
        #[source]
        source: Box<M4nError>,
    },

    #[error("training failed at step {step} (example {example}): {source}")]
    Training {
        step: usize,
        example: usize,
        #[source]
        source: Box<M4nError>,
    },

    #[error("linear program failed: {0}")]
    LinearProgram(String),

    #[error("kernel: {0}")]
    Kernel(String),

    #[error("calibration search found no feasible pair for any epsilon")]
    NoFeasiblePair,

    #[error("degenerate loss: {0}")]
    DegenerateLoss(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

pub(crate) fn check_finite(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(M4nError::NonFinite(what))
    }
}
