use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("non-finite Jacobian entry at tick {tick}")]
    NonFiniteJacobian { tick: usize },
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
    #[error("recorded step at tick {tick} is inconsistent with the dynamics (error {error:e})")]
    InconsistentStep { tick: usize, error: f64 },
    #[error("empty safe set for slot {slot}")]
    EmptySafeSet { slot: usize },
    #[error("query state lies outside the convex safe set (residual {residual:e})")]
    OutsideSafeSet { residual: f64 },
    #[error("seed trajectory rejected at tick {tick}: {reason}")]
    SeedValidation { tick: usize, reason: String },
    #[error(
        "warmup did not reach a periodic trajectory within {cycles} cycles (last gap {gap:e})"
    )]
    WarmupNotPeriodic { cycles: usize, gap: f64 },
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unknown builtin `{0}`")]
    UnknownBuiltin(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Dimension {
            context,
            expected,
            actual,
        })
    }
}
