use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("the positive-rate graph is not irreducible ({classes} strongly connected classes)")]
    NotIrreducible { classes: usize },

    #[error("detailed balance fails on edge ({x}, {y}): relative residual {residual:.3e}")]
    NotReversible { x: usize, y: usize, residual: f64 },

    #[error("configuration space has {cardinality} states, above the budget of {budget}")]
    SpaceTooLarge { cardinality: u128, budget: usize },

    #[error("assumption violated: {0}")]
    AssumptionViolated(String),

    #[error("lambda = {lambda} is outside the open interval ({lower}, 1)")]
    BadLambda { lambda: f64, lower: f64 },

    #[error("capacity constant did not converge: relative spread {spread:.3e}")]
    Diverged { spread: f64 },

    #[error("singular linear system: {0}")]
    SingularSystem(String),

    #[error("not a flow: divergence {divergence:.3e} at state {state}")]
    NotAFlow { state: String, divergence: f64 },

    #[error("replica {replica} exceeded the event cap of {cap}")]
    EventCapExceeded { replica: u64, cap: u64 },

    #[error("no path between sites {0} and {1}")]
    NoPath(usize, usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse(_) | Error::Json(_) => 2,
            Error::SpaceTooLarge { .. } => 3,
            Error::AssumptionViolated(_) => 4,
            Error::Diverged { .. } => 5,
            Error::InvalidInput(_)
            | Error::NotIrreducible { .. }
            | Error::NotReversible { .. }
            | Error::BadLambda { .. } => 6,
            Error::SingularSystem(_) | Error::NotAFlow { .. } => 7,
            Error::EventCapExceeded { .. } => 8,
            Error::NoPath(..) => 9,
            Error::Io(_) => 10,
        }
    }
}
