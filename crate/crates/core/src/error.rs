use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: missing column `{0}`")]
    Schema(String),
    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("duplicate key: patient `{0}` appears more than once in the event table")]
    DuplicateKey(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("orphan error: {0}")]
    Orphan(String),
    #[error("nesting violation: {0}")]
    NestingViolation(String),
    #[error("out-of-window observation: {0}")]
    OutOfWindow(String),
    #[error("rank error: {0}")]
    Rank(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("formula error: {0}")]
    Formula(String),
    #[error("model specification error: {0}")]
    Spec(String),
    #[error("simulation design error: {0}")]
    Design(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("non-finite {component}: {value}")]
    NonFinite { component: String, value: f64 },
    #[error("initialization failed after {attempts} attempts: {message}")]
    Initialization { attempts: usize, message: String },
    #[error("mode search did not converge after {iterations} iterations (last objective {last_objective})")]
    Convergence {
        iterations: usize,
        last_objective: f64,
    },
    #[error("R-hat unavailable: {0}")]
    RhatUnavailable(String),
    #[error("patient `{0}` is not at risk at the landmark time")]
    AtRisk(String),
    #[error("time-dependent AUC undefined: {cases} cases and {controls} controls")]
    UndefinedAuc { cases: usize, controls: usize },
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numerical failures (as opposed to invalid input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. }
                | Error::Initialization { .. }
                | Error::Convergence { .. }
                | Error::Integrity(_)
        )
    }
}
