/// Crate-wide error type.
///
/// The variants distinguish caller mistakes (`InvalidInput`, `Mismatch`),
/// mathematically invalid models (`ModelInvalid` — e.g. an effective operator
/// whose symmetric part is not positive definite), and numerical failures
/// (`Solve`). The CLI maps `ModelInvalid` to a dedicated exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed arguments: out-of-range levels, empty seeds, bad bounds …
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Two objects that must belong together do not (wrong mesh level, wrong
    /// localization radius, wrong sampling provenance …).
    #[error("mismatched inputs: {0}")]
    Mismatch(String),

    /// The continuous or effective model violates a structural assumption
    /// (nonsymmetric coefficient, loss of ellipticity, indefinite coarse
    /// operator, inadmissible averaged tensor used where admissibility is
    /// required).
    #[error("model invalid: {0}")]
    ModelInvalid(String),

    /// A linear solve failed or did not reach the requested accuracy.
    #[error("linear solve failed: {0}")]
    Solve(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors that mean "the model is unusable", as opposed to
    /// caller mistakes or I/O problems.
    pub fn is_model_invalid(&self) -> bool {
        matches!(self, Error::ModelInvalid(_))
    }
}
