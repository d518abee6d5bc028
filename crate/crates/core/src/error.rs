use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("negative radicand {radicand:e} in gating noise at y = {y}")]
    NegativeRadicand { radicand: f64, y: f64 },

    #[error("Newton solve did not converge for particle {particle} at step {step} (residual {residual:e})")]
    NewtonDiverged {
        particle: usize,
        step: usize,
        residual: f64,
    },

    #[error("singular costate step matrix for particle {particle} at step {step}")]
    SingularStep { particle: usize, step: usize },

    #[error("ill-conditioned RBF system (reciprocal condition {rcond:e}); increase the ridge weight")]
    IllConditioned { rcond: f64 },

    #[error("unsupported noise mode: {0}")]
    UnsupportedMode(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
