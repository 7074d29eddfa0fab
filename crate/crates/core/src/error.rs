use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not symmetric (relative asymmetry {0:.3e})")]
    NotSymmetric(f64),

    #[error("degenerate SPD input: all eigenvalues below floor {floor:.3e}")]
    DegenerateSpd { floor: f64 },

    #[error("insufficient samples / degenerate covariance: smallest eigenvalue {min_eig:.3e} below floor {floor:.3e}")]
    DegenerateCovariance { min_eig: f64, floor: f64 },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("M·Sigma^(1/2) is rank deficient (sigma_min = {sigma_min:.3e}, sigma_max = {sigma_max:.3e})")]
    RankDeficient { sigma_min: f64, sigma_max: f64 },

    #[error("matrix is not orthogonal (||J^T J - I||_F = {0:.3e})")]
    NotOrthogonal(f64),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("projection failed: {0}")]
    Projection(String),

    #[error("step blow-up at iteration {iteration}: {reason}")]
    StepBlowUp { iteration: usize, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
