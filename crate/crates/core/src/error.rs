use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LaxError {
    #[error("invalid modulus: Im(tau) = {0} must be positive")]
    InvalidModulus(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("theta series does not converge within {cap} terms (|Im z| = {im_z})")]
    NonConvergence { cap: usize, im_z: f64 },

    #[error("pole: {0}")]
    Pole(String),

    #[error("singular matrix: pivot {pivot:e} below threshold {threshold:e}")]
    Singular { pivot: f64, threshold: f64 },

    #[error("ill-conditioned matrix: condition estimate {0:e}")]
    IllConditioned(f64),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid phase point: {0}")]
    InvalidPoint(String),

    #[error("non-real value where a real one is required: imaginary part {0:e}")]
    NotReal(f64),

    #[error("near-collision at t = {t}: |q_{i} - q_{j}| reached the lattice")]
    Collision { t: f64, i: usize, j: usize },

    #[error("integration became unstable at t = {0}")]
    Unstable(f64),
}

pub type Result<T> = std::result::Result<T, LaxError>;
