use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("size mismatch for {what}: expected {expected}, got {actual}")]
    Size {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("degenerate triangle {0}: area below threshold and no previous frame")]
    DegenerateTriangle(usize),

    #[error("invalid rig: {0}")]
    InvalidRig(String),

    #[error("zero-length quaternion cannot be normalized")]
    ZeroQuaternion,

    #[error("render aux does not match the splats it was created from")]
    StaleAux,

    #[error("consistency: {0}")]
    Consistency(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite loss at iteration {iteration}; snapshot written to {dump}")]
    NonFiniteLoss { iteration: usize, dump: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::Size {
            what,
            expected,
            actual,
        })
    }
}
