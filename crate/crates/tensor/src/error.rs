use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch, expected {expected} but got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{op}: data length {len} does not match shape {shape:?}")]
    BadData {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },
    #[error("channels {channels} not divisible by heads {heads}")]
    HeadsMismatch { channels: usize, heads: usize },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("finite-difference eps {0} outside [1e-7, 1e-4]")]
    BadEps(f64),
}
