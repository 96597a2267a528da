use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("shape mismatch for {array}: expected {expected}, got {actual}")]
    Shape {
        array: &'static str,
        expected: String,
        actual: String,
    },
    /// The loss has no positive mass to take a logarithm of, or there is
    /// nothing to optimize.
    #[error("degenerate scene: inner product {inner_product} over {pair_count} pairs")]
    DegenerateScene {
        pair_count: usize,
        inner_product: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

pub(crate) fn input_err(msg: impl Into<String>) -> Error {
    Error::Input(msg.into())
}
