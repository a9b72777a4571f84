use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Matrix or vector dimensions do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Non-finite input or a failed decomposition.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Operation called on state that cannot support it.
    #[error("state error: {0}")]
    State(String),

    /// Training loss became non-finite.
    #[error(
        "training diverged at epoch {epoch}{}",
        .last_finite_loss.map_or(String::new(), |l| format!(" (previous epoch loss {l:e})"))
    )]
    Diverged {
        epoch: usize,
        /// Mean loss of the last completed epoch, if any.
        last_finite_loss: Option<f64>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
