use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    /// The kernel bound makes the forward-Euler collision probability exceed one.
    #[error("step-size error at step {step}: sigma = {sigma} with effective dt = {dt_eff} gives sigma*dt = {} > 1", sigma * dt_eff)]
    StepSize { step: usize, sigma: f64, dt_eff: f64 },

    #[error("numerical error at {context}: {message}")]
    Numerical { context: String, message: String },

    #[error("state error: {0}")]
    State(String),

    #[error("replay error: {0}")]
    Replay(String),

    #[error("event log format error at line {line}: {message}")]
    LogFormat { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numerical(context: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Numerical {
            context: context.into(),
            message: message.into(),
        }
    }

    pub(crate) fn shape(what: &'static str, expected: usize, got: usize) -> Self {
        Error::Shape {
            what,
            expected,
            got,
        }
    }
}
