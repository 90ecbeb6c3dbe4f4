use thiserror::Error;

/// Error type shared across the crate.
///
/// Contract violations mark caller bugs (bad shapes, invalid arguments);
/// run aborts mark numerical blow-ups that terminate a training run but are
/// recorded as data rather than crashing the harness.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: domain error: {msg}")]
    Domain { op: &'static str, msg: String },

    #[error("contract violation in {op}: {msg}")]
    Contract { op: &'static str, msg: String },

    #[error("run aborted at iteration {iteration}: non-finite {what} (param `{param}`, norm {norm})")]
    RunAbort {
        iteration: usize,
        what: &'static str,
        param: String,
        norm: f64,
    },

    #[error("failed to load {path}: {msg}")]
    Load { path: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Contract {
            op,
            msg: msg.into(),
        }
    }

    pub fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }

    pub fn load(path: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Load {
            path: path.into(),
            msg: msg.into(),
        }
    }
}
