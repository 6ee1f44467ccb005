use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parameter `{name}` = {value} outside [{lo}, {hi}]")]
    Parameter {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("pilot reuse is not supported: tau_p = {tau_p} < K = {num_ues}")]
    PilotReuse { tau_p: usize, num_ues: usize },

    #[error("UE {ue} is horizontally co-located with AP {ap}")]
    ZeroDistance { ue: usize, ap: usize },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Crc { stored: u32, computed: u32 },

    #[error("non-finite value in {layer}")]
    NonFinite { layer: String },

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code used by the command line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter { .. } | Error::PilotReuse { .. } => 2,
            Error::NonFinite { .. } | Error::Diverged { .. } => 3,
            _ => 1,
        }
    }
}
