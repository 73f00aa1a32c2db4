use std::path::PathBuf;

use thiserror::Error;

#[derive(Error, Debug)]
pub enum HarnessError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic: not a checkpoint file")]
    BadMagic,

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("checksum mismatch: file is corrupted")]
    CrcMismatch,

    #[error("file truncated while reading {0}")]
    Truncated(String),

    #[error("malformed {what}: {msg}")]
    Malformed { what: String, msg: String },

    #[error("usage: {0}")]
    Usage(String),

    #[error(transparent)]
    Core(#[from] usm_core::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
        let path = path.into();
        move |source| HarnessError::Io { path, source }
    }

    pub fn malformed(what: impl Into<String>, msg: impl Into<String>) -> HarnessError {
        HarnessError::Malformed {
            what: what.into(),
            msg: msg.into(),
        }
    }

    /// CLI exit code: 1 usage, 2 data/format, 3 numerical failure.
    pub fn exit_code(&self) -> u8 {
        match self {
            HarnessError::Usage(_) => 1,
            HarnessError::Core(usm_core::Error::NanLoss { .. }) => 3,
            HarnessError::Core(usm_core::Error::NonFinite { .. }) => 3,
            _ => 2,
        }
    }
}
