//! Dataset IO, resumable sweeps, analysis passes and result tables built on
//! `topo-core`. The `topolab` binary is a thin clap layer over this crate.

pub mod analyze;
pub mod compare;
pub mod config;
pub mod io;
pub mod sweep;
pub mod table;

use std::path::PathBuf;

/// Errors surfaced by the lab. User errors exit with code 2, everything else
/// with 1.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{0}")]
    User(String),
    #[error("path does not exist: {}", .0.display())]
    MissingPath(PathBuf),
    #[error(transparent)]
    Core(#[from] topo_core::error::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Internal(String),
}

impl LabError {
    pub fn user(msg: impl Into<String>) -> Self {
        LabError::User(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        LabError::Io {
            context: context.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> u8 {
        use topo_core::error::Error as E;
        match self {
            LabError::User(_) | LabError::MissingPath(_) => 2,
            LabError::Core(E::Input(_) | E::Usage(_) | E::Format(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;

/// Version string recorded in provenance blocks.
pub const CODE_VERSION: &str = concat!("topo-lab ", env!("CARGO_PKG_VERSION"));
