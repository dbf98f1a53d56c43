use std::path::{Path, PathBuf};

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}, line {line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: u64,
        msg: String,
    },

    /// Input files that are readable but inconsistent with each other.
    #[error("{0}")]
    Artifact(String),

    #[error(transparent)]
    Model(#[from] vfmodel_core::Error),
}

impl CliError {
    /// Process exit status: 1 usage, 2 input/output, 3 numerical failure.
    pub fn exit_code(&self) -> i32 {
        use vfmodel_core::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } | CliError::Parse { .. } | CliError::Artifact(_) => 2,
            CliError::Model(e) => match e {
                E::Config(_) | E::InvalidParameter(_) => 1,
                E::NonFinite { .. } | E::NotPositiveDefinite => 3,
                E::Structure(_) | E::TooFewVisits { .. } | E::Empty(_) => 2,
            },
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, line: u64, msg: impl Into<String>) -> Self {
        CliError::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.into(),
        }
    }

    pub fn csv(path: &Path, e: csv::Error) -> Self {
        let line = e.position().map(|p| p.line()).unwrap_or(0);
        match e.into_kind() {
            csv::ErrorKind::Io(source) => CliError::io(path, source),
            kind => CliError::parse(path, line, format!("{kind:?}")),
        }
    }
}
