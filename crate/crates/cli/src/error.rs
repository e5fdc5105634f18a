use std::fmt;
use std::path::Path;

/// Failure classes of the command-line tool, one per exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, mismatched files, incompatible checkpoints.
    Input(String),
    /// A NaN or infinity surfaced during computation.
    Numeric(String),
    /// Unreadable, unwritable or corrupt files.
    Io(String),
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 1,
            CliError::Numeric(_) => 2,
            CliError::Io(_) => 3,
        }
    }

    pub fn input(msg: impl Into<String>) -> Self {
        CliError::Input(msg.into())
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "input error: {m}"),
            CliError::Numeric(m) => write!(f, "numeric error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<walmafa::Error> for CliError {
    fn from(e: walmafa::Error) -> Self {
        use walmafa::Error as E;
        match e {
            E::Shape(_) | E::Param(_) | E::Version(_) => CliError::Input(e.to_string()),
            E::Numeric { .. } => CliError::Numeric(e.to_string()),
            E::Format(_) | E::Io(_) => CliError::Io(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Io(format!("json: {e}"))
    }
}

/// Attaches a path to walmafa errors that come from file access.
pub(crate) fn at(path: &Path) -> impl Fn(walmafa::Error) -> CliError + '_ {
    move |e| match e {
        walmafa::Error::Io(io) => CliError::io(path, io),
        walmafa::Error::Format(m) => CliError::io(path, m),
        other => other.into(),
    }
}
