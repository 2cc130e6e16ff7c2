use std::fmt;
use std::path::Path;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Io,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Validation => 1,
            ErrorKind::Io => 2,
            ErrorKind::Numerical => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Validation => "validation",
            ErrorKind::Io => "io",
            ErrorKind::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Error {
    pub kind: ErrorKind,
    pub msg: String,
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl fmt::Display) -> Self {
        Error {
            kind: ErrorKind::Validation,
            msg: msg.to_string(),
        }
    }

    pub fn numerical(msg: impl fmt::Display) -> Self {
        Error {
            kind: ErrorKind::Numerical,
            msg: msg.to_string(),
        }
    }

    pub fn io(path: &Path, err: impl fmt::Display) -> Self {
        Error {
            kind: ErrorKind::Io,
            msg: format!("{}: {err}", path.display()),
        }
    }

    /// Prefixes the message with a path, keeping the kind.
    pub fn at(self, path: &Path) -> Self {
        Error {
            kind: self.kind,
            msg: format!("{}: {}", path.display(), self.msg),
        }
    }

    /// One-line diagnostic for stderr: `error kind=<kind> msg="<json-escaped message>"`.
    pub fn diagnostic(&self) -> String {
        let msg = serde_json::to_string(&self.msg).unwrap_or_else(|_| String::from("\"?\""));
        format!("error kind={} msg={msg}", self.kind.as_str())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.kind.as_str(), self.msg)
    }
}

impl std::error::Error for Error {}

macro_rules! validation_from {
    ($($t:ty),*) => {
        $(impl From<$t> for Error {
            fn from(e: $t) -> Self {
                Error::validation(e)
            }
        })*
    };
}

validation_from!(
    opaseg_core::volume::VolumeError,
    opaseg_core::fusion::FusionError,
    opaseg_core::metrics::MetricError,
    opaseg_core::phantom::PhantomError,
    opaseg_core::split::SplitError,
    opaseg_core::segnet::NetError,
    opaseg_core::segnet::DatasetError,
    opaseg_core::opacity::OpacityGroupsError
);
