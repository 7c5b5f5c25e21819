use std::fmt;

use neoclassical::Error as CoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Formula,
    Model,
    Data,
    Identifiability,
    NotConverged,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Usage | ErrorKind::Formula | ErrorKind::Model => 1,
            ErrorKind::Data => 2,
            ErrorKind::Identifiability => 3,
            ErrorKind::NotConverged | ErrorKind::Numerical => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Usage => "usage",
            ErrorKind::Formula => "formula",
            ErrorKind::Model => "model",
            ErrorKind::Data => "data",
            ErrorKind::Identifiability => "identifiability",
            ErrorKind::NotConverged => "not_converged",
            ErrorKind::Numerical => "numerical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }

    /// `error kind=<kind> code=<n>: <message>` on a single line.
    pub fn diagnostic_line(&self) -> String {
        let msg: String = self
            .message
            .chars()
            .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
            .collect();
        format!(
            "error kind={} code={}: {}",
            self.kind.as_str(),
            self.exit_code(),
            msg
        )
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let kind = match &e {
            CoreError::Formula(_) => ErrorKind::Formula,
            CoreError::UnknownName(_)
            | CoreError::NotAFactor(_)
            | CoreError::UnknownLevel { .. }
            | CoreError::MissingTrend { .. }
            | CoreError::InvalidNewUnit(_)
            | CoreError::NotEstimable
            | CoreError::NotABlockTerm(_)
            | CoreError::InvalidGrid(_) => ErrorKind::Model,
            CoreError::NotIdentifiable(_) | CoreError::Saturated => ErrorKind::Identifiability,
            CoreError::NotConverged => ErrorKind::NotConverged,
            CoreError::NotPositiveDefinite
            | CoreError::InvalidCovariance(_)
            | CoreError::InvalidCoefficients(_) => ErrorKind::Numerical,
            _ => ErrorKind::Data,
        };
        CliError::new(kind, e.to_string())
    }
}
