use std::fmt;

use thiserror::Error;

pub type Result<T, E = GlimError> = std::result::Result<T, E>;

/// One offending entry found while validating a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Issue {
    pub path_id: String,
    pub index: Option<usize>,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.index {
            Some(t) => write!(f, "path '{}' at t={}: {}", self.path_id, t, self.message),
            None => write!(f, "path '{}': {}", self.path_id, self.message),
        }
    }
}

fn join_issues(issues: &[Issue]) -> String {
    issues
        .iter()
        .map(Issue::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Debug, Error)]
pub enum GlimError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("degenerate model: {0}")]
    Degenerate(String),

    #[error("dataset validation failed: {}", join_issues(.0))]
    Validation(Vec<Issue>),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("fit failed: {0}")]
    Fit(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl GlimError {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        GlimError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            GlimError::Numerical(_) | GlimError::Range(_) | GlimError::Degenerate(_)
        )
    }
}
