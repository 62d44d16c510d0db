use std::fmt;

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or input files. Exit code 2.
    Usage(String),
    /// The numerics failed: divergence, a singular matrix, a broken invariant. Exit code 1.
    Numeric(String),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let msg = match self {
            CliError::Usage(m) | CliError::Numeric(m) => m,
        };
        // diagnostics stay on one line
        f.write_str(&msg.replace(['\n', '\r'], " "))
    }
}

impl From<latentlab_core::Error> for CliError {
    fn from(e: latentlab_core::Error) -> Self {
        use latentlab_core::Error as E;
        match e {
            E::NotPositiveDefinite(_)
            | E::Singular(_)
            | E::NonMonotone { .. }
            | E::NonFinite(_)
            | E::ZeroProbability(_)
            | E::NoConvergence(_) => CliError::Numeric(e.to_string()),
            _ => CliError::Usage(e.to_string()),
        }
    }
}

impl From<latentlab_deep::Error> for CliError {
    fn from(e: latentlab_deep::Error) -> Self {
        use latentlab_deep::Error as E;
        match e {
            E::Core(c) => c.into(),
            E::Shape(_) | E::InvalidParameter(_) | E::InvalidData(_) => CliError::Usage(e.to_string()),
            E::Tape(_) | E::Diverged { .. } | E::NoConvergence(_) => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Usage(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;
