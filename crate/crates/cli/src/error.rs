use std::path::PathBuf;

use thiserror::Error;

/// Exit status for invalid configuration, missing inputs and stage-order
/// violations.
pub const EXIT_VALIDATION: i32 = 2;
/// Exit status for a stage that started and then failed.
pub const EXIT_STAGE: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("missing {what} `{}`: {hint}", path.display())]
    MissingInput { what: String, path: PathBuf, hint: String },
    #[error("artifact `{}`: {message}", path.display())]
    Artifact { path: PathBuf, message: String },
    #[error("{stage} stage failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: saap_core::Error,
    },
    #[error("{stage} stage: {source}")]
    Rejected {
        stage: &'static str,
        #[source]
        source: saap_core::Error,
    },
    #[error("I/O on `{}`: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn config(key: &str, message: impl Into<String>) -> Self {
        CliError::Config {
            key: key.to_string(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// Wraps a core error, separating argument problems from runtime
    /// failures.
    pub fn stage(stage: &'static str, source: saap_core::Error) -> Self {
        use saap_core::Error as E;
        match source {
            E::InvalidConfig(_)
            | E::InvalidArgument(_)
            | E::Validation(_)
            | E::TooFewSamples { .. }
            | E::InfeasibleRatio(_)
            | E::PlanMismatch(_)
            | E::SurvivorMinimum { .. }
            | E::CorpusTooSmall { .. }
            | E::SequenceTooLong { .. } => CliError::Rejected { stage, source },
            _ => CliError::Stage { stage, source },
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::MissingInput { .. } | CliError::Artifact { .. } | CliError::Rejected { .. } => {
                EXIT_VALIDATION
            }
            CliError::Stage { .. } | CliError::Io { .. } => EXIT_STAGE,
        }
    }
}
