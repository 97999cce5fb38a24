use std::path::Path;

use shadowstorm::attack::AttackError;
use shadowstorm::autodiff::AutodiffError;
use shadowstorm::image::{ImageError, PnmError};
use shadowstorm::metrics::MetricError;
use shadowstorm::models::{ModelError, ParamsError};
use shadowstorm::synth::SynthError;
use thiserror::Error;

/// Every failure a command can report, grouped by exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("i/o: {0}")]
    Io(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("{failed} of {total} cells failed")]
    Partial { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Partial { .. } => 1,
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
            CliError::Validation(_) => 5,
        }
    }

    pub fn io(path: &Path, err: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {err}", path.display()))
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<PnmError> for CliError {
    fn from(e: PnmError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ParamsError> for CliError {
    fn from(e: ParamsError) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<ImageError> for CliError {
    fn from(e: ImageError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<AutodiffError> for CliError {
    fn from(e: AutodiffError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Diverged { .. } | ModelError::NonFiniteParam(_) => CliError::Numeric(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Config(msg) => CliError::Usage(msg),
            AttackError::Model(m) => m.into(),
            AttackError::Image(i) => i.into(),
            e @ (AttackError::NonFiniteGradient { .. } | AttackError::NonFiniteObjective { .. }) => {
                CliError::Numeric(e.to_string())
            }
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(msg) => CliError::Usage(msg),
            SynthError::Index { .. } => CliError::Usage(e.to_string()),
            SynthError::Unsatisfiable { .. } | SynthError::Shape { .. } => CliError::Validation(e.to_string()),
            SynthError::Io { .. } | SynthError::Pnm(_) | SynthError::Missing(_) => CliError::Io(e.to_string()),
        }
    }
}
