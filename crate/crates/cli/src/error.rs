use std::fmt;

use epgt_core::attention::AttentionError;
use epgt_core::estimators::EstimationError;
use epgt_core::interventions::InterventionError;
use epgt_core::probing::ProbeError;
use epgt_core::robustness::StudyError;
use epgt_core::scene::SceneError;
use epgt_core::tensor_io::TensorIoError;

/// A failed command, classified by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config values or missing required options (exit 1).
    Usage(String),
    /// Missing, malformed or incomplete input data (exit 2).
    Data(String),
    /// A numerical breakdown: degenerate design, non-finite loss (exit 3).
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numerical(_) => 3,
        }
    }

    pub fn usage(m: impl Into<String>) -> Self {
        Self::Usage(m.into())
    }

    pub fn data(m: impl Into<String>) -> Self {
        Self::Data(m.into())
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Data(m) | Self::Numerical(m) => f.write_str(m),
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<TensorIoError> for CliError {
    fn from(e: TensorIoError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::InvalidConfig(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<EstimationError> for CliError {
    fn from(e: EstimationError) -> Self {
        match e {
            EstimationError::DegenerateConfiguration { .. } | EstimationError::Geometry(_) => {
                Self::Numerical(e.to_string())
            }
            EstimationError::InvalidConfig(_) => Self::Usage(e.to_string()),
            EstimationError::InsufficientCorrespondences { .. } => Self::Data(e.to_string()),
        }
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::NonFiniteLoss { .. }
            | ProbeError::AllDegenerate
            | ProbeError::Geometry(_) => Self::Numerical(e.to_string()),
            ProbeError::Invalid(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<AttentionError> for CliError {
    fn from(e: AttentionError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<InterventionError> for CliError {
    fn from(e: InterventionError) -> Self {
        match e {
            InterventionError::Schema(_) | InterventionError::EmptyRange(..) => {
                Self::Usage(e.to_string())
            }
            InterventionError::Probe(p) => p.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<StudyError> for CliError {
    fn from(e: StudyError) -> Self {
        match e {
            StudyError::Config(_) => Self::Usage(e.to_string()),
            StudyError::Scene(s) => s.into(),
            _ => Self::Data(e.to_string()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_follow_the_error_class() {
        let degenerate: CliError = EstimationError::DegenerateConfiguration { ratio: 0.0 }.into();
        assert_eq!(degenerate.code(), 3);
        let loss: CliError = ProbeError::NonFiniteLoss { epoch: 2 }.into();
        assert_eq!(loss.code(), 3);
        let config: CliError = StudyError::Config("x".into()).into();
        assert_eq!(config.code(), 1);
        let grid: CliError = StudyError::IncompleteGrid(vec!["a".into()]).into();
        assert_eq!(grid.code(), 2);
        let io: CliError = TensorIoError::Invalid("bad".into()).into();
        assert_eq!(io.code(), 2);
    }
}
