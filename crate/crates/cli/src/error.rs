use bppo_core::analysis::AnalysisError;
use bppo_core::curation::CurationError;
use bppo_core::policy::PolicyError;
use bppo_core::trainer::TrainError;

/// Failure of one invocation; each kind maps to a distinct exit code.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    InvalidConfig(String),
    MissingCheckpoint(String),
    Io(String),
    Training(String),
    CheckFailed(String),
    Other(String),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Other(_) => 1,
            CliError::Usage(_) => 2,
            CliError::InvalidConfig(_) => 3,
            CliError::MissingCheckpoint(_) => 4,
            CliError::Io(_) => 5,
            CliError::Training(_) => 6,
            CliError::CheckFailed(_) => 7,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Other(_) => "other",
            CliError::Usage(_) => "usage",
            CliError::InvalidConfig(_) => "invalid_config",
            CliError::MissingCheckpoint(_) => "missing_checkpoint",
            CliError::Io(_) => "io",
            CliError::Training(_) => "training_failed",
            CliError::CheckFailed(_) => "check_failed",
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m)
            | CliError::InvalidConfig(m)
            | CliError::MissingCheckpoint(m)
            | CliError::Io(m)
            | CliError::Training(m)
            | CliError::CheckFailed(m)
            | CliError::Other(m) => m,
        }
    }

    /// `error: kind=<kind> msg=<message on one line>`
    pub fn line(&self) -> String {
        let msg: String = self
            .message()
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ");
        format!("error: kind={} msg={}", self.kind(), msg)
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let m = e.to_string();
        match e {
            TrainError::InvalidConfig(_) => CliError::InvalidConfig(m),
            TrainError::WarmupFailed { .. } | TrainError::NonFinite { .. } => CliError::Training(m),
            TrainError::Io(_) | TrainError::Schema(_) => CliError::Io(m),
            TrainError::Policy(p) => p.into(),
            TrainError::Objective(_) | TrainError::Rollout(_) => CliError::Other(m),
        }
    }
}

impl From<PolicyError> for CliError {
    fn from(e: PolicyError) -> Self {
        let m = e.to_string();
        match e {
            PolicyError::InvalidConfig(_) => CliError::InvalidConfig(m),
            PolicyError::Checkpoint(_) => CliError::MissingCheckpoint(m),
            _ => CliError::Other(m),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        let m = e.to_string();
        match e {
            AnalysisError::InvalidInput(_) => CliError::InvalidConfig(m),
            AnalysisError::Schema(_) | AnalysisError::Io(_) => CliError::Io(m),
            AnalysisError::Train(t) => t.into(),
            AnalysisError::Policy(p) => p.into(),
            _ => CliError::Other(m),
        }
    }
}

impl From<CurationError> for CliError {
    fn from(e: CurationError) -> Self {
        let m = e.to_string();
        match e {
            CurationError::InvalidInput(_) | CurationError::EmptyPrompt(_) => CliError::InvalidConfig(m),
            CurationError::Policy(p) => p.into(),
            CurationError::ZeroEmbedding(_) => CliError::Other(m),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}
