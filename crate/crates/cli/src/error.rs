use thiserror::Error;

use peerweave::analytics::AnalyticsError;
use peerweave::engine::EngineError;
use peerweave::topology::TopologyError;
use peerweave::transport::TransportError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Explosion(String),
    #[error("{0}")]
    SuiteFailed(String),
    #[error("{0}")]
    Infeasible(String),
    #[error("live mode: {0}")]
    Live(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Explosion(_) => 3,
            CliError::SuiteFailed(_) => 4,
            CliError::Infeasible(_) => 5,
            CliError::Live(_) => 6,
            CliError::Io(_) => 1,
        }
    }
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Topology(t) => t.into(),
            EngineError::Analytics(a) => a.into(),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<TopologyError> for CliError {
    fn from(e: TopologyError) -> Self {
        match e {
            TopologyError::PathExplosion { .. } => CliError::Explosion(e.to_string()),
            TopologyError::InfeasibleDelta { .. } => CliError::Infeasible(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<AnalyticsError> for CliError {
    fn from(e: AnalyticsError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<TransportError> for CliError {
    fn from(e: TransportError) -> Self {
        CliError::Live(e.to_string())
    }
}
