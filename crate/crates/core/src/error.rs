use std::path::PathBuf;

use thiserror::Error;

use crate::model::ModelError;

/// Protocol stage at which a master or worker failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ProtocolStep {
    Broadcast,
    Initialize,
    Advance,
    Gather,
    Resample,
    Route,
    SendTransfers,
    ReceiveTransfers,
    Replicate,
    Reseed,
    Exit,
}

impl std::fmt::Display for ProtocolStep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ProtocolStep::Broadcast => "broadcast",
            ProtocolStep::Initialize => "initialize",
            ProtocolStep::Advance => "advance",
            ProtocolStep::Gather => "gather",
            ProtocolStep::Resample => "resample",
            ProtocolStep::Route => "route",
            ProtocolStep::SendTransfers => "send-transfers",
            ProtocolStep::ReceiveTransfers => "receive-transfers",
            ProtocolStep::Replicate => "replicate",
            ProtocolStep::Reseed => "reseed",
            ProtocolStep::Exit => "exit",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("invalid observations: {0}")]
    InvalidObservations(String),

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    #[error("invalid routing input: {0}")]
    InvalidRouting(String),

    #[error("model error: {0}")]
    Model(#[from] ModelError),

    #[error("protocol failure on {actor} during {step}: {message}")]
    Protocol {
        /// `None` for the master.
        actor: Actor,
        step: ProtocolStep,
        message: String,
    },

    #[error("sample {index}: {source}")]
    Sample {
        index: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {message}")]
    Data {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("message encoding: {0}")]
    Encoding(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Who raised a protocol failure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Actor {
    Master,
    Worker(usize),
}

impl std::fmt::Display for Actor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Actor::Master => f.write_str("master"),
            Actor::Worker(rank) => write!(f, "worker {rank}"),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
