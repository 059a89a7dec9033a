//! Master/worker message schema.
//!
//! All messages are plain serde types. The in-process transport moves them
//! as values; [`encode`] and [`decode`] give the versioned byte form for
//! transports that cross process boundaries.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::balancer::RoutingEntry;
use crate::error::{Error, ProtocolStep, Result};
use crate::instrumentation::StageTiming;
use crate::observation::Time;
use crate::params::Parameters;

pub const PROTOCOL_VERSION: u16 = 1;

/// Chain and sample indices that root every seed of one filter run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SeedContext {
    pub chain: u64,
    pub sample: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MasterCommand {
    /// Parameters plus the lineage ids this worker initializes.
    Broadcast {
        params: Parameters,
        context: SeedContext,
        lineages: Vec<usize>,
    },
    /// Advance every particle to `target_time` and score `record`.
    /// Observation indices start at 1.
    Advance {
        observation: usize,
        target_time: Time,
        record: Vec<f64>,
    },
    /// This worker's part of the routing (entries where it is source or destination).
    Route {
        observation: usize,
        entries: Vec<RoutingEntry>,
    },
    /// End of the filter run; drop all particles.
    Exit,
    /// Terminate the worker thread.
    Shutdown,
}

/// Log observation likelihoods of one worker's particles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub rank: usize,
    pub observation: usize,
    /// `(lineage, log P_obs)` pairs.
    pub log_weights: Vec<(usize, f64)>,
    pub timings: Vec<StageTiming>,
}

/// Ordering evidence for the communication/computation overlap.
///
/// Offsets are seconds since the worker received its routing slice.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RouteTrace {
    pub rank: usize,
    pub observation: usize,
    pub first_replicate_start: Option<f64>,
    pub last_receive_complete: Option<f64>,
    pub sends: usize,
    pub receives: usize,
    pub replications: usize,
    pub holdings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum WorkerReply {
    Initialized {
        rank: usize,
        timings: Vec<StageTiming>,
    },
    Weights(WorkerReport),
    Routed {
        trace: RouteTrace,
        timings: Vec<StageTiming>,
    },
    Exited {
        rank: usize,
        timings: Vec<StageTiming>,
    },
    Failed {
        rank: usize,
        step: ProtocolStep,
        message: String,
    },
}

/// Serialized particle state sent between workers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticleTransfer {
    pub observation: usize,
    /// Parent lineage id before resampling.
    pub lineage: usize,
    /// First new lineage id this state is destined for.
    pub new_lineage: usize,
    pub source: usize,
    pub destination: usize,
    pub state: Vec<u8>,
}

/// Version-prefixed binary encoding.
pub fn encode<T: Serialize>(message: &T) -> Result<Vec<u8>> {
    let mut out = PROTOCOL_VERSION.to_le_bytes().to_vec();
    bincode::serialize_into(&mut out, message).map_err(|e| Error::Encoding(e.to_string()))?;
    Ok(out)
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T> {
    let (version, body) = bytes
        .split_first_chunk::<2>()
        .ok_or_else(|| Error::Encoding("message shorter than header".into()))?;
    let version = u16::from_le_bytes(*version);
    if version != PROTOCOL_VERSION {
        return Err(Error::Encoding(format!(
            "protocol version {version}, expected {PROTOCOL_VERSION}"
        )));
    }
    bincode::deserialize(body).map_err(|e| Error::Encoding(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instrumentation::Stage;

    #[test]
    fn commands_roundtrip() {
        let cmds = vec![
            MasterCommand::Broadcast {
                params: Parameters::from_pairs([("k_prey", 25.0), ("k_pred", 15.0)]).unwrap(),
                context: SeedContext { chain: 3, sample: 9 },
                lineages: vec![4, 5, 6],
            },
            MasterCommand::Advance {
                observation: 2,
                target_time: 55,
                record: vec![98.0, 11.0],
            },
            MasterCommand::Route {
                observation: 2,
                entries: vec![RoutingEntry {
                    lineage: 1,
                    source: 0,
                    destination: 1,
                    new_lineage: 0,
                }],
            },
            MasterCommand::Exit,
            MasterCommand::Shutdown,
        ];
        for c in cmds {
            let bytes = encode(&c).unwrap();
            assert_eq!(&bytes[..2], &PROTOCOL_VERSION.to_le_bytes());
            assert_eq!(decode::<MasterCommand>(&bytes).unwrap(), c);
        }
    }

    #[test]
    fn replies_and_transfers_roundtrip() {
        let reply = WorkerReply::Weights(WorkerReport {
            rank: 1,
            observation: 3,
            log_weights: vec![(0, -1.5), (7, f64::NEG_INFINITY)],
            timings: vec![StageTiming {
                stage: Stage::Run,
                worker: Some(1),
                sample: 0,
                observation: 3,
                duration: 0.01,
            }],
        });
        assert_eq!(decode::<WorkerReply>(&encode(&reply).unwrap()).unwrap(), reply);
        let t = ParticleTransfer {
            observation: 1,
            lineage: 2,
            new_lineage: 5,
            source: 0,
            destination: 3,
            state: vec![1, 2, 3],
        };
        assert_eq!(decode::<ParticleTransfer>(&encode(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn rejects_wrong_version_and_truncation() {
        let mut bytes = encode(&MasterCommand::Exit).unwrap();
        bytes[0] = 99;
        assert!(decode::<MasterCommand>(&bytes).is_err());
        assert!(decode::<MasterCommand>(&[1]).is_err());
        let full = encode(&MasterCommand::Advance {
            observation: 1,
            target_time: 2,
            record: vec![1.0],
        })
        .unwrap();
        assert!(decode::<MasterCommand>(&full[..full.len() - 4]).is_err());
    }
}
