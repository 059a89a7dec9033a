//! The execution interface every hidden-Markov model implements.
//!
//! A particle is one boxed [`Model`]. The engine drives it through
//! `init` → (`run` → `observe` → [`save`/`load`] → `reseed`)* and never
//! inspects its state directly; replication and inter-worker transfer go
//! through the opaque byte form returned by [`Model::save`].
//!
//! [`save`/`load`]: Model::save

mod linear_gaussian;
mod registry;

use std::fmt;

use bincode::Options;

pub use linear_gaussian::{
    kalman_log_marginal, LinearGaussianFactory, LinearGaussianModel, LinearGaussianParams,
    LinearGaussianSettings,
};
pub use registry::{ModelBuilder, ModelRegistry};

use crate::observation::{ObservationSeries, Time};
use crate::params::Parameters;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("model not initialized")]
    Uninitialized,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid observation record: {0}")]
    InvalidRecord(String),
    #[error("cannot run backwards from time {current} to {target}")]
    TimeReversal { current: Time, target: Time },
    #[error("state deserialization failed: {0}")]
    Deserialize(String),
    #[error("state serialization failed: {0}")]
    Serialize(String),
    #[error("operation not supported by model `{0}`")]
    Unsupported(String),
}

/// One stochastic model realization (a particle).
///
/// Implementations own their random stream. `init` and `reseed` replace it;
/// `run` consumes it. Two instances holding the same state and the same
/// stream must produce bit-identical results.
pub trait Model: Send {
    /// Builds the initial state `x_{t_0}` at time 0 from `params`.
    fn init(&mut self, params: &Parameters, seed: u64) -> Result<(), ModelError>;

    /// Advances the state to `target` using the current random stream.
    fn run(&mut self, target: Time) -> Result<(), ModelError>;

    /// Observation likelihood of `record` given the current state. Must not
    /// mutate state and must return a finite nonnegative value.
    fn observe(&self, record: &[f64]) -> Result<f64, ModelError>;

    /// Natural log of [`observe`](Self::observe). Override when the density
    /// can underflow in linear space.
    fn log_observe(&self, record: &[f64]) -> Result<f64, ModelError> {
        self.observe(record).map(f64::ln)
    }

    /// Serializes the complete state, including parameters and random stream.
    fn save(&self) -> Result<Vec<u8>, ModelError>;

    /// Restores a state produced by [`save`](Self::save).
    fn load(&mut self, state: &[u8]) -> Result<(), ModelError>;

    /// Replaces the random stream without advancing the state.
    fn reseed(&mut self, seed: u64);

    fn time(&self) -> Time;

    /// Named state summary used to localize round-trip mismatches.
    fn describe(&self) -> Vec<(String, String)> {
        Vec::new()
    }
}

/// Creates particles of one model kind. Shared by all workers.
pub trait ModelFactory: Send + Sync {
    fn name(&self) -> &str;

    /// Column names of an observation record, in order.
    fn observation_fields(&self) -> Vec<String>;

    fn create(&self) -> Box<dyn Model>;

    /// Runs one realization at `params` and applies the observation process
    /// at the model's configured schedule.
    fn synthesize(&self, params: &Parameters, seed: u64) -> Result<ObservationSeries, ModelError> {
        let _ = (params, seed);
        Err(ModelError::Unsupported(self.name().to_string()))
    }
}

/// Where a save/load round trip first disagreed with the original.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundtripMismatch {
    pub field: String,
    pub original: String,
    pub restored: String,
}

impl fmt::Display for RoundtripMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "`{}` diverged: original {} vs restored {}",
            self.field, self.original, self.restored
        )
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RoundtripError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Mismatch(RoundtripMismatch),
}

/// Saves `model`, loads the bytes into a fresh instance, then reseeds both
/// with `seed`, advances both to `advance_to` and compares their summaries,
/// serialized states and `observe(probe)` values.
pub fn check_state_roundtrip(
    factory: &dyn ModelFactory,
    model: &mut dyn Model,
    probe: &[f64],
    advance_to: Time,
    seed: u64,
) -> Result<(), RoundtripError> {
    let bytes = model.save()?;
    let mut restored = factory.create();
    restored.load(&bytes)?;
    compare(&*model, &*restored, probe)?;

    model.reseed(seed);
    restored.reseed(seed);
    model.run(advance_to)?;
    restored.run(advance_to)?;
    compare(&*model, &*restored, probe)
}

fn compare(a: &dyn Model, b: &dyn Model, probe: &[f64]) -> Result<(), RoundtripError> {
    let mismatch = |field: &str, original: String, restored: String| {
        Err(RoundtripError::Mismatch(RoundtripMismatch {
            field: field.to_string(),
            original,
            restored,
        }))
    };
    if a.time() != b.time() {
        return mismatch("time", a.time().to_string(), b.time().to_string());
    }
    let (da, db) = (a.describe(), b.describe());
    for ((name, va), (_, vb)) in da.iter().zip(&db) {
        if va != vb {
            return mismatch(name, va.clone(), vb.clone());
        }
    }
    if da.len() != db.len() {
        return mismatch("describe", da.len().to_string(), db.len().to_string());
    }
    let (sa, sb) = (a.save()?, b.save()?);
    if sa != sb {
        let at = sa.iter().zip(&sb).position(|(x, y)| x != y).unwrap_or(sa.len().min(sb.len()));
        return mismatch("state bytes", format!("offset {at}"), format!("offset {at}"));
    }
    let (oa, ob) = (a.log_observe(probe)?, b.log_observe(probe)?);
    if oa.to_bits() != ob.to_bits() {
        return mismatch("observe", oa.to_string(), ob.to_string());
    }
    Ok(())
}

pub(crate) fn encode_state<T: serde::Serialize>(value: &T) -> Result<Vec<u8>, ModelError> {
    bincode::serialize(value).map_err(|e| ModelError::Serialize(e.to_string()))
}

pub(crate) fn decode_state<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, ModelError> {
    let options = bincode::options().with_fixint_encoding().reject_trailing_bytes();
    bincode::Options::deserialize(options, bytes).map_err(|e| ModelError::Deserialize(e.to_string()))
}
