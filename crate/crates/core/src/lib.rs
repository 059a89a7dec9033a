//! Parallel particle Markov chain Monte Carlo.
//!
//! A pseudo-marginal Metropolis–Hastings sampler whose likelihood comes from
//! a particle filter distributed over worker threads. Particles are black-box
//! stochastic models; after each resampling step a greedy balancer decides
//! which serialized states move between workers.

pub mod app;
pub mod balancer;
pub mod config;
pub mod error;
pub mod executor;
pub mod filter;
pub mod ibm;
pub mod instrumentation;
pub mod model;
pub mod observation;
pub mod params;
pub mod sampler;
pub mod seed;

pub use error::{Error, Result};
pub use executor::{Executor, ExecutorConfig, FilterRun, SeedContext};
pub use filter::{LikelihoodEstimate, ResamplingScheme};
pub use model::{Model, ModelError, ModelFactory};
pub use observation::{ObservationSeries, Time};
pub use params::Parameters;
