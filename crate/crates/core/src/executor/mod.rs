//! Master/worker particle-filter execution.
//!
//! The master owns no particles. It broadcasts parameters, gathers
//! observation likelihoods, resamples, computes the routing and scatters it.
//! Workers hold the particles and exchange serialized states directly.

mod messages;
mod transport;
mod worker;

use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use serde::{Deserialize, Serialize};

pub use messages::{
    decode, encode, MasterCommand, ParticleTransfer, RouteTrace, SeedContext, WorkerReply,
    WorkerReport, PROTOCOL_VERSION,
};
pub use transport::{channel_mesh, ChannelTransport, PeerTransport, SendRequest, TransportError};
pub use worker::{apply_routing, particle_seed, Holdings, RoutingContext, StepError};

use crate::balancer::{compute_routing, initial_locations, traffic_metrics, ParticleLocation, TrafficMetrics};
use crate::error::{Actor, Error, ProtocolStep, Result};
use crate::filter::{
    estimate_marginal_log, normalize_log_weights, redraw_rate, resample, LikelihoodEstimate,
    ResampleCounts, ResamplingScheme,
};
use crate::instrumentation::{efficiency, Stage, StageClock, StageTiming};
use crate::model::ModelFactory;
use crate::observation::ObservationSeries;
use crate::params::Parameters;
use crate::seed::{derive_seed, replica, SeedKey};

/// Deliberate protocol faults, used to show that the invariance checks catch them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FaultInjection {
    /// Mixes the worker count into the resampling seed.
    DecoupledResampleSeed,
}

#[derive(Debug, Clone)]
pub struct ExecutorConfig {
    pub workers: usize,
    pub particles: usize,
    pub resampling: ResamplingScheme,
    /// Extra delay before any particle transfer completes.
    pub transfer_latency: Duration,
    /// Upper bound on any single wait for a message.
    pub timeout: Duration,
    pub fault: Option<FaultInjection>,
}

impl ExecutorConfig {
    pub fn new(workers: usize, particles: usize) -> Self {
        Self {
            workers,
            particles,
            resampling: ResamplingScheme::default(),
            transfer_latency: Duration::ZERO,
            timeout: Duration::from_secs(120),
            fault: None,
        }
    }
}

/// What happened at one resampling step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleEvent {
    pub observation: usize,
    pub counts: ResampleCounts,
    pub redraw_rate: f64,
    pub traffic: TrafficMetrics,
    pub max_load: usize,
    pub loads: Vec<usize>,
}

/// Result of one particle-filter run.
#[derive(Debug, Clone)]
pub struct FilterRun {
    pub estimate: LikelihoodEstimate,
    pub events: Vec<ResampleEvent>,
    pub timings: Vec<StageTiming>,
    pub route_traces: Vec<RouteTrace>,
    pub wall_seconds: f64,
    /// Observation at which every weight vanished, if any.
    pub degenerate_at: Option<usize>,
}

impl FilterRun {
    pub fn efficiency(&self) -> Option<f64> {
        efficiency(&self.timings)
    }
}

/// A pool of worker threads that evaluates particle filters.
///
/// Worker threads live as long as the executor and are reused across runs.
/// A protocol failure poisons the executor; later runs return an error.
pub struct Executor {
    config: ExecutorConfig,
    commands: Vec<Sender<MasterCommand>>,
    replies: Receiver<WorkerReply>,
    handles: Vec<JoinHandle<()>>,
    poisoned: bool,
}

impl Executor {
    pub fn new(factory: Arc<dyn ModelFactory>, config: ExecutorConfig) -> Result<Self> {
        if config.workers == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        if config.particles == 0 {
            return Err(Error::Config("need at least one particle".into()));
        }
        let (reply_tx, replies) = unbounded();
        let mut commands = Vec::with_capacity(config.workers);
        let mut handles = Vec::with_capacity(config.workers);
        for (rank, transport) in channel_mesh(config.workers, config.transfer_latency)
            .into_iter()
            .enumerate()
        {
            let (tx, rx) = unbounded();
            let w = worker::Worker {
                rank,
                factory: Arc::clone(&factory),
                transport: Box::new(transport),
                commands: rx,
                replies: reply_tx.clone(),
                timeout: config.timeout,
            };
            let handle = std::thread::Builder::new()
                .name(format!("pf-worker-{rank}"))
                .spawn(move || w.serve())?;
            commands.push(tx);
            handles.push(handle);
        }
        Ok(Self {
            config,
            commands,
            replies,
            handles,
            poisoned: false,
        })
    }

    pub fn config(&self) -> &ExecutorConfig {
        &self.config
    }

    /// Runs one particle filter and returns the marginal likelihood estimate.
    ///
    /// A degenerate ensemble is not an error: the estimate is `-inf`.
    pub fn run_particle_filter(
        &mut self,
        params: &Parameters,
        observations: &ObservationSeries,
        seeds: SeedContext,
    ) -> Result<FilterRun> {
        if self.poisoned {
            return Err(self.master_error(ProtocolStep::Broadcast, "executor unusable after an earlier failure"));
        }
        let result = self.drive(params, observations, seeds);
        if result.is_err() {
            self.poisoned = true;
        }
        result
    }

    fn drive(&mut self, params: &Parameters, obs: &ObservationSeries, seeds: SeedContext) -> Result<FilterRun> {
        let started = Instant::now();
        let p = self.config.particles;
        let w = self.config.workers;
        let sample = seeds.sample;
        let mut timings = Vec::new();
        let mut events = Vec::new();
        let mut route_traces = Vec::new();
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(obs.len());
        let mut degenerate_at = None;
        let mut clock = StageClock::new(None);

        // Steps 1-2: broadcast and initialize.
        let mut locations = initial_locations(p, w);
        for (rank, tx) in self.commands.iter().enumerate() {
            let lineages = (0..p).filter(|&l| locations[l] == rank).collect();
            let cmd = MasterCommand::Broadcast {
                params: params.clone(),
                context: seeds,
                lineages,
            };
            tx.send(cmd)
                .map_err(|_| Error::Protocol { actor: Actor::Worker(rank), step: ProtocolStep::Broadcast, message: "worker gone".into() })?;
        }
        self.gather(ProtocolStep::Initialize, |reply| match reply {
            WorkerReply::Initialized { timings: t, .. } => {
                timings.extend(t);
                Ok(())
            }
            other => Err(unexpected(&other)),
        })?;

        for (index, (time, record)) in obs.iter().enumerate() {
            let j = index + 1;
            // Steps 3-5: advance, observe, gather.
            self.broadcast(ProtocolStep::Advance, |_| MasterCommand::Advance {
                observation: j,
                target_time: time,
                record: record.to_vec(),
            })?;
            let mut row = vec![f64::NAN; p];
            let mut seen = vec![false; p];
            self.gather(ProtocolStep::Gather, |reply| match reply {
                WorkerReply::Weights(report) => {
                    timings.extend(report.timings);
                    if report.observation != j {
                        return Err(format!("weights for observation {} at {j}", report.observation));
                    }
                    for (lineage, lw) in report.log_weights {
                        if lineage >= p || seen[lineage] {
                            return Err(format!("bad or repeated lineage {lineage}"));
                        }
                        seen[lineage] = true;
                        row[lineage] = lw;
                    }
                    Ok(())
                }
                other => Err(unexpected(&other)),
            })?;
            if seen.iter().any(|s| !s) {
                return Err(self.master_error(ProtocolStep::Gather, "missing particle weights"));
            }
            let degenerate = row.iter().any(|v| v.is_nan() || *v == f64::INFINITY)
                || row.iter().all(|v| *v == f64::NEG_INFINITY);
            rows.push(row);
            if degenerate {
                log::warn!("sample {sample}: ensemble degenerate at observation {j}");
                degenerate_at = Some(j);
                break;
            }
            if j == obs.len() {
                break;
            }

            // Step 7: resample on the master.
            clock.reset();
            let probs = normalize_log_weights(rows.last().expect("pushed above"))?;
            let counts = resample(self.config.resampling, &probs, p, self.resample_seed(seeds, j));
            timings.push(clock.lap(Stage::Resample, sample, j));

            // Steps 8-9: route and scatter.
            let placed: Vec<ParticleLocation> = locations
                .iter()
                .enumerate()
                .map(|(lineage, &worker)| ParticleLocation { lineage, worker })
                .collect();
            let routing = compute_routing(&counts, &placed, w)?;
            self.broadcast(ProtocolStep::Route, |rank| MasterCommand::Route {
                observation: j,
                entries: routing.slice_for(rank),
            })?;
            timings.push(clock.lap(Stage::Route, sample, j));

            // Step 10 runs on the workers.
            self.gather(ProtocolStep::Route, |reply| match reply {
                WorkerReply::Routed { trace, timings: t } => {
                    timings.extend(t);
                    route_traces.push(trace);
                    Ok(())
                }
                other => Err(unexpected(&other)),
            })?;
            let loads = routing.destination_loads();
            for trace in &route_traces[route_traces.len() - w..] {
                if trace.holdings != loads[trace.rank] {
                    return Err(Error::Protocol {
                        actor: Actor::Worker(trace.rank),
                        step: ProtocolStep::Route,
                        message: format!("holds {} particles, expected {}", trace.holdings, loads[trace.rank]),
                    });
                }
            }
            locations = routing.next_locations();
            events.push(ResampleEvent {
                observation: j,
                redraw_rate: redraw_rate(&counts),
                traffic: traffic_metrics(&routing),
                max_load: routing.max_load,
                loads,
                counts,
            });
        }

        // Step 6: exit.
        self.broadcast(ProtocolStep::Exit, |_| MasterCommand::Exit)?;
        self.gather(ProtocolStep::Exit, |reply| match reply {
            WorkerReply::Exited { timings: t, .. } => {
                timings.extend(t);
                Ok(())
            }
            other => Err(unexpected(&other)),
        })?;

        let estimate = match degenerate_at {
            Some(_) => LikelihoodEstimate::degenerate(rows.len()),
            None => estimate_marginal_log(&rows)?,
        };
        Ok(FilterRun {
            estimate,
            events,
            timings,
            route_traces,
            wall_seconds: started.elapsed().as_secs_f64(),
            degenerate_at,
        })
    }

    fn resample_seed(&self, seeds: SeedContext, j: usize) -> u64 {
        let seed = derive_seed(SeedKey::new(seeds.chain, seeds.sample, j as u64, 0, replica::RESAMPLE));
        match self.config.fault {
            Some(FaultInjection::DecoupledResampleSeed) => seed ^ self.config.workers as u64,
            None => seed,
        }
    }

    fn broadcast(&self, step: ProtocolStep, mut make: impl FnMut(usize) -> MasterCommand) -> Result<()> {
        for (rank, tx) in self.commands.iter().enumerate() {
            tx.send(make(rank)).map_err(|_| Error::Protocol {
                actor: Actor::Worker(rank),
                step,
                message: "worker gone".into(),
            })?;
        }
        Ok(())
    }

    /// Collects one reply from every worker.
    fn gather(
        &self,
        step: ProtocolStep,
        mut accept: impl FnMut(WorkerReply) -> std::result::Result<(), String>,
    ) -> Result<()> {
        let deadline = Instant::now() + self.config.timeout;
        for _ in 0..self.config.workers {
            let reply = match self.replies.recv_deadline(deadline) {
                Ok(r) => r,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(self.master_error(step, "timed out waiting for workers"))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(self.master_error(step, "all workers disconnected"))
                }
            };
            if let WorkerReply::Failed { rank, step, message } = reply {
                return Err(Error::Protocol {
                    actor: Actor::Worker(rank),
                    step,
                    message,
                });
            }
            accept(reply).map_err(|message| self.master_error(step, message))?;
        }
        Ok(())
    }

    fn master_error(&self, step: ProtocolStep, message: impl Into<String>) -> Error {
        Error::Protocol {
            actor: Actor::Master,
            step,
            message: message.into(),
        }
    }
}

fn unexpected(reply: &WorkerReply) -> String {
    let kind = match reply {
        WorkerReply::Initialized { .. } => "initialized",
        WorkerReply::Weights(_) => "weights",
        WorkerReply::Routed { .. } => "routed",
        WorkerReply::Exited { .. } => "exited",
        WorkerReply::Failed { .. } => "failed",
    };
    format!("unexpected `{kind}` reply")
}

impl Drop for Executor {
    fn drop(&mut self) {
        for tx in &self.commands {
            let _ = tx.send(MasterCommand::Shutdown);
        }
        self.commands.clear();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}
