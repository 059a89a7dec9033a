//! Worker side of the protocol: particle custody, evaluation and routing.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};

use super::messages::{
    MasterCommand, ParticleTransfer, RouteTrace, SeedContext, WorkerReply, WorkerReport,
};
use super::transport::{PeerTransport, SendRequest};
use crate::balancer::RoutingEntry;
use crate::error::ProtocolStep;
use crate::instrumentation::{Stage, StageClock, StageTiming};
use crate::model::{Model, ModelFactory};
use crate::params::Parameters;
use crate::seed::{derive_seed, replica, SeedKey};

/// A failure localized to a protocol step.
pub type StepError = (ProtocolStep, String);

/// Particles held by one worker, keyed by lineage id.
pub type Holdings = BTreeMap<usize, Box<dyn Model>>;

/// Inputs of one routing application besides the particles and the transport.
pub struct RoutingContext<'a> {
    pub rank: usize,
    pub observation: usize,
    pub seeds: SeedContext,
    pub factory: &'a dyn ModelFactory,
    pub timeout: Duration,
}

/// Applies this worker's routing slice.
///
/// Sends outgoing states without blocking, replicates local particles while
/// polling for inbound states, then waits for the remaining receives and
/// sends. Every resulting particle is reseeded from its new lineage id.
/// Timings are appended to `timings` as consecutive laps of `clock`.
pub fn apply_routing(
    ctx: &RoutingContext<'_>,
    holdings: &mut Holdings,
    entries: &[RoutingEntry],
    transport: &mut dyn PeerTransport,
    clock: &mut StageClock,
    timings: &mut Vec<StageTiming>,
) -> Result<RouteTrace, StepError> {
    let me = ctx.rank;
    let j = ctx.observation;
    let sample = ctx.seeds.sample;
    let started = Instant::now();
    let mut trace = RouteTrace {
        rank: me,
        observation: j,
        ..RouteTrace::default()
    };

    let mut local: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut outgoing: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    let mut incoming: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for e in entries {
        match (e.source == me, e.destination == me) {
            (true, true) => local.entry(e.lineage).or_default().push(e.new_lineage),
            (true, false) => outgoing.entry((e.lineage, e.destination)).or_default().push(e.new_lineage),
            (false, true) => incoming.entry(e.lineage).or_default().push(e.new_lineage),
            (false, false) => {
                return Err((ProtocolStep::Route, format!("entry {e:?} does not involve worker {me}")))
            }
        }
    }
    for &(lineage, _) in outgoing.keys() {
        if !holdings.contains_key(&lineage) {
            return Err((ProtocolStep::Route, format!("lineage {lineage} is not held here")));
        }
    }
    if let Some(lineage) = local.keys().find(|l| !holdings.contains_key(l)) {
        return Err((ProtocolStep::Route, format!("lineage {lineage} is not held here")));
    }

    // (a) drop particles with no descendants
    holdings.retain(|lineage, _| {
        local.contains_key(lineage) || outgoing.keys().any(|&(l, _)| l == *lineage)
    });

    // (b) post sends
    let mut sends: Vec<SendRequest> = Vec::with_capacity(outgoing.len());
    for (&(lineage, destination), ids) in &outgoing {
        let state = holdings[&lineage]
            .save()
            .map_err(|e| (ProtocolStep::SendTransfers, e.to_string()))?;
        let req = transport
            .isend(ParticleTransfer {
                observation: j,
                lineage,
                new_lineage: ids[0],
                source: me,
                destination,
                state,
            })
            .map_err(|e| (ProtocolStep::SendTransfers, e.to_string()))?;
        sends.push(req);
    }
    trace.sends = sends.len();
    timings.push(clock.lap(Stage::Route, sample, j));

    let mut next = Holdings::new();
    let mut received: Vec<ParticleTransfer> = Vec::with_capacity(incoming.len());
    let mut poll = |received: &mut Vec<ParticleTransfer>, trace: &mut RouteTrace| -> Result<(), StepError> {
        while let Some(t) = transport
            .try_recv()
            .map_err(|e| (ProtocolStep::ReceiveTransfers, e.to_string()))?
        {
            if t.observation != j || t.destination != me || !incoming.contains_key(&t.lineage) {
                return Err((
                    ProtocolStep::ReceiveTransfers,
                    format!(
                        "unexpected transfer of lineage {} from worker {} at observation {}",
                        t.lineage, t.source, t.observation
                    ),
                ));
            }
            if received.iter().any(|r| r.lineage == t.lineage) {
                return Err((ProtocolStep::ReceiveTransfers, format!("duplicate transfer of lineage {}", t.lineage)));
            }
            received.push(t);
            trace.last_receive_complete = Some(started.elapsed().as_secs_f64());
        }
        Ok(())
    };

    // (c) replicate local particles, polling receives in between
    for (lineage, ids) in &local {
        trace.first_replicate_start.get_or_insert_with(|| started.elapsed().as_secs_f64());
        let original = holdings.remove(lineage).expect("validated above");
        if ids.len() > 1 {
            let state = original
                .save()
                .map_err(|e| (ProtocolStep::Replicate, e.to_string()))?;
            for &id in &ids[1..] {
                next.insert(id, restore(ctx.factory, &state)?);
                trace.replications += 1;
                poll(&mut received, &mut trace)?;
            }
        }
        next.insert(ids[0], original);
        poll(&mut received, &mut trace)?;
    }
    timings.push(clock.lap(Stage::Replicate, sample, j));

    // (d) wait for the remaining receives, then replicate them
    let deadline = Instant::now() + ctx.timeout;
    while received.len() < incoming.len() {
        poll(&mut received, &mut trace)?;
        if received.len() == incoming.len() {
            break;
        }
        if Instant::now() >= deadline {
            return Err((
                ProtocolStep::ReceiveTransfers,
                format!(
                    "timed out with {} of {} transfers received",
                    received.len(),
                    incoming.len()
                ),
            ));
        }
        std::thread::sleep(Duration::from_micros(50));
    }
    trace.receives = received.len();
    timings.push(clock.lap(Stage::TransferWait, sample, j));
    for t in &received {
        let ids = &incoming[&t.lineage];
        if ids[0] != t.new_lineage {
            return Err((
                ProtocolStep::ReceiveTransfers,
                format!("lineage {} arrived for id {}, expected {}", t.lineage, t.new_lineage, ids[0]),
            ));
        }
        for &id in ids {
            next.insert(id, restore(ctx.factory, &t.state)?);
        }
        trace.replications += ids.len() - 1;
    }
    timings.push(clock.lap(Stage::Replicate, sample, j));

    // (e) sent-only particles may go once their sends complete
    for req in &sends {
        req.wait();
    }
    holdings.clear();
    timings.push(clock.lap(Stage::TransferWait, sample, j));

    // (f) independent streams for all copies
    for (&id, model) in next.iter_mut() {
        model.reseed(particle_seed(ctx.seeds, j, id));
    }
    *holdings = next;
    trace.holdings = holdings.len();
    timings.push(clock.lap(Stage::Route, sample, j));
    Ok(trace)
}

fn restore(factory: &dyn ModelFactory, state: &[u8]) -> Result<Box<dyn Model>, StepError> {
    let mut m = factory.create();
    m.load(state).map_err(|e| (ProtocolStep::Replicate, e.to_string()))?;
    Ok(m)
}

/// Seed of particle `lineage` after resampling at observation `j` (0 at initialization).
pub fn particle_seed(ctx: SeedContext, j: usize, lineage: usize) -> u64 {
    derive_seed(SeedKey::new(
        ctx.chain,
        ctx.sample,
        j as u64,
        lineage as u64,
        replica::PARTICLE,
    ))
}

pub(crate) struct Worker {
    pub rank: usize,
    pub factory: Arc<dyn ModelFactory>,
    pub transport: Box<dyn PeerTransport>,
    pub commands: Receiver<MasterCommand>,
    pub replies: Sender<WorkerReply>,
    pub timeout: Duration,
}

struct RunState {
    holdings: Holdings,
    seeds: SeedContext,
    observation: usize,
    clock: StageClock,
    timings: Vec<StageTiming>,
    /// Stage charged for the idle time until the next command arrives.
    waiting: Option<Stage>,
}

impl Worker {
    /// Serves commands until `Shutdown` or until the master hangs up.
    pub fn serve(mut self) {
        let mut st = RunState {
            holdings: Holdings::new(),
            seeds: SeedContext::default(),
            observation: 0,
            clock: StageClock::new(Some(self.rank)),
            timings: Vec::new(),
            waiting: None,
        };
        while let Ok(cmd) = self.commands.recv() {
            if let Some(stage) = st.waiting.take() {
                let t = st.clock.lap(stage, st.seeds.sample, st.observation);
                st.timings.push(t);
            }
            let step = step_of(&cmd);
            let outcome = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                self.handle(cmd, &mut st)
            }));
            let reply = match outcome {
                Ok(Ok(Some(reply))) => reply,
                Ok(Ok(None)) => return,
                Ok(Err((step, message))) => self.failed(step, message, &mut st),
                Err(panic) => {
                    let message = panic
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| panic.downcast_ref::<String>().cloned())
                        .unwrap_or_else(|| "worker panicked".into());
                    self.failed(step, message, &mut st)
                }
            };
            if self.replies.send(reply).is_err() {
                return;
            }
        }
    }

    fn failed(&self, step: ProtocolStep, message: String, st: &mut RunState) -> WorkerReply {
        st.holdings.clear();
        st.timings.clear();
        st.waiting = None;
        WorkerReply::Failed {
            rank: self.rank,
            step,
            message,
        }
    }

    fn handle(&mut self, cmd: MasterCommand, st: &mut RunState) -> Result<Option<WorkerReply>, StepError> {
        let reply = match cmd {
            MasterCommand::Broadcast {
                params,
                context,
                lineages,
            } => {
                st.clock.reset();
                st.timings.clear();
                st.seeds = context;
                st.observation = 0;
                self.initialize(&params, &lineages, st)?;
                st.timings.push(st.clock.lap(Stage::Init, context.sample, 0));
                st.waiting = Some(Stage::InitSync);
                WorkerReply::Initialized {
                    rank: self.rank,
                    timings: std::mem::take(&mut st.timings),
                }
            }
            MasterCommand::Advance {
                observation,
                target_time,
                record,
            } => {
                st.observation = observation;
                let sample = st.seeds.sample;
                for model in st.holdings.values_mut() {
                    model
                        .run(target_time)
                        .map_err(|e| (ProtocolStep::Advance, e.to_string()))?;
                }
                st.timings.push(st.clock.lap(Stage::Run, sample, observation));
                let mut log_weights = Vec::with_capacity(st.holdings.len());
                for (&lineage, model) in &st.holdings {
                    let lw = model
                        .log_observe(&record)
                        .map_err(|e| (ProtocolStep::Advance, e.to_string()))?;
                    log_weights.push((lineage, lw));
                }
                st.timings.push(st.clock.lap(Stage::Observe, sample, observation));
                st.waiting = Some(Stage::LikelihoodGather);
                WorkerReply::Weights(WorkerReport {
                    rank: self.rank,
                    observation,
                    log_weights,
                    timings: std::mem::take(&mut st.timings),
                })
            }
            MasterCommand::Route { observation, entries } => {
                if observation != st.observation {
                    return Err((
                        ProtocolStep::Route,
                        format!("routing for observation {observation} while at {}", st.observation),
                    ));
                }
                let ctx = RoutingContext {
                    rank: self.rank,
                    observation,
                    seeds: st.seeds,
                    factory: self.factory.as_ref(),
                    timeout: self.timeout,
                };
                let trace = apply_routing(
                    &ctx,
                    &mut st.holdings,
                    &entries,
                    self.transport.as_mut(),
                    &mut st.clock,
                    &mut st.timings,
                )?;
                st.waiting = Some(Stage::Route);
                WorkerReply::Routed {
                    trace,
                    timings: std::mem::take(&mut st.timings),
                }
            }
            MasterCommand::Exit => {
                st.holdings.clear();
                st.timings
                    .push(st.clock.lap(Stage::Exit, st.seeds.sample, st.observation));
                WorkerReply::Exited {
                    rank: self.rank,
                    timings: std::mem::take(&mut st.timings),
                }
            }
            MasterCommand::Shutdown => return Ok(None),
        };
        Ok(Some(reply))
    }

    fn initialize(&self, params: &Parameters, lineages: &[usize], st: &mut RunState) -> Result<(), StepError> {
        st.holdings.clear();
        for &lineage in lineages {
            let mut m = self.factory.create();
            m.init(params, particle_seed(st.seeds, 0, lineage))
                .map_err(|e| (ProtocolStep::Initialize, e.to_string()))?;
            st.holdings.insert(lineage, m);
        }
        Ok(())
    }
}

fn step_of(cmd: &MasterCommand) -> ProtocolStep {
    match cmd {
        MasterCommand::Broadcast { .. } => ProtocolStep::Initialize,
        MasterCommand::Advance { .. } => ProtocolStep::Advance,
        MasterCommand::Route { .. } => ProtocolStep::Route,
        MasterCommand::Exit | MasterCommand::Shutdown => ProtocolStep::Exit,
    }
}
