use std::sync::Arc;
use std::time::{Duration, Instant};

use pfmcmc::error::{Actor, Error, ProtocolStep};
use pfmcmc::executor::{Executor, ExecutorConfig, SeedContext};
use pfmcmc::filter::ResamplingScheme;
use pfmcmc::ibm::{IbmFactory, IbmSettings};
use pfmcmc::model::{
    kalman_log_marginal, LinearGaussianFactory, LinearGaussianModel, LinearGaussianParams,
    LinearGaussianSettings, Model, ModelError, ModelFactory,
};
use pfmcmc::observation::{ObservationSeries, Time};
use pfmcmc::Parameters;

fn lg_obs() -> (Arc<LinearGaussianFactory>, Parameters, ObservationSeries) {
    let factory = Arc::new(LinearGaussianFactory::default());
    let truth = Parameters::from_pairs([("a", 0.9)]).unwrap();
    let obs = factory.synthesize(&truth, 17).unwrap();
    (factory, truth, obs)
}

#[test]
fn estimate_is_close_to_kalman() {
    let (factory, truth, obs) = lg_obs();
    let exact = kalman_log_marginal(&LinearGaussianParams::default(), &obs).unwrap();
    let mut ex = Executor::new(factory, ExecutorConfig::new(3, 2000)).unwrap();
    let run = ex.run_particle_filter(&truth, &obs, SeedContext::default()).unwrap();
    assert!((run.estimate.log_value - exact).abs() < 0.5, "{} vs {exact}", run.estimate.log_value);
    assert!(run.estimate.log_std > 0.0 && run.estimate.log_std < 0.5);
    assert_eq!(run.estimate.log_means.len(), obs.len());
    assert_eq!(run.events.len(), obs.len() - 1);
}

#[test]
fn estimates_do_not_depend_on_worker_count() {
    let (factory, truth, obs) = lg_obs();
    for scheme in [ResamplingScheme::Multinomial, ResamplingScheme::Systematic] {
        let mut reference = None;
        for w in [1, 2, 3, 5, 8] {
            let mut config = ExecutorConfig::new(w, 50);
            config.resampling = scheme;
            let mut ex = Executor::new(factory.clone(), config).unwrap();
            let run = ex.run_particle_filter(&truth, &obs, SeedContext { chain: 4, sample: 2 }).unwrap();
            let counts: Vec<_> = run.events.iter().map(|e| e.counts.clone()).collect();
            let key = (run.estimate.log_value.to_bits(), counts);
            match &reference {
                None => reference = Some(key),
                Some(r) => assert_eq!(*r, key, "W={w} {scheme:?}"),
            }
        }
    }
}

#[test]
fn ibm_estimates_do_not_depend_on_worker_count() {
    let settings = IbmSettings {
        observations: 4,
        ..IbmSettings::desk()
    };
    let factory = Arc::new(IbmFactory::new(settings).unwrap());
    let truth = Parameters::from_pairs([("k_prey", 25.0), ("k_pred", 15.0)]).unwrap();
    let obs = factory.synthesize(&truth, 8).unwrap();
    let values: Vec<u64> = [1, 4, 7]
        .into_iter()
        .map(|w| {
            let mut ex = Executor::new(factory.clone(), ExecutorConfig::new(w, 40)).unwrap();
            ex.run_particle_filter(&truth, &obs, SeedContext { chain: 1, sample: 1 })
                .unwrap()
                .estimate
                .log_value
                .to_bits()
        })
        .collect();
    assert!(values.windows(2).all(|v| v[0] == v[1]));
}

#[test]
fn executor_is_reusable_and_seeded_by_sample() {
    let (factory, truth, obs) = lg_obs();
    let mut ex = Executor::new(factory, ExecutorConfig::new(2, 64)).unwrap();
    let a = ex.run_particle_filter(&truth, &obs, SeedContext { chain: 0, sample: 0 }).unwrap();
    let b = ex.run_particle_filter(&truth, &obs, SeedContext { chain: 0, sample: 1 }).unwrap();
    let c = ex.run_particle_filter(&truth, &obs, SeedContext { chain: 0, sample: 0 }).unwrap();
    assert_eq!(a.estimate.log_value.to_bits(), c.estimate.log_value.to_bits());
    assert_ne!(a.estimate.log_value, b.estimate.log_value);
}

#[test]
fn more_workers_than_particles() {
    let (factory, truth, obs) = lg_obs();
    let mut ex = Executor::new(factory.clone(), ExecutorConfig::new(8, 3)).unwrap();
    let run = ex.run_particle_filter(&truth, &obs, SeedContext::default()).unwrap();
    let mut single = Executor::new(factory, ExecutorConfig::new(1, 3)).unwrap();
    let reference = single.run_particle_filter(&truth, &obs, SeedContext::default()).unwrap();
    assert_eq!(run.estimate.log_value.to_bits(), reference.estimate.log_value.to_bits());
    assert!(run.events.iter().all(|e| e.max_load == 1));
}

#[test]
fn routing_respects_capacity_and_traffic_bounds() {
    let (factory, truth, obs) = lg_obs();
    let mut ex = Executor::new(factory, ExecutorConfig::new(4, 37)).unwrap();
    let run = ex.run_particle_filter(&truth, &obs, SeedContext::default()).unwrap();
    for e in &run.events {
        assert_eq!(e.max_load, 10);
        assert!(e.loads.iter().all(|l| *l <= 10));
        assert_eq!(e.loads.iter().sum::<usize>(), 37);
        assert!(e.redraw_rate > 0.0 && e.redraw_rate <= 1.0);
        assert!(e.traffic.move_fraction + e.traffic.copy_fraction <= 1.0);
    }
    let traces = &run.route_traces;
    assert_eq!(traces.len(), 4 * run.events.len());
}

#[test]
fn timings_tile_within_wall_clock() {
    let (factory, truth, obs) = lg_obs();
    let mut ex = Executor::new(factory, ExecutorConfig::new(3, 200)).unwrap();
    let started = Instant::now();
    let run = ex.run_particle_filter(&truth, &obs, SeedContext::default()).unwrap();
    let wall = started.elapsed().as_secs_f64();
    for w in 0..3 {
        let total: f64 = run.timings.iter().filter(|t| t.worker == Some(w)).map(|t| t.duration).sum();
        assert!(total <= wall + 1e-3, "worker {w}: {total} > {wall}");
        assert!(total > 0.0);
    }
    assert!(run.timings.iter().all(|t| t.duration >= 0.0));
    let e = run.efficiency().unwrap();
    assert!((0.0..=1.0).contains(&e));
}

#[test]
fn local_replication_overlaps_delayed_transfers() {
    let (factory, truth, obs) = lg_obs();
    let mut config = ExecutorConfig::new(4, 64);
    config.transfer_latency = Duration::from_millis(20);
    let mut ex = Executor::new(factory, config).unwrap();
    let run = ex.run_particle_filter(&truth, &obs, SeedContext::default()).unwrap();
    // Somewhere a worker replicated locally before its last delayed receive completed.
    let overlapped = run.route_traces.iter().any(|t| match (t.first_replicate_start, t.last_receive_complete) {
        (Some(rep), Some(recv)) => rep < recv,
        _ => false,
    });
    assert!(overlapped, "{:?}", run.route_traces);
    assert!(run.route_traces.iter().any(|t| t.receives > 0));
}

/// Linear-Gaussian particle that refuses to observe from time 3 on.
struct Failing {
    inner: LinearGaussianModel,
}

impl Model for Failing {
    fn init(&mut self, params: &Parameters, seed: u64) -> Result<(), ModelError> {
        self.inner.init(params, seed)
    }
    fn run(&mut self, target: Time) -> Result<(), ModelError> {
        self.inner.run(target)
    }
    fn observe(&self, record: &[f64]) -> Result<f64, ModelError> {
        if self.inner.time() >= 3 {
            return Err(ModelError::InvalidRecord("refusing".into()));
        }
        self.inner.observe(record)
    }
    fn log_observe(&self, record: &[f64]) -> Result<f64, ModelError> {
        self.observe(record).map(f64::ln)
    }
    fn save(&self) -> Result<Vec<u8>, ModelError> {
        self.inner.save()
    }
    fn load(&mut self, state: &[u8]) -> Result<(), ModelError> {
        self.inner.load(state)
    }
    fn reseed(&mut self, seed: u64) {
        self.inner.reseed(seed)
    }
    fn time(&self) -> Time {
        self.inner.time()
    }
}

struct FailingFactory;

impl ModelFactory for FailingFactory {
    fn name(&self) -> &str {
        "failing"
    }
    fn observation_fields(&self) -> Vec<String> {
        vec!["y".into()]
    }
    fn create(&self) -> Box<dyn Model> {
        Box::new(Failing {
            inner: LinearGaussianModel::new(LinearGaussianParams::default()),
        })
    }
}

#[test]
fn model_failure_is_reported_with_actor_and_step() {
    let (_, truth, obs) = lg_obs();
    let mut ex = Executor::new(Arc::new(FailingFactory), ExecutorConfig::new(2, 8)).unwrap();
    let err = ex.run_particle_filter(&truth, &obs, SeedContext::default()).unwrap_err();
    match err {
        Error::Protocol { actor: Actor::Worker(_), step: ProtocolStep::Advance, message } => {
            assert!(message.contains("refusing"));
        }
        other => panic!("unexpected {other:?}"),
    }
    // A failed executor refuses further work instead of producing garbage.
    assert!(ex.run_particle_filter(&truth, &obs, SeedContext::default()).is_err());
}

#[test]
fn invalid_parameters_fail_at_initialization() {
    let (factory, _, obs) = lg_obs();
    let mut ex = Executor::new(factory, ExecutorConfig::new(2, 8)).unwrap();
    let bad = Parameters::from_pairs([("nope", 1.0)]).unwrap();
    let err = ex.run_particle_filter(&bad, &obs, SeedContext::default()).unwrap_err();
    assert!(matches!(err, Error::Protocol { step: ProtocolStep::Initialize, .. }), "{err:?}");
}

#[test]
fn slow_model_runs_in_parallel() {
    let settings = LinearGaussianSettings {
        times: vec![1, 2],
        advance_delay_ms: 2.0,
        ..LinearGaussianSettings::default()
    };
    let factory = Arc::new(LinearGaussianFactory::new(settings).unwrap());
    let truth = Parameters::from_pairs([("a", 0.9)]).unwrap();
    let obs = factory.synthesize(&truth, 1).unwrap();
    let wall = |w| {
        let mut ex = Executor::new(factory.clone(), ExecutorConfig::new(w, 40)).unwrap();
        ex.run_particle_filter(&truth, &obs, SeedContext::default()).unwrap().wall_seconds
    };
    let (one, four) = (wall(1), wall(4));
    assert!(four < 0.6 * one, "W=4 {four}s vs W=1 {one}s");
}

#[test]
fn rejects_empty_pools() {
    let (factory, _, _) = lg_obs();
    assert!(Executor::new(factory.clone(), ExecutorConfig::new(0, 8)).is_err());
    assert!(Executor::new(factory, ExecutorConfig::new(2, 0)).is_err());
}
