//! The `synth`, `run` and `check` operations behind the command-line tool.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::balancer::routing_battery;
use crate::config::EngineConfig;
use crate::error::{Error, Result};
use crate::executor::{Executor, ExecutorConfig, FaultInjection, SeedContext};
use crate::ibm::{IbmFactory, IbmSettings};
use crate::instrumentation::aggregate_timings;
use crate::model::{kalman_log_marginal, LinearGaussianFactory, LinearGaussianParams, ModelFactory, ModelRegistry};
use crate::observation::ObservationSeries;
use crate::params::Parameters;
use crate::sampler::{acceptance_rate, run_chain, ChainRecord, FilterEvaluator, MetropolisHastings, Prior, PriorKind};

/// Writes synthetic observations generated at the configured initial
/// parameters to `config.data`.
pub fn synth(config: &EngineConfig, registry: &ModelRegistry) -> Result<PathBuf> {
    let factory = config.factory(registry)?;
    let obs = factory.synthesize(&config.initial()?, config.seed)?;
    let path = config.data_path()?.to_path_buf();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    obs.write_csv_file(&path)?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub samples: u64,
    pub accepted: usize,
    pub acceptance_rate: Option<f64>,
    pub mean_efficiency: Option<f64>,
    pub degenerate_samples: usize,
    pub mean_move_fraction: Option<f64>,
    pub mean_copy_fraction: Option<f64>,
    pub output: PathBuf,
}

pub const CHAIN_FILE: &str = "chain.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.csv";
pub const STAGES_FILE: &str = "stages.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Runs the chain and writes `chain.csv`, `diagnostics.csv`, `stages.csv`
/// and `summary.csv` into `config.output`.
pub fn run(config: &EngineConfig, registry: &ModelRegistry, fault: Option<FaultInjection>) -> Result<RunSummary> {
    let factory = config.factory(registry)?;
    let obs = ObservationSeries::read_csv_file(config.data_path()?)?;
    if obs.fields() != factory.observation_fields().as_slice() {
        return Err(Error::InvalidObservations(format!(
            "columns {:?} do not match model `{}` fields {:?}",
            obs.fields(),
            factory.name(),
            factory.observation_fields()
        )));
    }
    std::fs::create_dir_all(&config.output)?;
    let names: Vec<String> = config.parameters.iter().map(|p| p.name.clone()).collect();
    let mut sink = OutputSink::create(&config.output, &names)?;

    let executor = Executor::new(factory, config.executor_config(fault))?;
    let mut evaluator = FilterEvaluator::new(executor, obs, config.seed);
    let mut sampler = config.sampler()?;
    let chain = run_chain(
        &mut sampler,
        &mut evaluator,
        &config.initial()?,
        config.samples,
        config.acceptance_window,
        |record| sink.write(record),
    )?;
    let summary = summarize(&chain, &config.output);
    sink.finish(&summary)?;
    Ok(summary)
}

fn summarize(chain: &[ChainRecord], output: &Path) -> RunSummary {
    let mean = |xs: Vec<f64>| (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64);
    let diags = || chain.iter().filter_map(|r| r.diagnostics.as_ref());
    let per_sample = |f: fn(&crate::executor::ResampleEvent) -> f64| {
        mean(diags()
            .filter(|d| !d.events.is_empty())
            .map(|d| d.events.iter().map(f).sum::<f64>() / d.events.len() as f64)
            .collect())
    };
    RunSummary {
        samples: chain.len() as u64,
        accepted: chain[1..].iter().filter(|r| r.accepted).count(),
        acceptance_rate: acceptance_rate(chain),
        mean_efficiency: mean(diags().filter_map(|d| d.efficiency).collect()),
        degenerate_samples: chain.iter().filter(|r| r.degenerate).count(),
        mean_move_fraction: per_sample(|e| e.traffic.move_fraction),
        mean_copy_fraction: per_sample(|e| e.traffic.copy_fraction),
        output: output.to_path_buf(),
    }
}

struct OutputSink {
    chain: csv::Writer<BufWriter<File>>,
    diagnostics: csv::Writer<BufWriter<File>>,
    stages: csv::Writer<BufWriter<File>>,
    summary_path: PathBuf,
}

impl OutputSink {
    fn create(dir: &Path, names: &[String]) -> Result<Self> {
        let open = |name: &str| -> Result<csv::Writer<BufWriter<File>>> {
            Ok(csv::Writer::from_writer(BufWriter::new(File::create(dir.join(name))?)))
        };
        let mut chain = open(CHAIN_FILE)?;
        chain.write_record(chain_header(names))?;
        let mut diagnostics = open(DIAGNOSTICS_FILE)?;
        diagnostics.write_record([
            "sample",
            "observation",
            "redraw_rate",
            "move_fraction",
            "copy_fraction",
            "stage",
            "worker",
            "duration",
        ])?;
        let mut stages = open(STAGES_FILE)?;
        stages.write_record(["sample", "stage", "count", "mean", "p10", "p90"])?;
        Ok(Self {
            chain,
            diagnostics,
            stages,
            summary_path: dir.join(SUMMARY_FILE),
        })
    }

    fn write(&mut self, r: &ChainRecord) -> Result<()> {
        self.chain.write_record(chain_row(r))?;
        self.chain.flush()?;

        let Some(d) = &r.diagnostics else {
            return Ok(());
        };
        let mut timings = d.timings.clone();
        timings.sort_by_key(|t| (t.observation, t.worker.map_or(0, |w| w + 1)));
        for t in &timings {
            let event = d.events.iter().find(|e| e.observation == t.observation);
            let metric = |f: fn(&crate::executor::ResampleEvent) -> f64| event.map(f).map(|v| v.to_string()).unwrap_or_default();
            self.diagnostics.write_record([
                r.sample_index.to_string(),
                t.observation.to_string(),
                metric(|e| e.redraw_rate),
                metric(|e| e.traffic.move_fraction),
                metric(|e| e.traffic.copy_fraction),
                t.stage.name().to_string(),
                t.worker.map(|w| w.to_string()).unwrap_or_default(),
                t.duration.to_string(),
            ])?;
        }
        for s in aggregate_timings(&d.timings) {
            self.stages.write_record([
                s.sample.to_string(),
                s.stage.name().to_string(),
                s.count.to_string(),
                s.mean.to_string(),
                s.p10.to_string(),
                s.p90.to_string(),
            ])?;
        }
        Ok(())
    }

    fn finish(mut self, s: &RunSummary) -> Result<()> {
        self.diagnostics.flush()?;
        self.stages.flush()?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_path(&self.summary_path)?;
        w.write_record(["key", "value"])?;
        for (k, v) in [
            ("samples", s.samples.to_string()),
            ("accepted", s.accepted.to_string()),
            ("acceptance_rate", opt(s.acceptance_rate)),
            ("mean_efficiency", opt(s.mean_efficiency)),
            ("degenerate_samples", s.degenerate_samples.to_string()),
            ("mean_move_fraction", opt(s.mean_move_fraction)),
            ("mean_copy_fraction", opt(s.mean_copy_fraction)),
        ] {
            w.write_record([k, v.as_str()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Renders a chain as the `chain.csv` byte stream.
pub fn chain_csv(chain: &[ChainRecord]) -> Result<Vec<u8>> {
    let names: Vec<String> = chain
        .first()
        .map(|r| r.params.names().map(String::from).collect())
        .unwrap_or_default();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(chain_header(&names))?;
    for r in chain {
        w.write_record(chain_row(r))?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn chain_header(names: &[String]) -> Vec<String> {
    let mut header = vec!["sample".to_string()];
    header.extend(names.iter().map(|n| format!("theta_{n}")));
    header.extend(["log_likelihood", "log_std", "log_prior", "accepted"].map(String::from));
    header
}

fn chain_row(r: &ChainRecord) -> Vec<String> {
    let mut row = vec![r.sample_index.to_string()];
    row.extend(r.params.values().map(|v| v.to_string()));
    row.extend([
        r.log_likelihood.to_string(),
        r.log_std.to_string(),
        r.log_prior.to_string(),
        r.accepted.to_string(),
    ]);
    row
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone)]
pub struct CheckOptions {
    pub seed: u64,
    pub fault: Option<FaultInjection>,
    /// Worker counts compared by the invariance check.
    pub worker_counts: Vec<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            seed: 2024,
            fault: None,
            worker_counts: vec![1, 2, 4],
        }
    }
}

/// Self-contained verification suite; needs no data files.
pub fn check(options: &CheckOptions) -> Result<Vec<CheckOutcome>> {
    Ok(vec![
        check_kalman(options)?,
        check_routing(options),
        check_invariance(options)?,
    ])
}

fn check_kalman(options: &CheckOptions) -> Result<CheckOutcome> {
    let factory = LinearGaussianFactory::default();
    let truth = Parameters::from_pairs([("a", 0.9)])?;
    let obs = factory.synthesize(&truth, options.seed)?;
    let exact = kalman_log_marginal(&LinearGaussianParams::default(), &obs)?;
    let mut executor = Executor::new(Arc::new(factory), ExecutorConfig::new(2, 500))?;
    let replicates = 40;
    let mut ratios = Vec::with_capacity(replicates);
    for k in 0..replicates {
        let run = executor.run_particle_filter(
            &truth,
            &obs,
            SeedContext {
                chain: options.seed,
                sample: k as u64,
            },
        )?;
        ratios.push((run.estimate.log_value - exact).exp());
    }
    let (mean, se) = mean_and_se(&ratios);
    let z = (mean - 1.0) / se;
    Ok(CheckOutcome {
        name: "kalman-vs-pf",
        passed: z.abs() <= 3.0,
        detail: format!("mean L̂/L = {mean:.4} ± {se:.4} over {replicates} runs (z = {z:.2})"),
    })
}

fn check_routing(options: &CheckOptions) -> CheckOutcome {
    let report = routing_battery(1000, options.seed);
    CheckOutcome {
        name: "routing-battery",
        passed: report.failures.is_empty(),
        detail: match report.failures.first() {
            None => format!("{} instances, all properties hold", report.instances),
            Some(f) => format!("{} of {} failed; first: {f}", report.failures.len(), report.instances),
        },
    }
}

fn check_invariance(options: &CheckOptions) -> Result<CheckOutcome> {
    let settings = IbmSettings {
        observations: 5,
        ..IbmSettings::desk()
    };
    let factory: Arc<dyn ModelFactory> = Arc::new(IbmFactory::new(settings.clone())?);
    let truth = Parameters::from_pairs([("k_prey", settings.k_prey), ("k_pred", settings.k_pred)])?;
    let obs = factory.synthesize(&truth, options.seed)?;
    let mut outputs = Vec::new();
    for &w in &options.worker_counts {
        let mut config = ExecutorConfig::new(w, 32);
        config.fault = options.fault;
        let chain = invariance_chain(Arc::clone(&factory), config, &obs, &truth, options.seed, 3)?;
        outputs.push((w, chain_csv(&chain)?));
    }
    let differing: Vec<usize> = outputs
        .iter()
        .filter(|(_, bytes)| *bytes != outputs[0].1)
        .map(|(w, _)| *w)
        .collect();
    Ok(CheckOutcome {
        name: "worker-count-invariance",
        passed: differing.is_empty(),
        detail: if differing.is_empty() {
            format!("chain identical for W in {:?}", options.worker_counts)
        } else {
            format!("chain for W={differing:?} differs from W={}", outputs[0].0)
        },
    })
}

/// Short IBM chain used by invariance checks.
pub fn invariance_chain(
    factory: Arc<dyn ModelFactory>,
    config: ExecutorConfig,
    obs: &ObservationSeries,
    initial: &Parameters,
    seed: u64,
    samples: u64,
) -> Result<Vec<ChainRecord>> {
    let prior = Prior::new(initial.names().map(|n| (n.to_string(), PriorKind::Uniform { lower: 1.0, upper: 100.0 })))?;
    let scales = initial.names().map(|n| (n.to_string(), 2.0)).collect();
    let mut sampler = MetropolisHastings::new(prior, scales, seed)?;
    let executor = Executor::new(factory, config)?;
    let mut evaluator = FilterEvaluator::new(executor, obs.clone(), seed);
    run_chain(&mut sampler, &mut evaluator, initial, samples, 20, |_| Ok(()))
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
