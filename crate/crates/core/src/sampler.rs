//! Pseudo-marginal Metropolis–Hastings over model parameters.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::executor::{Executor, FilterRun, ResampleEvent, SeedContext};
use crate::instrumentation::StageTiming;
use crate::model::{kalman_log_marginal, LinearGaussianParams};
use crate::observation::ObservationSeries;
use crate::params::Parameters;
use crate::seed::{derive_seed, replica, SeedKey};

/// Independent prior density of one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum PriorKind {
    Uniform { lower: f64, upper: f64 },
    LogNormal { mu: f64, sigma: f64 },
}

impl PriorKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PriorKind::Uniform { lower, upper } if lower.is_finite() && upper.is_finite() && lower < upper => Ok(()),
            PriorKind::LogNormal { mu, sigma } if mu.is_finite() && sigma.is_finite() && sigma > 0.0 => Ok(()),
            other => Err(Error::Config(format!("invalid prior {other:?}"))),
        }
    }

    /// Normalized log density; `-inf` outside the support.
    pub fn log_density(&self, x: f64) -> f64 {
        match *self {
            PriorKind::Uniform { lower, upper } => {
                if (lower..=upper).contains(&x) {
                    -(upper - lower).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
            PriorKind::LogNormal { mu, sigma } => {
                if x > 0.0 && x.is_finite() {
                    let z = (x.ln() - mu) / sigma;
                    -0.5 * z * z - x.ln() - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }
}

/// Product of independent per-parameter priors.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    terms: Vec<(String, PriorKind)>,
}

impl Prior {
    pub fn new<I, S>(terms: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, PriorKind)>,
        S: Into<String>,
    {
        let mut out = Vec::new();
        for (name, kind) in terms {
            let name = name.into();
            kind.validate()?;
            if out.iter().any(|(n, _): &(String, PriorKind)| *n == name) {
                return Err(Error::Config(format!("duplicate prior for `{name}`")));
            }
            out.push((name, kind));
        }
        Ok(Self { terms: out })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.terms.iter().map(|(n, _)| n.as_str())
    }

    /// Sum of log densities; parameters without a prior term are an error.
    pub fn log_density(&self, params: &Parameters) -> Result<f64> {
        if params.len() != self.terms.len() {
            return Err(Error::InvalidParameters(format!(
                "{} parameters for {} prior terms",
                params.len(),
                self.terms.len()
            )));
        }
        let mut total = 0.0;
        for (name, kind) in &self.terms {
            let x = params
                .get(name)
                .ok_or_else(|| Error::InvalidParameters(format!("no value for `{name}`")))?;
            total += kind.log_density(x);
        }
        Ok(total)
    }
}

/// Per-sample diagnostics carried over from the particle filter.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SampleDiagnostics {
    pub events: Vec<ResampleEvent>,
    pub timings: Vec<StageTiming>,
    pub efficiency: Option<f64>,
    pub wall_seconds: f64,
    pub degenerate_at: Option<usize>,
}

impl From<FilterRun> for SampleDiagnostics {
    fn from(run: FilterRun) -> Self {
        Self {
            efficiency: run.efficiency(),
            events: run.events,
            timings: run.timings,
            wall_seconds: run.wall_seconds,
            degenerate_at: run.degenerate_at,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub log_likelihood: f64,
    pub log_std: f64,
    pub diagnostics: Option<SampleDiagnostics>,
}

/// Source of (estimated) log marginal likelihoods.
pub trait LikelihoodEvaluator {
    fn evaluate(&mut self, params: &Parameters, sample: u64) -> Result<Evaluation>;
}

/// Particle-filter estimate on a worker pool.
pub struct FilterEvaluator {
    executor: Executor,
    observations: ObservationSeries,
    chain: u64,
}

impl FilterEvaluator {
    pub fn new(executor: Executor, observations: ObservationSeries, chain: u64) -> Self {
        Self {
            executor,
            observations,
            chain,
        }
    }
}

impl LikelihoodEvaluator for FilterEvaluator {
    fn evaluate(&mut self, params: &Parameters, sample: u64) -> Result<Evaluation> {
        let run = self.executor.run_particle_filter(
            params,
            &self.observations,
            SeedContext {
                chain: self.chain,
                sample,
            },
        )?;
        Ok(Evaluation {
            log_likelihood: run.estimate.log_value,
            log_std: run.estimate.log_std,
            diagnostics: Some(run.into()),
        })
    }
}

/// Exact likelihood of the linear-Gaussian model.
pub struct KalmanEvaluator {
    base: LinearGaussianParams,
    observations: ObservationSeries,
}

impl KalmanEvaluator {
    pub fn new(base: LinearGaussianParams, observations: ObservationSeries) -> Self {
        Self { base, observations }
    }
}

impl LikelihoodEvaluator for KalmanEvaluator {
    fn evaluate(&mut self, params: &Parameters, _sample: u64) -> Result<Evaluation> {
        let p = self.base.with_overrides(params)?;
        Ok(Evaluation {
            log_likelihood: kalman_log_marginal(&p, &self.observations)?,
            log_std: 0.0,
            diagnostics: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRecord {
    pub sample_index: u64,
    /// Current state of the chain after this sample.
    pub params: Parameters,
    pub log_likelihood: f64,
    pub log_std: f64,
    pub log_prior: f64,
    pub accepted: bool,
    /// Proposed point, kept even when rejected.
    pub proposal: Parameters,
    /// `None` when the proposal was rejected without evaluation.
    pub proposal_log_likelihood: Option<f64>,
    /// Acceptance rate over the trailing window; `None` for the initial record.
    pub acceptance_rate: Option<f64>,
    /// The likelihood estimate of the proposal collapsed to zero.
    pub degenerate: bool,
    pub diagnostics: Option<SampleDiagnostics>,
}

impl ChainRecord {
    pub fn log_posterior(&self) -> f64 {
        self.log_likelihood + self.log_prior
    }
}

/// Metropolis acceptance test on log posteriors with a uniform draw `u ∈ [0,1)`.
pub fn accept(log_post_new: f64, log_post_current: f64, u: f64) -> bool {
    if log_post_new.is_nan() || log_post_new == f64::NEG_INFINITY {
        return false;
    }
    if log_post_current == f64::NEG_INFINITY {
        return true;
    }
    u < (log_post_new - log_post_current).exp()
}

/// One transition of a chain. Other samplers plug in here.
pub trait Sampler {
    fn step(
        &mut self,
        current: &ChainRecord,
        sample_index: u64,
        evaluator: &mut dyn LikelihoodEvaluator,
    ) -> Result<ChainRecord>;

    fn prior(&self) -> &Prior;
}

/// Gaussian random walk with fixed per-parameter scales.
#[derive(Debug, Clone)]
pub struct MetropolisHastings {
    prior: Prior,
    scales: Vec<(String, f64)>,
    chain: u64,
}

impl MetropolisHastings {
    /// `scales` must name exactly the prior's parameters.
    pub fn new(prior: Prior, scales: Vec<(String, f64)>, chain: u64) -> Result<Self> {
        for (name, s) in &scales {
            if !(s.is_finite() && *s >= 0.0) {
                return Err(Error::Config(format!("proposal scale of `{name}` must be ≥ 0")));
            }
            if !prior.names().any(|n| n == name) {
                return Err(Error::Config(format!("proposal scale for `{name}` has no prior")));
            }
        }
        if scales.len() != prior.terms.len() {
            return Err(Error::Config("every parameter needs a proposal scale".into()));
        }
        Ok(Self { prior, scales, chain })
    }

    fn propose(&self, current: &Parameters, rng: &mut ChaCha8Rng) -> Result<Parameters> {
        let mut next = current.clone();
        for (name, scale) in &self.scales {
            let z: f64 = rng.sample(StandardNormal);
            let x = current
                .get(name)
                .ok_or_else(|| Error::InvalidParameters(format!("no value for `{name}`")))?;
            next.set(name, x + scale * z)?;
        }
        Ok(next)
    }
}

impl Sampler for MetropolisHastings {
    fn step(
        &mut self,
        current: &ChainRecord,
        sample_index: u64,
        evaluator: &mut dyn LikelihoodEvaluator,
    ) -> Result<ChainRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(SeedKey::new(
            self.chain,
            sample_index,
            0,
            0,
            replica::PROPOSAL,
        )));
        let proposal = self.propose(&current.params, &mut rng)?;
        let u: f64 = rng.random();
        let rejected = |proposal_log_likelihood, degenerate, diagnostics| ChainRecord {
            sample_index,
            params: current.params.clone(),
            log_likelihood: current.log_likelihood,
            log_std: current.log_std,
            log_prior: current.log_prior,
            accepted: false,
            proposal: proposal.clone(),
            proposal_log_likelihood,
            acceptance_rate: None,
            degenerate,
            diagnostics,
        };

        let log_prior = self.prior.log_density(&proposal)?;
        if log_prior == f64::NEG_INFINITY {
            return Ok(rejected(None, false, None));
        }
        let eval = evaluator.evaluate(&proposal, sample_index)?;
        let degenerate = eval.log_likelihood == f64::NEG_INFINITY;
        if degenerate {
            log::warn!("sample {sample_index}: degenerate likelihood estimate, proposal rejected");
        }
        if accept(eval.log_likelihood + log_prior, current.log_posterior(), u) {
            Ok(ChainRecord {
                sample_index,
                params: proposal.clone(),
                log_likelihood: eval.log_likelihood,
                log_std: eval.log_std,
                log_prior,
                accepted: true,
                proposal,
                proposal_log_likelihood: Some(eval.log_likelihood),
                acceptance_rate: None,
                degenerate,
                diagnostics: eval.diagnostics,
            })
        } else {
            Ok(rejected(Some(eval.log_likelihood), degenerate, eval.diagnostics))
        }
    }

    fn prior(&self) -> &Prior {
        &self.prior
    }
}

/// Runs `samples` records: the evaluated starting point, then `samples - 1`
/// transitions. `on_record` sees each record as soon as it exists.
pub fn run_chain(
    sampler: &mut dyn Sampler,
    evaluator: &mut dyn LikelihoodEvaluator,
    initial: &Parameters,
    samples: u64,
    window: usize,
    mut on_record: impl FnMut(&ChainRecord) -> Result<()>,
) -> Result<Vec<ChainRecord>> {
    if samples == 0 {
        return Err(Error::Config("need at least one sample".into()));
    }
    if window == 0 {
        return Err(Error::Config("acceptance window must be ≥ 1".into()));
    }
    let with_index = |index: u64, e: Error| Error::Sample {
        index,
        source: Box::new(e),
    };
    let log_prior = sampler.prior().log_density(initial).map_err(|e| with_index(0, e))?;
    if log_prior == f64::NEG_INFINITY {
        return Err(with_index(0, Error::InvalidParameters("initial point outside the prior support".into())));
    }
    let eval = evaluator.evaluate(initial, 0).map_err(|e| with_index(0, e))?;
    let degenerate = eval.log_likelihood == f64::NEG_INFINITY;
    if degenerate {
        log::warn!("sample 0: degenerate likelihood estimate at the initial point");
    }
    let first = ChainRecord {
        sample_index: 0,
        params: initial.clone(),
        log_likelihood: eval.log_likelihood,
        log_std: eval.log_std,
        log_prior,
        accepted: true,
        proposal: initial.clone(),
        proposal_log_likelihood: Some(eval.log_likelihood),
        acceptance_rate: None,
        degenerate,
        diagnostics: eval.diagnostics,
    };
    on_record(&first)?;
    let mut chain = vec![first];
    let mut recent: VecDeque<bool> = VecDeque::with_capacity(window);
    for index in 1..samples {
        let current = chain.last().expect("nonempty");
        let mut next = sampler
            .step(current, index, evaluator)
            .map_err(|e| with_index(index, e))?;
        if recent.len() == window {
            recent.pop_front();
        }
        recent.push_back(next.accepted);
        next.acceptance_rate = Some(recent.iter().filter(|a| **a).count() as f64 / recent.len() as f64);
        on_record(&next)?;
        chain.push(next);
    }
    Ok(chain)
}

/// Fraction of transitions (records after the first) that were accepted.
pub fn acceptance_rate(chain: &[ChainRecord]) -> Option<f64> {
    let moves = chain.get(1..)?;
    if moves.is_empty() {
        return None;
    }
    Some(moves.iter().filter(|r| r.accepted).count() as f64 / moves.len() as f64)
}
