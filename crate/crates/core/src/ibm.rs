//! Stochastic predator–prey individual-based model.
//!
//! Every organism is tracked individually with a species, a life stage and a
//! mass. One time step applies, in this order and visiting individuals in
//! their stored order:
//!
//! 1. **growth**: every individual gains `growth_increment` mass (no draws);
//! 2. **maturation**: juveniles with mass ≥ `maturation_mass` become adults
//!    (no draws);
//! 3. **predation**: each prey draws one uniform `u` and is eaten when
//!    `u < 1 - exp(-predation_rate * D_pred)`;
//! 4. **death**: each remaining individual draws one uniform `u` and dies
//!    when `u < base_s + inhibition_s * D_s / (D_s + K_s)`, with the
//!    densities taken from the census after predation;
//! 5. **reproduction**: each surviving adult draws `Poisson(λ_s)` offspring
//!    (no draw when `λ_s = 0`), appended as juveniles of `birth_mass` after
//!    all survivors. Prey use `λ = prey_birth_rate`; predators use
//!    `λ = predator_birth_rate * D_prey / (D_prey + food_half_saturation)`
//!    with the prey density after death.
//!
//! `D_s = N_s / area_s` is the abundance density of species `s`, and `K_s`
//! are the two calibrated self-inhibition half-saturation constants.
//! Observations count individuals with mass ≥ `detection_mass` and are
//! scored with a Poisson counting error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::model::{decode_state, encode_state, Model, ModelError, ModelFactory};
use crate::observation::{ObservationSeries, Time};
use crate::params::Parameters;

/// Added to every detectable count so a zero abundance still has a proper
/// Poisson mean.
pub const DETECTION_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Species {
    Prey,
    Predator,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LifeStage {
    Juvenile,
    Adult,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub species: Species,
    pub stage: LifeStage,
    pub mass: f64,
}

/// Fixed (non-calibrated) rates of the model.
///
/// Defaults are tuned so that `desk()` settles near 90 prey and 10 predators
/// and `full_scale()` near 2000 prey and 30 predators by the first observation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IbmRates {
    /// Mean offspring per adult prey per step.
    pub prey_birth_rate: f64,
    /// Mean offspring per adult predator per step at saturating prey density.
    pub predator_birth_rate: f64,
    pub prey_death_rate: f64,
    pub predator_death_rate: f64,
    /// Extra death probability reached as density grows far above `K_prey`.
    pub prey_inhibition: f64,
    pub predator_inhibition: f64,
    pub predation_rate: f64,
    pub food_half_saturation: f64,
    pub growth_increment: f64,
    pub birth_mass: f64,
    pub maturation_mass: f64,
    pub detection_mass: f64,
    pub prey_area: f64,
    pub predator_area: f64,
}

impl Default for IbmRates {
    fn default() -> Self {
        Self {
            prey_birth_rate: 0.12,
            predator_birth_rate: 0.25,
            prey_death_rate: 0.01,
            predator_death_rate: 0.01,
            prey_inhibition: 0.1,
            predator_inhibition: 0.1,
            predation_rate: 0.0005,
            food_half_saturation: 25.0,
            growth_increment: 0.1,
            birth_mass: 1.0,
            maturation_mass: 2.0,
            detection_mass: 1.5,
            prey_area: 4.0,
            predator_area: 2.0 / 3.0,
        }
    }
}

impl IbmRates {
    fn validate(&self) -> Result<(), ModelError> {
        let nonneg = [
            ("prey_birth_rate", self.prey_birth_rate),
            ("predator_birth_rate", self.predator_birth_rate),
            ("prey_death_rate", self.prey_death_rate),
            ("predator_death_rate", self.predator_death_rate),
            ("prey_inhibition", self.prey_inhibition),
            ("predator_inhibition", self.predator_inhibition),
            ("predation_rate", self.predation_rate),
            ("growth_increment", self.growth_increment),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(ModelError::InvalidParameter(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        let positive = [
            ("food_half_saturation", self.food_half_saturation),
            ("birth_mass", self.birth_mass),
            ("maturation_mass", self.maturation_mass),
            ("detection_mass", self.detection_mass),
            ("prey_area", self.prey_area),
            ("predator_area", self.predator_area),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, base, extra) in [
            ("prey", self.prey_death_rate, self.prey_inhibition),
            ("predator", self.predator_death_rate, self.predator_inhibition),
        ] {
            if base + extra > 1.0 {
                return Err(ModelError::InvalidParameter(format!(
                    "{name} death probability can exceed 1"
                )));
            }
        }
        Ok(())
    }
}

/// Calibrated constants plus the fixed rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IbmParameters {
    pub k_prey: f64,
    pub k_pred: f64,
    pub rates: IbmRates,
}

impl IbmParameters {
    pub const CALIBRATED: [&'static str; 2] = ["k_prey", "k_pred"];

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [("k_prey", self.k_prey), ("k_pred", self.k_pred)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(ModelError::InvalidParameter(format!("{name} must be > 0, got {v}")));
            }
        }
        self.rates.validate()
    }

    fn with_overrides(mut self, params: &Parameters) -> Result<Self, ModelError> {
        for (name, value) in params.iter() {
            match name {
                "k_prey" => self.k_prey = value,
                "k_pred" => self.k_pred = value,
                other => {
                    return Err(ModelError::InvalidParameter(format!(
                        "ibm has no calibrated parameter `{other}`"
                    )))
                }
            }
        }
        self.validate()?;
        Ok(self)
    }

    /// Per-step death probability of one individual of `species` when the
    /// species has `abundance` individuals (after predation).
    pub fn death_probability(&self, species: Species, abundance: usize) -> f64 {
        let (base, extra, area, k) = match species {
            Species::Prey => (
                self.rates.prey_death_rate,
                self.rates.prey_inhibition,
                self.rates.prey_area,
                self.k_prey,
            ),
            Species::Predator => (
                self.rates.predator_death_rate,
                self.rates.predator_inhibition,
                self.rates.predator_area,
                self.k_pred,
            ),
        };
        let density = abundance as f64 / area;
        base + extra * density / (density + k)
    }

    /// Probability that one prey is eaten during a step with `predators` alive.
    pub fn predation_probability(&self, predators: usize) -> f64 {
        let density = predators as f64 / self.rates.predator_area;
        1.0 - (-self.rates.predation_rate * density).exp()
    }

    /// Mean offspring of one adult predator when `prey` prey are alive.
    pub fn predator_fecundity(&self, prey: usize) -> f64 {
        let density = prey as f64 / self.rates.prey_area;
        self.rates.predator_birth_rate * density / (density + self.rates.food_half_saturation)
    }
}

/// Census of a population.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Census {
    pub prey_juveniles: usize,
    pub prey_adults: usize,
    pub predator_juveniles: usize,
    pub predator_adults: usize,
    pub detectable_prey: usize,
    pub detectable_predators: usize,
}

impl Census {
    pub fn prey(&self) -> usize {
        self.prey_juveniles + self.prey_adults
    }

    pub fn predators(&self) -> usize {
        self.predator_juveniles + self.predator_adults
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbmState {
    pub individuals: Vec<Individual>,
    pub step: u64,
}

impl IbmState {
    /// `prey` prey followed by `predators` predators, with masses spread
    /// deterministically over twenty growth increments above birth mass.
    pub fn initial(prey: usize, predators: usize, rates: &IbmRates) -> Self {
        let mut individuals = Vec::with_capacity(prey + predators);
        for (species, count) in [(Species::Prey, prey), (Species::Predator, predators)] {
            for i in 0..count {
                let mass = rates.birth_mass + rates.growth_increment * (i % 20) as f64;
                let stage = if mass >= rates.maturation_mass {
                    LifeStage::Adult
                } else {
                    LifeStage::Juvenile
                };
                individuals.push(Individual {
                    species,
                    stage,
                    mass,
                });
            }
        }
        Self {
            individuals,
            step: 0,
        }
    }

    pub fn census(&self, detection_mass: f64) -> Census {
        let mut c = Census::default();
        for ind in &self.individuals {
            let detectable = ind.mass >= detection_mass;
            match (ind.species, ind.stage) {
                (Species::Prey, LifeStage::Juvenile) => c.prey_juveniles += 1,
                (Species::Prey, LifeStage::Adult) => c.prey_adults += 1,
                (Species::Predator, LifeStage::Juvenile) => c.predator_juveniles += 1,
                (Species::Predator, LifeStage::Adult) => c.predator_adults += 1,
            }
            match (ind.species, detectable) {
                (Species::Prey, true) => c.detectable_prey += 1,
                (Species::Predator, true) => c.detectable_predators += 1,
                _ => {}
            }
        }
        c
    }

    fn count(&self, species: Species) -> usize {
        self.individuals.iter().filter(|i| i.species == species).count()
    }
}

/// Advances `state` by one time step, drawing from `rng` in the documented order.
pub fn ibm_step<R: Rng + ?Sized>(state: &mut IbmState, params: &IbmParameters, rng: &mut R) {
    let rates = &params.rates;

    for ind in &mut state.individuals {
        ind.mass += rates.growth_increment;
        if ind.stage == LifeStage::Juvenile && ind.mass >= rates.maturation_mass {
            ind.stage = LifeStage::Adult;
        }
    }

    let p_eaten = params.predation_probability(state.count(Species::Predator));
    state.individuals.retain(|ind| match ind.species {
        Species::Prey => rng.random::<f64>() >= p_eaten,
        Species::Predator => true,
    });

    let d_prey = params.death_probability(Species::Prey, state.count(Species::Prey));
    let d_pred = params.death_probability(Species::Predator, state.count(Species::Predator));
    state.individuals.retain(|ind| {
        let d = match ind.species {
            Species::Prey => d_prey,
            Species::Predator => d_pred,
        };
        rng.random::<f64>() >= d
    });

    let prey_births = poisson(rates.prey_birth_rate);
    let pred_births = poisson(params.predator_fecundity(state.count(Species::Prey)));
    let mut newborn = Vec::new();
    for ind in state.individuals.iter().filter(|i| i.stage == LifeStage::Adult) {
        let dist = match ind.species {
            Species::Prey => &prey_births,
            Species::Predator => &pred_births,
        };
        if let Some(dist) = dist {
            let k = dist.sample(rng) as usize;
            newborn.extend(std::iter::repeat_n(
                Individual {
                    species: ind.species,
                    stage: LifeStage::Juvenile,
                    mass: rates.birth_mass,
                },
                k,
            ));
        }
    }
    state.individuals.extend(newborn);
    state.step += 1;
}

fn poisson(lambda: f64) -> Option<Poisson<f64>> {
    (lambda > 0.0).then(|| Poisson::new(lambda).expect("finite positive rate"))
}

/// Poisson counting-error likelihood of observed `[prey, predators]` counts.
pub fn ibm_observe(state: &IbmState, record: &[f64], params: &IbmParameters) -> Result<f64, ModelError> {
    ibm_log_observe(state, record, params).map(f64::exp)
}

pub fn ibm_log_observe(
    state: &IbmState,
    record: &[f64],
    params: &IbmParameters,
) -> Result<f64, ModelError> {
    let [prey, predators] = record else {
        return Err(ModelError::InvalidRecord(format!(
            "expected [prey, predators], got {} values",
            record.len()
        )));
    };
    let census = state.census(params.rates.detection_mass);
    let mut total = 0.0;
    for (observed, detectable) in [
        (*prey, census.detectable_prey),
        (*predators, census.detectable_predators),
    ] {
        if !(observed >= 0.0 && observed.fract() == 0.0 && observed.is_finite()) {
            return Err(ModelError::InvalidRecord(format!(
                "count {observed} is not a nonnegative integer"
            )));
        }
        total += poisson_log_pmf(observed as u64, detectable as f64 + DETECTION_EPSILON);
    }
    Ok(total)
}

fn poisson_log_pmf(k: u64, mean: f64) -> f64 {
    let ln_factorial: f64 = (2..=k).map(|i| (i as f64).ln()).sum();
    k as f64 * mean.ln() - mean - ln_factorial
}

/// Scale and schedule of an IBM experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IbmSettings {
    pub k_prey: f64,
    pub k_pred: f64,
    pub initial_prey: usize,
    pub initial_predators: usize,
    /// Steps simulated before the first observation.
    pub init_steps: Time,
    pub observations: usize,
    /// Steps between consecutive observations.
    pub interval: Time,
    pub rates: IbmRates,
}

impl Default for IbmSettings {
    fn default() -> Self {
        Self::desk()
    }
}

impl IbmSettings {
    /// Small configuration for quick runs: about 100 prey and 10 predators,
    /// 50 initialization steps, 10 observations.
    pub fn desk() -> Self {
        Self {
            k_prey: 25.0,
            k_pred: 15.0,
            initial_prey: 100,
            initial_predators: 10,
            init_steps: 50,
            observations: 10,
            interval: 5,
            rates: IbmRates::default(),
        }
    }

    /// Full-size configuration: roughly 2000 prey and 30 predators after
    /// 1901 initialization steps, then 20 observations ending at step 2604.
    pub fn full_scale() -> Self {
        Self {
            k_prey: 25.0,
            k_pred: 15.0,
            initial_prey: 2000,
            initial_predators: 30,
            init_steps: 1901,
            observations: 20,
            interval: 37,
            rates: IbmRates {
                prey_area: 92.0,
                predator_area: 2.0,
                ..IbmRates::default()
            },
        }
    }

    /// Observation times: `init_steps + k * interval` for `k = 0..observations`.
    pub fn schedule(&self) -> Vec<Time> {
        (0..self.observations as Time)
            .map(|k| self.init_steps + k * self.interval)
            .collect()
    }

    pub fn parameters(&self) -> IbmParameters {
        IbmParameters {
            k_prey: self.k_prey,
            k_pred: self.k_pred,
            rates: self.rates,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Snapshot {
    params: IbmParameters,
    state: IbmState,
    rng: ChaCha8Rng,
}

/// One IBM realization usable as a particle.
#[derive(Debug, Clone)]
pub struct IbmModel {
    settings: IbmSettings,
    inner: Option<Snapshot>,
}

impl IbmModel {
    pub fn new(settings: IbmSettings) -> Self {
        Self {
            settings,
            inner: None,
        }
    }

    pub fn state(&self) -> Option<&IbmState> {
        self.inner.as_ref().map(|s| &s.state)
    }

    pub fn census(&self) -> Option<Census> {
        self.inner
            .as_ref()
            .map(|s| s.state.census(s.params.rates.detection_mass))
    }

    fn snapshot(&self) -> Result<&Snapshot, ModelError> {
        self.inner.as_ref().ok_or(ModelError::Uninitialized)
    }
}

impl Model for IbmModel {
    fn init(&mut self, params: &Parameters, seed: u64) -> Result<(), ModelError> {
        let params = self.settings.parameters().with_overrides(params)?;
        let state = IbmState::initial(
            self.settings.initial_prey,
            self.settings.initial_predators,
            &params.rates,
        );
        self.inner = Some(Snapshot {
            params,
            state,
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
        Ok(())
    }

    fn run(&mut self, target: Time) -> Result<(), ModelError> {
        let s = self.inner.as_mut().ok_or(ModelError::Uninitialized)?;
        if target < s.state.step {
            return Err(ModelError::TimeReversal {
                current: s.state.step,
                target,
            });
        }
        while s.state.step < target {
            ibm_step(&mut s.state, &s.params, &mut s.rng);
        }
        Ok(())
    }

    fn observe(&self, record: &[f64]) -> Result<f64, ModelError> {
        let s = self.snapshot()?;
        ibm_observe(&s.state, record, &s.params)
    }

    fn log_observe(&self, record: &[f64]) -> Result<f64, ModelError> {
        let s = self.snapshot()?;
        ibm_log_observe(&s.state, record, &s.params)
    }

    fn save(&self) -> Result<Vec<u8>, ModelError> {
        encode_state(self.snapshot()?)
    }

    fn load(&mut self, state: &[u8]) -> Result<(), ModelError> {
        self.inner = Some(decode_state(state)?);
        Ok(())
    }

    fn reseed(&mut self, seed: u64) {
        if let Some(s) = self.inner.as_mut() {
            s.rng = ChaCha8Rng::seed_from_u64(seed);
        }
    }

    fn time(&self) -> Time {
        self.inner.as_ref().map_or(0, |s| s.state.step)
    }

    fn describe(&self) -> Vec<(String, String)> {
        let Some(c) = self.census() else {
            return Vec::new();
        };
        vec![
            ("step".into(), self.time().to_string()),
            ("prey_juveniles".into(), c.prey_juveniles.to_string()),
            ("prey_adults".into(), c.prey_adults.to_string()),
            ("predator_juveniles".into(), c.predator_juveniles.to_string()),
            ("predator_adults".into(), c.predator_adults.to_string()),
        ]
    }
}

/// Runs one realization at `params` and draws Poisson counts of the
/// detectable individuals at each time of `schedule`.
pub fn ibm_synthesize(
    settings: &IbmSettings,
    params: &Parameters,
    schedule: &[Time],
    seed: u64,
) -> Result<ObservationSeries, ModelError> {
    let mut model = IbmModel::new(settings.clone());
    model.init(params, seed)?;
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    noise.set_stream(1);
    let mut records = Vec::with_capacity(schedule.len());
    for &t in schedule {
        model.run(t)?;
        let census = model.census().ok_or(ModelError::Uninitialized)?;
        let mut record = Vec::with_capacity(2);
        for detectable in [census.detectable_prey, census.detectable_predators] {
            let mean = detectable as f64 + DETECTION_EPSILON;
            let draw: f64 = Poisson::new(mean).expect("positive mean").sample(&mut noise);
            record.push(draw);
        }
        records.push(record);
    }
    ObservationSeries::new(
        schedule.to_vec(),
        vec!["prey".into(), "predators".into()],
        records,
    )
    .map_err(|e| ModelError::InvalidParameter(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct IbmFactory {
    settings: IbmSettings,
}

impl IbmFactory {
    pub const NAME: &'static str = "ibm";

    pub fn new(settings: IbmSettings) -> Result<Self, ModelError> {
        settings.parameters().validate()?;
        if settings.observations == 0 || settings.interval == 0 {
            return Err(ModelError::InvalidParameter(
                "observations and interval must be positive".into(),
            ));
        }
        Ok(Self { settings })
    }

    pub fn settings(&self) -> &IbmSettings {
        &self.settings
    }
}

impl ModelFactory for IbmFactory {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn observation_fields(&self) -> Vec<String> {
        vec!["prey".into(), "predators".into()]
    }

    fn create(&self) -> Box<dyn Model> {
        Box::new(IbmModel::new(self.settings.clone()))
    }

    fn synthesize(&self, params: &Parameters, seed: u64) -> Result<ObservationSeries, ModelError> {
        ibm_synthesize(&self.settings, params, &self.settings.schedule(), seed)
    }
}
