//! Scalar linear-Gaussian state-space model and its exact marginal likelihood.
//!
//! ```text
//! x_0     ~ Normal(m0, s0^2)
//! x_{t+1} = a x_t + w_t,   w_t ~ Normal(0, q^2)      (once per unit step)
//! y_t     ~ Normal(x_t, r^2)
//! ```
//!
//! Because the marginal likelihood is available in closed form through the
//! Kalman recursion, this model is the reference for checking the particle
//! filter estimator.

use std::f64::consts::PI;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{decode_state, encode_state, Model, ModelError, ModelFactory};
use crate::error::{Error, Result};
use crate::observation::{ObservationSeries, Time};
use crate::params::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianParams {
    pub a: f64,
    pub q: f64,
    pub r: f64,
    pub m0: f64,
    pub s0: f64,
}

impl LinearGaussianParams {
    pub const NAMES: [&'static str; 5] = ["a", "q", "r", "m0", "s0"];

    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [self.a, self.q, self.r, self.m0, self.s0];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::InvalidParameter("non-finite value".into()));
        }
        if self.q <= 0.0 || self.r <= 0.0 {
            return Err(ModelError::InvalidParameter("q and r must be positive".into()));
        }
        if self.s0 < 0.0 {
            return Err(ModelError::InvalidParameter("s0 must be nonnegative".into()));
        }
        Ok(())
    }

    /// Overrides fields named in `params`; unknown names are rejected.
    pub fn with_overrides(mut self, params: &Parameters) -> Result<Self, ModelError> {
        for (name, value) in params.iter() {
            match name {
                "a" => self.a = value,
                "q" => self.q = value,
                "r" => self.r = value,
                "m0" => self.m0 = value,
                "s0" => self.s0 = value,
                other => {
                    return Err(ModelError::InvalidParameter(format!(
                        "linear-gaussian has no parameter `{other}`"
                    )))
                }
            }
        }
        self.validate()?;
        Ok(self)
    }
}

impl Default for LinearGaussianParams {
    fn default() -> Self {
        Self {
            a: 0.9,
            q: 1.0,
            r: 1.0,
            m0: 0.0,
            s0: 1.0,
        }
    }
}

/// Exact `log p(y_1..y_n | a, q, r, m0, s0)` by the Kalman prediction/update
/// recursion. The state starts at time 0; observation times must be ≥ 0.
pub fn kalman_log_marginal(params: &LinearGaussianParams, obs: &ObservationSeries) -> Result<f64> {
    params.validate()?;
    if obs.fields().len() != 1 {
        return Err(Error::InvalidObservations(format!(
            "linear-gaussian expects one field, got {}",
            obs.fields().len()
        )));
    }
    let LinearGaussianParams { a, q, r, m0, s0 } = *params;
    let (mut mean, mut var) = (m0, s0 * s0);
    let mut now: Time = 0;
    let mut total = 0.0;
    for (t, record) in obs.iter() {
        for _ in now..t {
            mean *= a;
            var = a * a * var + q * q;
        }
        now = t;
        let y = record[0];
        let innovation_var = var + r * r;
        let resid = y - mean;
        total += -0.5 * ((2.0 * PI * innovation_var).ln() + resid * resid / innovation_var);
        let gain = var / innovation_var;
        mean += gain * resid;
        var *= 1.0 - gain;
    }
    Ok(total)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct State {
    params: LinearGaussianParams,
    x: f64,
    time: Time,
    rng: ChaCha8Rng,
}

#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    defaults: LinearGaussianParams,
    advance_delay: Duration,
    state: Option<State>,
}

impl LinearGaussianModel {
    pub fn new(defaults: LinearGaussianParams) -> Self {
        Self {
            defaults,
            advance_delay: Duration::ZERO,
            state: None,
        }
    }

    /// Adds an artificial sleep to every `run` call, emulating an expensive model.
    pub fn with_advance_delay(mut self, delay: Duration) -> Self {
        self.advance_delay = delay;
        self
    }

    pub fn state_value(&self) -> Option<f64> {
        self.state.as_ref().map(|s| s.x)
    }

    fn state(&self) -> Result<&State, ModelError> {
        self.state.as_ref().ok_or(ModelError::Uninitialized)
    }
}

impl Model for LinearGaussianModel {
    fn init(&mut self, params: &Parameters, seed: u64) -> Result<(), ModelError> {
        let params = self.defaults.with_overrides(params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z: f64 = rng.sample(StandardNormal);
        self.state = Some(State {
            params,
            x: params.m0 + params.s0 * z,
            time: 0,
            rng,
        });
        Ok(())
    }

    fn run(&mut self, target: Time) -> Result<(), ModelError> {
        let s = self.state.as_mut().ok_or(ModelError::Uninitialized)?;
        if target < s.time {
            return Err(ModelError::TimeReversal {
                current: s.time,
                target,
            });
        }
        while s.time < target {
            let w: f64 = s.rng.sample(StandardNormal);
            s.x = s.params.a * s.x + s.params.q * w;
            s.time += 1;
        }
        if !self.advance_delay.is_zero() {
            std::thread::sleep(self.advance_delay);
        }
        Ok(())
    }

    fn observe(&self, record: &[f64]) -> Result<f64, ModelError> {
        self.log_observe(record).map(f64::exp)
    }

    fn log_observe(&self, record: &[f64]) -> Result<f64, ModelError> {
        let s = self.state()?;
        let [y] = record else {
            return Err(ModelError::InvalidRecord(format!(
                "expected 1 value, got {}",
                record.len()
            )));
        };
        let r = s.params.r;
        let z = (y - s.x) / r;
        Ok(-0.5 * z * z - r.ln() - 0.5 * (2.0 * PI).ln())
    }

    fn save(&self) -> Result<Vec<u8>, ModelError> {
        encode_state(self.state()?)
    }

    fn load(&mut self, state: &[u8]) -> Result<(), ModelError> {
        let s: State = decode_state(state)?;
        self.state = Some(s);
        Ok(())
    }

    fn reseed(&mut self, seed: u64) {
        if let Some(s) = self.state.as_mut() {
            s.rng = ChaCha8Rng::seed_from_u64(seed);
        }
    }

    fn time(&self) -> Time {
        self.state.as_ref().map_or(0, |s| s.time)
    }

    fn describe(&self) -> Vec<(String, String)> {
        match &self.state {
            Some(s) => vec![
                ("x".into(), format!("{:?}", s.x)),
                ("time".into(), s.time.to_string()),
            ],
            None => Vec::new(),
        }
    }
}

/// Configuration-file settings of the linear-Gaussian model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearGaussianSettings {
    pub a: f64,
    pub q: f64,
    pub r: f64,
    pub m0: f64,
    pub s0: f64,
    /// Observation schedule used for synthesis.
    pub times: Vec<Time>,
    /// Artificial sleep per `run` call, in milliseconds.
    pub advance_delay_ms: f64,
}

impl LinearGaussianSettings {
    pub fn params(&self) -> LinearGaussianParams {
        LinearGaussianParams {
            a: self.a,
            q: self.q,
            r: self.r,
            m0: self.m0,
            s0: self.s0,
        }
    }
}

impl Default for LinearGaussianSettings {
    fn default() -> Self {
        let p = LinearGaussianParams::default();
        Self {
            a: p.a,
            q: p.q,
            r: p.r,
            m0: p.m0,
            s0: p.s0,
            times: (1..=10).collect(),
            advance_delay_ms: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LinearGaussianFactory {
    settings: LinearGaussianSettings,
}

impl LinearGaussianFactory {
    pub const NAME: &'static str = "linear-gaussian";

    pub fn new(settings: LinearGaussianSettings) -> Result<Self, ModelError> {
        settings.params().validate()?;
        if !(settings.advance_delay_ms.is_finite() && settings.advance_delay_ms >= 0.0) {
            return Err(ModelError::InvalidParameter("advance_delay_ms must be ≥ 0".into()));
        }
        Ok(Self { settings })
    }

    pub fn settings(&self) -> &LinearGaussianSettings {
        &self.settings
    }
}

impl Default for LinearGaussianFactory {
    fn default() -> Self {
        Self {
            settings: LinearGaussianSettings::default(),
        }
    }
}

impl ModelFactory for LinearGaussianFactory {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn observation_fields(&self) -> Vec<String> {
        vec!["y".into()]
    }

    fn create(&self) -> Box<dyn Model> {
        let delay = Duration::from_secs_f64(self.settings.advance_delay_ms / 1000.0);
        Box::new(LinearGaussianModel::new(self.settings.params()).with_advance_delay(delay))
    }

    fn synthesize(&self, params: &Parameters, seed: u64) -> Result<ObservationSeries, ModelError> {
        let mut model = LinearGaussianModel::new(self.settings.params());
        model.init(params, seed)?;
        let r = model.state()?.params.r;
        // Observation noise gets its own stream so the state path matches a
        // particle initialized with the same seed.
        let mut noise = ChaCha8Rng::seed_from_u64(seed);
        noise.set_stream(1);
        let mut records = Vec::with_capacity(self.settings.times.len());
        for &t in &self.settings.times {
            model.run(t)?;
            let e: f64 = noise.sample(StandardNormal);
            records.push(vec![model.state()?.x + r * e]);
        }
        ObservationSeries::new(self.settings.times.clone(), self.observation_fields(), records)
            .map_err(|e| ModelError::InvalidParameter(e.to_string()))
    }
}
