use std::collections::BTreeMap;
use std::sync::Arc;

use serde::de::DeserializeOwned;

use super::{LinearGaussianFactory, LinearGaussianSettings, ModelFactory};
use crate::error::{Error, Result};
use crate::ibm::{IbmFactory, IbmSettings};

pub type ModelBuilder = Box<dyn Fn(&toml::Table) -> Result<Arc<dyn ModelFactory>> + Send + Sync>;

/// Maps model names used in configuration files to factory builders.
pub struct ModelRegistry {
    builders: BTreeMap<String, ModelBuilder>,
}

impl ModelRegistry {
    pub fn empty() -> Self {
        Self {
            builders: BTreeMap::new(),
        }
    }

    /// Registry with the shipped models: `linear-gaussian` and `ibm`.
    pub fn with_builtin() -> Self {
        let mut reg = Self::empty();
        reg.register(LinearGaussianFactory::NAME, |table| {
            let settings: LinearGaussianSettings = settings_from(table)?;
            Ok(Arc::new(LinearGaussianFactory::new(settings)?))
        });
        reg.register(IbmFactory::NAME, |table| {
            let settings: IbmSettings = settings_from(table)?;
            Ok(Arc::new(IbmFactory::new(settings)?))
        });
        reg
    }

    pub fn register<F>(&mut self, name: &str, builder: F)
    where
        F: Fn(&toml::Table) -> Result<Arc<dyn ModelFactory>> + Send + Sync + 'static,
    {
        self.builders.insert(name.to_string(), Box::new(builder));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.builders.keys().map(String::as_str)
    }

    pub fn build(&self, name: &str, settings: &toml::Table) -> Result<Arc<dyn ModelFactory>> {
        let builder = self
            .builders
            .get(name)
            .ok_or_else(|| Error::UnknownModel(name.to_string()))?;
        builder(settings)
    }
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}

fn settings_from<T: DeserializeOwned>(table: &toml::Table) -> Result<T> {
    toml::Value::Table(table.clone())
        .try_into()
        .map_err(|e| Error::Config(format!("model settings: {e}")))
}
