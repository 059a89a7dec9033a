//! Named real-valued parameter vectors and the space they live in.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered map from parameter name to value.
///
/// Iteration order is insertion order, which for validated instances is the
/// declaration order of the owning [`ParameterSpace`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Parameters {
    entries: Vec<(String, f64)>,
}

impl Parameters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds from `(name, value)` pairs, rejecting duplicates and non-finite values.
    pub fn from_pairs<I, S>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        let mut out = Self::new();
        for (name, value) in pairs {
            out.insert(name, value)?;
        }
        Ok(out)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: f64) -> Result<()> {
        let name = name.into();
        if !value.is_finite() {
            return Err(Error::InvalidParameters(format!(
                "`{name}` is not finite ({value})"
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::InvalidParameters(format!("duplicate name `{name}`")));
        }
        self.entries.push((name, value));
        Ok(())
    }

    /// Replaces the value of an existing entry.
    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::InvalidParameters(format!(
                "`{name}` is not finite ({value})"
            )));
        }
        match self.entries.iter_mut().find(|(n, _)| n == name) {
            Some(entry) => {
                entry.1 = value;
                Ok(())
            }
            None => Err(Error::InvalidParameters(format!("unknown name `{name}`"))),
        }
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.entries.iter().map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// `name=value` pairs separated by commas; values use the shortest
/// representation that round-trips exactly.
impl fmt::Display for Parameters {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (name, value)) in self.entries.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{name}={value}")?;
        }
        Ok(())
    }
}

impl FromStr for Parameters {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut out = Parameters::new();
        if s.trim().is_empty() {
            return Ok(out);
        }
        for item in s.split(',') {
            let (name, value) = item.split_once('=').ok_or_else(|| {
                Error::InvalidParameters(format!("expected name=value, got `{item}`"))
            })?;
            let value: f64 = value.trim().parse().map_err(|_| {
                Error::InvalidParameters(format!("`{}` is not a number", value.trim()))
            })?;
            out.insert(name.trim(), value)?;
        }
        Ok(out)
    }
}

/// Closed interval bounds; either side may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub const UNBOUNDED: Bounds = Bounds {
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
    };

    pub fn contains(&self, value: f64) -> bool {
        value >= self.lower && value <= self.upper
    }
}

/// The declared parameters of a model and their admissible ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSpace {
    names: Vec<String>,
    bounds: Vec<Bounds>,
}

impl ParameterSpace {
    pub fn new<I, S>(entries: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Bounds)>,
        S: Into<String>,
    {
        let mut names = Vec::new();
        let mut bounds = Vec::new();
        for (name, b) in entries {
            let name = name.into();
            if names.contains(&name) {
                return Err(Error::InvalidParameters(format!("duplicate name `{name}`")));
            }
            if b.lower.is_nan() || b.upper.is_nan() || b.lower >= b.upper {
                return Err(Error::InvalidParameters(format!(
                    "`{name}` has empty bounds [{}, {}]",
                    b.lower, b.upper
                )));
            }
            names.push(name);
            bounds.push(b);
        }
        Ok(Self { names, bounds })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn bounds(&self, name: &str) -> Option<Bounds> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.bounds[i])
    }

    /// Checks that `params` names exactly this space's parameters, in order, within bounds.
    pub fn validate(&self, params: &Parameters) -> Result<()> {
        if params.len() != self.names.len() {
            return Err(Error::InvalidParameters(format!(
                "expected {} parameters, got {}",
                self.names.len(),
                params.len()
            )));
        }
        for ((name, value), (expected, b)) in params.iter().zip(self.names.iter().zip(&self.bounds)) {
            if name != expected {
                return Err(Error::InvalidParameters(format!(
                    "expected `{expected}`, got `{name}`"
                )));
            }
            if !b.contains(value) {
                return Err(Error::InvalidParameters(format!(
                    "`{name}` = {value} outside [{}, {}]",
                    b.lower, b.upper
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_non_finite_and_duplicates() {
        assert!(Parameters::from_pairs([("a", f64::NAN)]).is_err());
        assert!(Parameters::from_pairs([("a", 1.0), ("a", 2.0)]).is_err());
        let mut p = Parameters::from_pairs([("a", 1.0)]).unwrap();
        assert!(p.set("a", f64::INFINITY).is_err());
        assert!(p.set("b", 1.0).is_err());
    }

    #[test]
    fn space_validation() {
        let space = ParameterSpace::new([
            ("k_prey", Bounds { lower: 0.0, upper: 100.0 }),
            ("k_pred", Bounds::UNBOUNDED),
        ])
        .unwrap();
        let ok = Parameters::from_pairs([("k_prey", 25.0), ("k_pred", 15.0)]).unwrap();
        space.validate(&ok).unwrap();
        let out = Parameters::from_pairs([("k_prey", 125.0), ("k_pred", 15.0)]).unwrap();
        assert!(space.validate(&out).is_err());
        let swapped = Parameters::from_pairs([("k_pred", 15.0), ("k_prey", 25.0)]).unwrap();
        assert!(space.validate(&swapped).is_err());
        assert!(ParameterSpace::new([("x", Bounds { lower: 1.0, upper: 1.0 })]).is_err());
    }

    proptest! {
        #[test]
        fn text_roundtrip_is_bit_exact(values in proptest::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 0..6)) {
            let params = Parameters::from_pairs(
                values.iter().enumerate().map(|(i, v)| (format!("p{i}"), *v)),
            ).unwrap();
            let text = params.to_string();
            let back: Parameters = text.parse().unwrap();
            prop_assert_eq!(back.len(), params.len());
            for (a, b) in params.values().zip(back.values()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
