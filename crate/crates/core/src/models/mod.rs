//! Forecast models, nature runs and synthetic observations for observing
//! system simulation experiments.

pub mod lorenz96;
pub mod state_io;
pub mod surrogate;
pub mod synth;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::geo::GridSpec;
use crate::obs::Variable;
use crate::space::StateSpace;

pub use lorenz96::{lorenz96_step, Lorenz96, Lorenz96Config};
pub use state_io::{read_state, write_state, Dtype, StateHeader};
pub use surrogate::{Surrogate, SurrogateConfig};
pub use synth::{synth_obs, ErrorTable, ObsSite};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("state became non-finite at step {step}")]
    NonFinite { step: usize },
    #[error("invalid model setting: {0}")]
    Config(String),
    #[error("unknown model `{0}` (known: lorenz96, surrogate)")]
    UnknownModel(String),
    #[error("state file {path}: {msg}")]
    Format { path: String, msg: String },
    #[error(transparent)]
    Space(#[from] crate::space::SpaceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How a model's state is stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum StateLayout {
    /// Cyclic vector of the given length.
    Ring(usize),
    Grid { grid: GridSpec, variables: Vec<Variable> },
}

pub trait ForecastModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn space(&self) -> &dyn StateSpace;

    fn layout(&self) -> StateLayout;

    /// Model steps per assimilation cycle.
    fn steps_per_cycle(&self) -> usize;

    /// Advance `state` by one model step.
    fn step(&self, state: &mut [f64]);

    fn default_initial_state(&self) -> Vec<f64>;

    /// Typical anomaly magnitude per state element, used to size initial
    /// perturbations.
    fn perturbation_scale(&self) -> Vec<f64>;

    fn climatology(&self) -> Option<&[f64]> {
        None
    }

    /// Advance by whole cycles, failing on the first non-finite step.
    fn advance(&self, state: &mut [f64], cycles: usize) -> Result<(), ModelError> {
        let spc = self.steps_per_cycle();
        for s in 0..cycles * spc {
            self.step(state);
            if state.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite { step: s + 1 });
            }
        }
        Ok(())
    }
}

/// Model parameters from the `model.*` config keys, with every key required
/// to be consumed.
#[derive(Debug)]
pub struct ParamReader {
    values: BTreeMap<String, String>,
    used: BTreeSet<String>,
}

impl ParamReader {
    pub fn new(values: BTreeMap<String, String>) -> Self {
        Self {
            values,
            used: BTreeSet::new(),
        }
    }

    pub fn raw(&mut self, key: &str) -> Option<String> {
        let v = self.values.get(key).cloned();
        if v.is_some() {
            self.used.insert(key.to_string());
        }
        v
    }

    pub fn get<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, ModelError>
    where
        T::Err: fmt::Display,
    {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .trim()
                .parse()
                .map_err(|e| ModelError::Config(format!("model.{key} = `{s}`: {e}"))),
        }
    }

    pub fn finish(self) -> Result<(), ModelError> {
        match self.values.keys().find(|k| !self.used.contains(*k)) {
            Some(k) => Err(ModelError::Config(format!("unknown key model.{k}"))),
            None => Ok(()),
        }
    }
}

struct ModelEntry {
    name: &'static str,
    keys: &'static [&'static str],
    build: fn(&mut ParamReader) -> Result<Box<dyn ForecastModel>, ModelError>,
}

const MODELS: &[ModelEntry] = &[
    ModelEntry {
        name: "lorenz96",
        keys: Lorenz96Config::KEYS,
        build: |p| Ok(Box::new(Lorenz96::new(Lorenz96Config::from_params(p)?)?)),
    },
    ModelEntry {
        name: "surrogate",
        keys: SurrogateConfig::KEYS,
        build: |p| Ok(Box::new(Surrogate::new(SurrogateConfig::from_params(p)?)?)),
    },
];

/// Forecast models selectable by name.
pub struct ModelRegistry;

impl ModelRegistry {
    pub fn names() -> impl Iterator<Item = &'static str> {
        MODELS.iter().map(|m| m.name)
    }

    /// Parameter keys a model accepts.
    pub fn keys(name: &str) -> Option<&'static [&'static str]> {
        MODELS.iter().find(|m| m.name == name).map(|m| m.keys)
    }

    pub fn build(name: &str, params: BTreeMap<String, String>) -> Result<Box<dyn ForecastModel>, ModelError> {
        let entry = MODELS
            .iter()
            .find(|m| m.name == name)
            .ok_or_else(|| ModelError::UnknownModel(name.to_string()))?;
        let mut reader = ParamReader::new(params);
        let model = (entry.build)(&mut reader)?;
        reader.finish()?;
        Ok(model)
    }
}

/// States at every cycle boundary, starting with `initial`.
pub fn nature_run(model: &dyn ForecastModel, initial: &[f64], n_cycles: usize) -> Result<Vec<Vec<f64>>, ModelError> {
    if initial.len() != model.space().state_len() {
        return Err(ModelError::Config(format!(
            "initial state has {} values, model expects {}",
            initial.len(),
            model.space().state_len()
        )));
    }
    let spc = model.steps_per_cycle();
    let mut out = Vec::with_capacity(n_cycles + 1);
    let mut x = initial.to_vec();
    out.push(x.clone());
    for c in 0..n_cycles {
        model
            .advance(&mut x, 1)
            .map_err(|e| match e {
                ModelError::NonFinite { step } => ModelError::NonFinite { step: c * spc + step },
                other => other,
            })?;
        out.push(x.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_builds_and_rejects() {
        assert_eq!(ModelRegistry::names().collect::<Vec<_>>(), ["lorenz96", "surrogate"]);
        let m = ModelRegistry::build("lorenz96", BTreeMap::from([("n".into(), "12".into())])).unwrap();
        assert_eq!(m.space().state_len(), 12);
        assert!(matches!(
            ModelRegistry::build("lorenz96", BTreeMap::from([("nn".into(), "12".into())])),
            Err(ModelError::Config(_))
        ));
        assert!(matches!(
            ModelRegistry::build("climax", BTreeMap::new()),
            Err(ModelError::UnknownModel(_))
        ));
        let s = ModelRegistry::build(
            "surrogate",
            BTreeMap::from([
                ("n_lon".into(), "16".into()),
                ("n_lat".into(), "8".into()),
                ("levels".into(), "850,500".into()),
            ]),
        )
        .unwrap();
        assert_eq!(s.space().state_len(), 4 * 2 * 128 + 128);
    }

    #[test]
    fn nature_run_basics() {
        let m = Lorenz96::new(Lorenz96Config::default()).unwrap();
        let x0 = m.default_initial_state();
        assert_eq!(nature_run(&m, &x0, 0).unwrap(), vec![x0.clone()]);
        let full = nature_run(&m, &x0, 30).unwrap();
        let restart = nature_run(&m, &full[12], 18).unwrap();
        assert_eq!(&full[12..], &restart[..]);
    }

    #[test]
    fn lorenz96_trajectory_is_bounded() {
        let m = Lorenz96::new(Lorenz96Config::default()).unwrap();
        let mut x = m.default_initial_state();
        let mut max = 0.0f64;
        for _ in 0..100_000 {
            m.step(&mut x);
            max = x.iter().fold(max, |a, v| a.max(v.abs()));
        }
        assert!(max < 20.0, "max |x| = {max}");
    }

    #[test]
    fn nature_run_reports_failing_step() {
        let cfg = Lorenz96Config {
            dt: 5.0,
            steps_per_cycle: 3,
            ..Default::default()
        };
        let m = Lorenz96::new(cfg).unwrap();
        let mut x0 = m.default_initial_state();
        x0[0] = 30.0;
        match nature_run(&m, &x0, 50) {
            Err(ModelError::NonFinite { step }) => assert!(step >= 1),
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
