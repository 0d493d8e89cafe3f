//! Experiment configuration: a flat `key = value` file with dotted keys.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::letkf::{DaConfig, RelaxationRegistry, RelaxationSpec};
use crate::models::{ErrorTable, ModelRegistry};
use crate::obs::Variable;
use crate::thinning::ThinningConfig;

use super::CycleError;

/// How the initial ensemble is drawn.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialSpec {
    /// Truth plus Gaussian noise of `magnitude` times the model's anomaly
    /// scale.
    Perturbed { magnitude: f64 },
    /// Member `i` is the nature state `(i + 1) * stride` cycles before the
    /// start.
    Lagged { stride: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Ring { stride: usize, offset: usize },
    Uniform { count: usize },
    Clustered { count: usize, clusters: usize, radius_deg: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub network: Network,
    pub variables: Vec<Variable>,
    pub errors: ErrorTable,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObsSource {
    None,
    File(PathBuf),
    Synth(SynthSpec),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub dir: Option<PathBuf>,
    /// Analysis-mean snapshots every N cycles; 0 disables.
    pub snapshot_every: usize,
    /// Restart checkpoints every N cycles; 0 disables.
    pub checkpoint_every: usize,
    /// Analysis ensembles kept for lead-time experiments every N cycles.
    pub archive_every: usize,
    pub raster: bool,
    pub innovations: bool,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: None,
            snapshot_every: 0,
            checkpoint_every: 0,
            archive_every: 0,
            raster: true,
            innovations: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub model: String,
    pub model_params: BTreeMap<String, String>,
    pub da: DaConfig,
    pub thinning: Option<ThinningConfig>,
    pub obs: ObsSource,
    /// Observations are virtual temperature and must be converted.
    pub t_is_virtual: bool,
    /// Relative humidity error (percent) used to derive missing humidity
    /// errors.
    pub rh_error: Option<f64>,
    pub initial: InitialSpec,
    pub seed: u64,
    /// Cycles the nature run is integrated before the experiment starts.
    pub nature_spinup: usize,
    /// Optional file holding the nature run's starting state.
    pub nature_initial: Option<PathBuf>,
    pub n_cycles: usize,
    /// Cycles excluded from time means; `None` takes the first 1/24.
    pub spinup_cycles: Option<usize>,
    pub cycle_seconds: i64,
    pub start_time: i64,
    pub output: OutputSpec,
    pub metrics: bool,
    pub spread_vs_truth: bool,
    pub resume: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: "lorenz96".into(),
            model_params: BTreeMap::new(),
            da: DaConfig::default(),
            thinning: None,
            obs: ObsSource::None,
            t_is_virtual: false,
            rh_error: None,
            initial: InitialSpec::Perturbed { magnitude: 1.0 },
            seed: 1,
            nature_spinup: 500,
            nature_initial: None,
            n_cycles: 100,
            spinup_cycles: None,
            cycle_seconds: 21600,
            start_time: 0,
            output: OutputSpec::default(),
            metrics: true,
            spread_vs_truth: false,
            resume: false,
        }
    }
}

impl ExperimentConfig {
    pub fn spinup(&self) -> usize {
        self.spinup_cycles.unwrap_or(self.n_cycles / 24)
    }

    pub fn validate(&self) -> Result<(), CycleError> {
        if self.n_cycles == 0 {
            return Err(CycleError::Config("cycles must be at least 1".into()));
        }
        if self.spinup() >= self.n_cycles {
            return Err(CycleError::Config(format!(
                "spin-up {} must be shorter than the {} cycles",
                self.spinup(),
                self.n_cycles
            )));
        }
        if self.cycle_seconds <= 0 {
            return Err(CycleError::Config("cycle_seconds must be positive".into()));
        }
        let invalid = |e: &dyn std::error::Error| CycleError::Config(e.to_string());
        self.da.validate().map_err(|e| invalid(&e))?;
        if let Some(t) = &self.thinning {
            t.validate().map_err(|e| invalid(&e))?;
        }
        if let InitialSpec::Perturbed { magnitude } = self.initial {
            if !(magnitude >= 0.0) {
                return Err(CycleError::Config("ensemble.perturbation must be non-negative".into()));
            }
        }
        if let InitialSpec::Lagged { stride: 0 } = self.initial {
            return Err(CycleError::Config("ensemble.stride must be positive".into()));
        }
        if let Some(r) = self.rh_error {
            if !(r >= 0.0) {
                return Err(CycleError::Config("obs.rh_error must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Parse the text of a config file. Relative paths are resolved against
    /// `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CycleError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CycleError::Config(format!("line {}: expected key = value", i + 1)))?;
            let key = k.trim().to_string();
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(CycleError::Config(format!("line {}: duplicate key {key}", i + 1)));
            }
        }
        Self::from_entries(entries, base)
    }

    pub fn load(path: &Path) -> Result<Self, CycleError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn from_entries(entries: BTreeMap<String, String>, base: &Path) -> Result<Self, CycleError> {
        let mut e = Entries { map: entries };
        let d = Self::default();
        let model = e.take("model").unwrap_or(d.model.clone());
        let allowed = ModelRegistry::keys(&model).ok_or_else(|| CycleError::Config(format!("unknown model `{model}`")))?;
        let model_params: BTreeMap<String, String> = e
            .map
            .keys()
            .filter_map(|k| k.strip_prefix("model.").map(str::to_string))
            .collect::<Vec<_>>()
            .into_iter()
            .map(|k| {
                if !allowed.contains(&k.as_str()) {
                    return Err(CycleError::Config(format!("unknown key model.{k} for model {model}")));
                }
                let v = e.take(&format!("model.{k}")).expect("key listed");
                Ok((k, v))
            })
            .collect::<Result<_, _>>()?;

        let dd = DaConfig::default();
        let method = e.take("da.relaxation").unwrap_or(dd.relaxation.method.clone());
        if RelaxationRegistry::default_alpha(&method.to_ascii_lowercase()).is_none() {
            return Err(CycleError::Config(format!("unknown relaxation `{method}`")));
        }
        let da = DaConfig {
            ensemble_size: e.parse("ensemble.size", dd.ensemble_size)?,
            rho_h: e.parse("da.rho_h", dd.rho_h)?,
            rho_v: e.parse("da.rho_v", dd.rho_v)?,
            relaxation: RelaxationSpec {
                method: method.to_ascii_lowercase(),
                alpha: e.parse_opt("da.alpha")?,
            },
            gross_error_factor: e.parse("da.gross_error_factor", dd.gross_error_factor)?,
            variable_localization: e.parse("da.variable_localization", dd.variable_localization)?,
        };

        let td = ThinningConfig::default();
        let thinning_on: bool = e.parse("thinning.enabled", false)?;
        let thinning_cfg = ThinningConfig {
            r_h: e.parse("thinning.r_h", td.r_h)?,
            r_v: e.parse("thinning.r_v", td.r_v)?,
            w_max: e.parse("thinning.w_max", td.w_max)?,
            c_thresh: e.parse("thinning.c_thresh", td.c_thresh)?,
            m_thresh: e.parse_opt("thinning.m_thresh")?,
            epsilon: e.parse("thinning.epsilon", td.epsilon)?,
            global_saturation_exit: e.parse("thinning.global_exit", td.global_saturation_exit)?,
            use_update_flags: e.parse("thinning.update_flags", td.use_update_flags)?,
        };

        let source = e.take("obs.source").unwrap_or_else(|| "none".into());
        let obs_file = e.take("obs.file");
        let synth = Self::parse_synth(&mut e)?;
        let obs = match source.as_str() {
            "none" => ObsSource::None,
            "file" => ObsSource::File(base.join(
                obs_file.ok_or_else(|| CycleError::Config("obs.source = file needs obs.file".into()))?,
            )),
            "synth" => ObsSource::Synth(synth),
            other => return Err(CycleError::Config(format!("unknown obs.source `{other}`"))),
        };

        let initial = match e.take("ensemble.init").as_deref().unwrap_or("perturbed") {
            "perturbed" => InitialSpec::Perturbed {
                magnitude: e.parse("ensemble.perturbation", 1.0)?,
            },
            "lagged" => InitialSpec::Lagged {
                stride: e.parse("ensemble.stride", 4)?,
            },
            other => return Err(CycleError::Config(format!("unknown ensemble.init `{other}`"))),
        };

        let od = OutputSpec::default();
        let output = OutputSpec {
            dir: e.take("output.dir").map(|p| base.join(p)),
            snapshot_every: e.parse("output.snapshot_every", od.snapshot_every)?,
            checkpoint_every: e.parse("output.checkpoint_every", od.checkpoint_every)?,
            archive_every: e.parse("output.archive_every", od.archive_every)?,
            raster: e.parse("output.raster", od.raster)?,
            innovations: e.parse("output.innovations", od.innovations)?,
        };

        let cfg = Self {
            model,
            model_params,
            da,
            thinning: thinning_on.then_some(thinning_cfg),
            obs,
            t_is_virtual: e.parse("obs.t_is_virtual", d.t_is_virtual)?,
            rh_error: e.parse_opt("obs.rh_error")?,
            initial,
            seed: e.parse("seed", d.seed)?,
            nature_spinup: e.parse("nature.spinup", d.nature_spinup)?,
            nature_initial: e.take("nature.initial").map(|p| base.join(p)),
            n_cycles: e.parse("cycles", d.n_cycles)?,
            spinup_cycles: e.parse_opt("spinup")?,
            cycle_seconds: e.parse("cycle_seconds", d.cycle_seconds)?,
            start_time: e.parse("start_time", d.start_time)?,
            output,
            metrics: e.parse("metrics.enabled", d.metrics)?,
            spread_vs_truth: e.parse("metrics.spread_vs_truth", d.spread_vs_truth)?,
            resume: e.parse("resume", d.resume)?,
        };
        if let Some(k) = e.map.keys().next() {
            return Err(CycleError::Config(format!("unknown key {k}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn parse_synth(e: &mut Entries) -> Result<SynthSpec, CycleError> {
        let network = match e.take("synth.network").as_deref().unwrap_or("ring") {
            "ring" => Network::Ring {
                stride: e.parse("synth.stride", 1)?,
                offset: e.parse("synth.offset", 0)?,
            },
            "uniform" => Network::Uniform {
                count: e.parse("synth.count", 200)?,
            },
            "clustered" => Network::Clustered {
                count: e.parse("synth.count", 400)?,
                clusters: e.parse("synth.clusters", 8)?,
                radius_deg: e.parse("synth.radius_deg", 10.0)?,
            },
            other => return Err(CycleError::Config(format!("unknown synth.network `{other}`"))),
        };
        let variables = match e.take("synth.variables") {
            None => Variable::ALL.to_vec(),
            Some(s) => s
                .split(',')
                .map(|v| v.trim().parse::<Variable>().map_err(|err| CycleError::Config(err.to_string())))
                .collect::<Result<_, _>>()?,
        };
        let mut errors = ErrorTable::default();
        if let Some(all) = e.parse_opt::<f64>("synth.error")? {
            errors = ErrorTable::uniform(all);
        }
        for v in Variable::ALL {
            if let Some(s) = e.parse_opt::<f64>(&format!("synth.error.{v}"))? {
                errors.set(v, s);
            }
        }
        Ok(SynthSpec {
            network,
            variables,
            errors,
            seed: e.parse("synth.seed", 7)?,
        })
    }
}

struct Entries {
    map: BTreeMap<String, String>,
}

impl Entries {
    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn parse<T: FromStr>(&mut self, key: &str, default: T) -> Result<T, CycleError>
    where
        T::Err: fmt::Display,
    {
        Ok(self.parse_opt(key)?.unwrap_or(default))
    }

    fn parse_opt<T: FromStr>(&mut self, key: &str) -> Result<Option<T>, CycleError>
    where
        T::Err: fmt::Display,
    {
        match self.take(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|err| CycleError::Config(format!("{key} = `{v}`: {err}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentConfig, CycleError> {
        ExperimentConfig::parse(text, Path::new("/work"))
    }

    #[test]
    fn full_file() {
        let cfg = parse(
            "# osse\nmodel = lorenz96\nmodel.n = 40\nmodel.forcing = 8\ncycles = 240\n\
             ensemble.size = 20\nda.relaxation = RTPP\nda.alpha = 0.9\nda.variable_localization = true\nobs.source = synth\n\
             synth.network = ring\nsynth.error = 1.0\nthinning.enabled = true\nthinning.m_thresh = 50\n\
             output.dir = out\nresume = false\n",
        )
        .unwrap();
        assert_eq!(cfg.n_cycles, 240);
        assert_eq!(cfg.spinup(), 10);
        assert_eq!(cfg.model_params["n"], "40");
        assert_eq!(cfg.da.relaxation, RelaxationSpec::rtpp(0.9));
        assert!(cfg.da.variable_localization);
        assert_eq!(cfg.thinning.as_ref().unwrap().m_thresh, Some(50));
        assert_eq!(cfg.output.dir.as_deref(), Some(Path::new("/work/out")));
        match cfg.obs {
            ObsSource::Synth(s) => assert_eq!(s.errors.get(Variable::Q), 1.0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn defaults_and_errors() {
        let cfg = parse("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        for bad in [
            "cycle = 3",
            "model.forcng = 8",
            "model = climax",
            "cycles = x",
            "cycles = 10\nspinup = 10",
            "da.relaxation = adaptive",
            "obs.source = file",
            "noequals",
            "cycles = 5\ncycles = 6",
            "da.relaxation = rtpp\nda.alpha = 1.5",
        ] {
            assert!(matches!(parse(bad), Err(CycleError::Config(_))), "{bad}");
        }
    }
}
