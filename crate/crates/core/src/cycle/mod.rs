//! The assimilation cycle: forecast, preprocess, thin, quality-control,
//! analyse, relax, verify, repeat.

mod config;
mod forecast;
mod output;
mod preprocess;

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::ensemble::{EnsembleError, EnsembleState};
use crate::letkf::{
    letkf_analysis_with, quality_control, write_innovations, AnalysisDiagnostics, LetkfError, RelaxError,
    INNOVATION_HEADER,
};
use crate::metrics::{field_scores, MetricsError};
use crate::models::synth::{clustered_network, ring_network, uniform_network};
use crate::models::{read_state, synth_obs, write_state, Dtype, ForecastModel, ModelError, ModelRegistry, ObsSite, StateLayout};
use crate::obs::{read_obs_file, select_window, ObsError, Observation};
use crate::space::SpaceError;
use crate::thinning::{thin, ThinningError};
use crate::rng;

pub use config::{ExperimentConfig, InitialSpec, Network, ObsSource, OutputSpec, SynthSpec};
pub use forecast::{archived_cycles, load_archive, run_forecast_experiment, write_lead_times, ForecastStart, LeadTimeRow};
pub use output::{Checkpoint, Raster, REPORT_HEADER};
pub use preprocess::{preprocess, Conversions};

#[derive(Debug, Error)]
pub enum CycleError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Letkf(#[from] LetkfError),
    #[error(transparent)]
    Relax(#[from] RelaxError),
    #[error(transparent)]
    Thinning(#[from] ThinningError),
    #[error(transparent)]
    Obs(#[from] ObsError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("ensemble diverged (non-finite values) in cycle {cycle}")]
    Diverged { cycle: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("analysis archive is missing: {}", .0.join(", "))]
    MissingArchive(Vec<String>),
}

/// Scores of one field in one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldReport {
    pub variable: String,
    pub level_hpa: Option<f64>,
    pub rmse_bg: f64,
    pub rmse_an: f64,
    pub spread_bg: f64,
    pub spread_an: f64,
}

/// Diagnostics of one cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleReport {
    pub cycle: usize,
    pub time: i64,
    /// Empty when metrics are off.
    pub fields: Vec<FieldReport>,
    pub obs_raw: usize,
    pub obs_windowed: usize,
    /// Observations handed to quality control (after conversion and thinning).
    pub obs_thinned: usize,
    pub obs_rejected: usize,
    pub analysis: AnalysisDiagnostics,
    pub zero_spread: usize,
}

impl CycleReport {
    pub fn counters_consistent(&self) -> bool {
        self.obs_thinned <= self.obs_windowed && self.obs_windowed <= self.obs_raw && self.obs_rejected <= self.obs_thinned
    }

    /// Analysis RMSE averaged over fields.
    pub fn mean_rmse_an(&self) -> f64 {
        self.fields.iter().map(|f| f.rmse_an).sum::<f64>() / self.fields.len() as f64
    }

    pub fn mean_spread_an(&self) -> f64 {
        self.fields.iter().map(|f| f.spread_an).sum::<f64>() / self.fields.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct CycleOutcome {
    /// Reports of the cycles run by this call (after the checkpoint when
    /// resuming).
    pub reports: Vec<CycleReport>,
    pub ensemble: EnsembleState,
    pub truth: Vec<f64>,
    pub resumed_from: Option<usize>,
}

/// Nature state at the experiment start and the initial ensemble.
#[derive(Debug, Clone)]
pub struct InitialConditions {
    pub truth: Vec<f64>,
    pub ensemble: EnsembleState,
}

/// Spin up the nature run from `start` and draw `k` members.
///
/// Perturbed members are truth plus `magnitude` times the model's anomaly
/// scale times standard normal noise keyed by `(seed, member)`. Lagged member
/// `m` (1-based) is the nature state `m * stride` cycles before the start.
pub fn make_initial_ensemble(
    model: &dyn ForecastModel,
    spec: &InitialSpec,
    k: usize,
    seed: u64,
    start: &[f64],
    nature_spinup: usize,
) -> Result<InitialConditions, CycleError> {
    let n = model.space().state_len();
    if start.len() != n {
        return Err(CycleError::Config(format!("nature start has {} values, model needs {n}", start.len())));
    }
    if k < 2 {
        return Err(CycleError::Config("ensemble needs at least 2 members".into()));
    }
    let mut lagged: Vec<Option<Vec<f64>>> = vec![None; k];
    if let InitialSpec::Lagged { stride } = *spec {
        if stride == 0 || k * stride > nature_spinup {
            return Err(CycleError::Config(format!(
                "lagged ensemble needs {k} x {stride} cycles of nature run, only {nature_spinup} spun up"
            )));
        }
    }
    let mut x = start.to_vec();
    for c in 0..=nature_spinup {
        if c > 0 {
            model.advance(&mut x, 1)?;
        }
        if let InitialSpec::Lagged { stride } = *spec {
            let lag = nature_spinup - c;
            if lag > 0 && lag % stride == 0 && lag / stride <= k {
                lagged[lag / stride - 1] = Some(x.clone());
            }
        }
    }
    let members: Vec<Vec<f64>> = match *spec {
        InitialSpec::Lagged { .. } => lagged.into_iter().map(|m| m.expect("every lag visited")).collect(),
        InitialSpec::Perturbed { magnitude } => {
            let scale = model.perturbation_scale();
            (0..k)
                .map(|i| {
                    let z = rng::normals(seed, 0, i as u64, n);
                    x.iter().zip(&scale).zip(&z).map(|((t, s), z)| t + magnitude * s * z).collect()
                })
                .collect()
        }
    };
    Ok(InitialConditions {
        truth: x,
        ensemble: EnsembleState::from_members(members)?,
    })
}

/// Advance every member by one cycle in parallel.
pub fn forecast_ensemble(model: &dyn ForecastModel, ens: &mut EnsembleState) -> Result<(), ModelError> {
    let n = ens.state_len();
    ens.as_flat_mut()
        .par_chunks_mut(n)
        .map(|m| model.advance(m, 1))
        .collect::<Result<Vec<()>, _>>()?;
    Ok(())
}

fn build_sites(model: &dyn ForecastModel, spec: &SynthSpec) -> Result<Vec<ObsSite>, CycleError> {
    match (&spec.network, model.layout()) {
        (Network::Ring { stride, offset }, StateLayout::Ring(n)) => Ok(ring_network(n, *stride, *offset)),
        (Network::Uniform { count }, StateLayout::Grid { grid, .. }) => {
            Ok(uniform_network(&grid, &spec.variables, *count, spec.seed))
        }
        (Network::Clustered { count, clusters, radius_deg }, StateLayout::Grid { grid, .. }) => {
            Ok(clustered_network(&grid, &spec.variables, *count, *clusters, *radius_deg, spec.seed))
        }
        (net, _) => Err(CycleError::Config(format!(
            "network {net:?} does not fit model {}",
            model.name()
        ))),
    }
}

/// Where each cycle's observations come from.
enum Feed {
    None,
    File(Vec<Observation>),
    Synth { sites: Vec<ObsSite>, spec: SynthSpec },
}

impl Feed {
    fn new(cfg: &ExperimentConfig, model: &dyn ForecastModel) -> Result<Self, CycleError> {
        Ok(match &cfg.obs {
            ObsSource::None => Feed::None,
            ObsSource::File(path) => {
                if !path.exists() {
                    return Err(CycleError::Io(std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("observation file {} not found", path.display()),
                    )));
                }
                Feed::File(read_obs_file(path)?.collect::<Result<_, _>>()?)
            }
            ObsSource::Synth(spec) => Feed::Synth {
                sites: build_sites(model, spec)?,
                spec: spec.clone(),
            },
        })
    }

    /// Raw count and windowed observations for the cycle ending at `time`.
    fn window(
        &self,
        model: &dyn ForecastModel,
        truth: &[f64],
        cycle: usize,
        time: i64,
    ) -> Result<(usize, Vec<Observation>), CycleError> {
        Ok(match self {
            Feed::None => (0, Vec::new()),
            Feed::File(all) => (all.len(), select_window(all.iter().cloned(), time).observations),
            Feed::Synth { sites, spec } => {
                let batch = synth_obs(model.space(), truth, sites, &spec.errors, spec.seed, cycle as u64, time)?;
                (sites.len(), select_window(batch.observations, time).observations)
            }
        })
    }
}

/// Build the configured model.
pub fn build_model(cfg: &ExperimentConfig) -> Result<Box<dyn ForecastModel>, CycleError> {
    Ok(ModelRegistry::build(&cfg.model, cfg.model_params.clone())?)
}

/// Nature start state: the configured file, else the model default.
pub fn nature_start(cfg: &ExperimentConfig, model: &dyn ForecastModel) -> Result<Vec<f64>, CycleError> {
    match &cfg.nature_initial {
        Some(path) => Ok(read_state(path, &model.layout())?.1),
        None => Ok(model.default_initial_state()),
    }
}

/// Walk the nature run of `cfg`, calling `visit(cycle, time, truth)` for cycle
/// 0 (the end of the spin-up) through `n_cycles`.
pub fn walk_nature<F>(cfg: &ExperimentConfig, model: &dyn ForecastModel, mut visit: F) -> Result<(), CycleError>
where
    F: FnMut(usize, i64, &[f64]) -> Result<(), CycleError>,
{
    let mut x = nature_start(cfg, model)?;
    model.advance(&mut x, cfg.nature_spinup)?;
    for cycle in 0..=cfg.n_cycles {
        if cycle > 0 {
            model.advance(&mut x, 1).map_err(|_| CycleError::Diverged { cycle })?;
        }
        visit(cycle, cfg.start_time + cycle as i64 * cfg.cycle_seconds, &x)?;
    }
    Ok(())
}

/// The synthetic observations a `synth` source would feed each cycle,
/// drawn with the same keys so a file replay reproduces the run.
pub fn synthesize_observations(cfg: &ExperimentConfig, model: &dyn ForecastModel) -> Result<Vec<Observation>, CycleError> {
    let ObsSource::Synth(spec) = &cfg.obs else {
        return Err(CycleError::Config("obs.source must be synth".into()));
    };
    let sites = build_sites(model, spec)?;
    let mut out = Vec::new();
    walk_nature(cfg, model, |cycle, time, truth| {
        if cycle > 0 {
            let batch = synth_obs(model.space(), truth, &sites, &spec.errors, spec.seed, cycle as u64, time)?;
            out.extend(batch.observations);
        }
        Ok(())
    })?;
    Ok(out)
}

/// Run the experiment described by `cfg` with a model from the registry.
pub fn run_cycle_experiment(cfg: &ExperimentConfig) -> Result<CycleOutcome, CycleError> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let start = nature_start(cfg, model.as_ref())?;
    let init = make_initial_ensemble(
        model.as_ref(),
        &cfg.initial,
        cfg.da.ensemble_size,
        cfg.seed,
        &start,
        cfg.nature_spinup,
    )?;
    run_cycles(cfg, model.as_ref(), init)
}

/// Run the cycle loop from given initial conditions.
pub fn run_cycles(
    cfg: &ExperimentConfig,
    model: &dyn ForecastModel,
    init: InitialConditions,
) -> Result<CycleOutcome, CycleError> {
    cfg.validate()?;
    let space = model.space();
    let layout = model.layout();
    let relaxation = cfg.da.relaxation.build()?;
    let feed = Feed::new(cfg, model)?;
    let split = if cfg.da.variable_localization {
        space.split_by_variable()
    } else {
        None
    };
    let da_space = split.as_deref().unwrap_or(space);
    let conv = Conversions {
        t_is_virtual: cfg.t_is_virtual,
        rh_error: cfg.rh_error,
    };
    if init.ensemble.size() != cfg.da.ensemble_size || init.ensemble.state_len() != space.state_len() {
        return Err(CycleError::Config("initial ensemble does not match the configuration".into()));
    }

    let out_dir = cfg.output.dir.as_deref();
    let checkpoint_dir = out_dir.map(|d| d.join("checkpoint"));
    let mut first = 1;
    let mut ens = init.ensemble;
    let mut truth = init.truth;
    let mut raster = Raster::new(space.state_len());
    let mut resumed_from = None;
    if cfg.resume {
        let dir = checkpoint_dir
            .as_ref()
            .ok_or_else(|| CycleError::Config("resume needs output.dir".into()))?;
        if dir.join("meta.json").exists() {
            let cp = Checkpoint::read(dir, &layout)?;
            if cp.ensemble.size() != cfg.da.ensemble_size {
                return Err(CycleError::Checkpoint("ensemble size differs from the configuration".into()));
            }
            first = cp.cycle + 1;
            ens = cp.ensemble;
            truth = cp.truth;
            raster = cp.raster;
            resumed_from = Some(cp.cycle);
        }
    }

    let mut logs = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let reports = output::CsvLog::open(&dir.join("reports.csv"), REPORT_HEADER, resumed_from)?;
            let innovations = if cfg.output.innovations {
                Some(output::CsvLog::open(&dir.join("innovations.csv"), INNOVATION_HEADER, resumed_from)?)
            } else {
                None
            };
            Some((reports, innovations))
        }
        None => None,
    };

    let spinup = cfg.spinup();
    let mut reports = Vec::new();
    for cycle in first..=cfg.n_cycles {
        let time = cfg.start_time + cycle as i64 * cfg.cycle_seconds;
        let diverged = |_| CycleError::Diverged { cycle };

        let mut bg = ens;
        forecast_ensemble(model, &mut bg).map_err(diverged)?;
        model.advance(&mut truth, 1).map_err(diverged)?;

        let (obs_raw, windowed) = feed.window(model, &truth, cycle, time)?;
        let obs_windowed = windowed.len();
        let bg_mean = bg.mean();
        let (converted, _) = preprocess(windowed, space, &bg_mean, conv);
        let assimilated = match &cfg.thinning {
            Some(tc) if !converted.is_empty() => {
                let batch = crate::obs::ObsBatch {
                    observations: converted,
                    window_center: time,
                    window_half_width: crate::obs::WINDOW_HALF_WIDTH_S,
                };
                thin(&batch, space.metric_grid(), tc)?.selected.observations
            }
            _ => converted,
        };
        let qc = quality_control(&bg, space, &assimilated, cfg.da.gross_error_factor)?;
        let analysis = letkf_analysis_with(&bg, da_space, &qc.accepted, &qc.obs_ensemble, &cfg.da)?;
        let mut an = analysis.ensemble;
        let relax = relaxation.apply(&mut an, &bg)?;
        if !an.is_finite() {
            return Err(CycleError::Diverged { cycle });
        }

        let fields = if cfg.metrics {
            let sb = field_scores(space, &bg, &truth, cfg.spread_vs_truth)?;
            let sa = field_scores(space, &an, &truth, cfg.spread_vs_truth)?;
            sb.into_iter()
                .zip(sa)
                .map(|(b, a)| FieldReport {
                    variable: b.variable,
                    level_hpa: b.level_hpa,
                    rmse_bg: b.rmse,
                    rmse_an: a.rmse,
                    spread_bg: b.spread,
                    spread_an: a.spread,
                })
                .collect()
        } else {
            Vec::new()
        };
        if cfg.output.raster && cycle > spinup {
            raster.accumulate(&bg, &an, &truth);
        }
        let report = CycleReport {
            cycle,
            time,
            fields,
            obs_raw,
            obs_windowed,
            obs_thinned: assimilated.len(),
            obs_rejected: qc.rejected(),
            analysis: analysis.diagnostics,
            zero_spread: relax.zero_spread,
        };

        if let Some((rep, inn)) = logs.as_mut() {
            let dir = out_dir.expect("logs imply a directory");
            rep.writer().write_all(output::report_rows(&report).as_bytes())?;
            rep.flush()?;
            if let Some(inn) = inn {
                write_innovations(inn.writer(), cycle, &assimilated, &qc.records)?;
                inn.flush()?;
            }
            let every = |n: usize| n > 0 && cycle % n == 0;
            if every(cfg.output.snapshot_every) {
                let snaps = dir.join("snapshots");
                fs::create_dir_all(&snaps)?;
                write_state(&snaps.join(format!("mean_c{cycle:05}")), &layout, &an.mean(), time, Dtype::Float32)?;
            }
            if every(cfg.output.archive_every) {
                output::write_members(&dir.join("archive").join(format!("c{cycle:05}")), &layout, &an, &truth, time)?;
            }
            if every(cfg.output.checkpoint_every) || cycle == cfg.n_cycles && cfg.output.checkpoint_every > 0 {
                Checkpoint {
                    cycle,
                    time,
                    ensemble: an.clone(),
                    truth: truth.clone(),
                    raster: raster.clone(),
                }
                .write(checkpoint_dir.as_ref().expect("output dir set"), &layout)?;
            }
        }
        reports.push(report);
        ens = an;
    }

    if let Some(dir) = out_dir {
        if cfg.output.raster && raster.count > 0 {
            raster.write(dir, &layout, cfg.start_time + cfg.n_cycles as i64 * cfg.cycle_seconds)?;
        }
    }
    Ok(CycleOutcome {
        reports,
        ensemble: ens,
        truth,
        resumed_from,
    })
}

/// Read `reports.csv` rows back as `(cycle, variable, level, values...)`
/// text, for comparisons across runs.
pub fn read_reports(path: &Path) -> Result<Vec<String>, CycleError> {
    Ok(fs::read_to_string(path)?.lines().skip(1).map(str::to_string).collect())
}
