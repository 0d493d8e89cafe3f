//! Free ensemble forecasts from archived analyses, scored against lead time.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::ensemble::EnsembleState;
use crate::metrics::field_scores;
use crate::models::ForecastModel;

use super::output::read_members;
use super::{forecast_ensemble, CycleError};

/// An analysis ensemble and the truth valid at the same time.
#[derive(Debug, Clone)]
pub struct ForecastStart {
    pub cycle: usize,
    pub ensemble: EnsembleState,
    pub truth: Vec<f64>,
}

/// Scores of one field at one lead time, averaged over initial times.
#[derive(Debug, Clone, PartialEq)]
pub struct LeadTimeRow {
    /// Lead time in cycles.
    pub lead: usize,
    pub variable: String,
    pub level_hpa: Option<f64>,
    pub rmse: f64,
    pub spread: f64,
    pub n_init: usize,
}

fn archive_name(cycle: usize) -> String {
    format!("c{cycle:05}")
}

/// Cycles present under `<dir>/archive`, ascending.
pub fn archived_cycles(dir: &Path) -> Result<Vec<usize>, CycleError> {
    let root = dir.join("archive");
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(root)? {
        let name = entry?.file_name();
        if let Some(c) = name.to_str().and_then(|s| s.strip_prefix('c')).and_then(|s| s.parse().ok()) {
            out.push(c);
        }
    }
    out.sort_unstable();
    Ok(out)
}

fn member_count(dir: &Path) -> Result<usize, CycleError> {
    let mut stems = BTreeSet::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        if let Some(stem) = name.to_str().and_then(|s| s.strip_prefix("member_")) {
            stems.insert(stem.split('.').next().unwrap_or_default().to_string());
        }
    }
    Ok(stems.len())
}

/// Load the archived analyses of `cycles`; every missing entry is listed in
/// the error.
pub fn load_archive(dir: &Path, model: &dyn ForecastModel, cycles: &[usize]) -> Result<Vec<ForecastStart>, CycleError> {
    let root = dir.join("archive");
    let missing: Vec<String> = cycles
        .iter()
        .map(|&c| root.join(archive_name(c)))
        .filter(|p| !p.join("truth.txt").exists() && !p.join("truth.json").exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(CycleError::MissingArchive(missing));
    }
    let layout = model.layout();
    cycles
        .iter()
        .map(|&c| {
            let at = root.join(archive_name(c));
            let k = member_count(&at)?;
            let (ensemble, truth) = read_members(&at, &layout, k)?;
            Ok(ForecastStart {
                cycle: c,
                ensemble,
                truth,
            })
        })
        .collect()
}

/// Forecast every start freely out to `max_lead` cycles and average the
/// ensemble-mean RMSE and the spread over starts, per field and lead.
pub fn run_forecast_experiment(
    model: &dyn ForecastModel,
    starts: &[ForecastStart],
    max_lead: usize,
) -> Result<Vec<LeadTimeRow>, CycleError> {
    if starts.is_empty() {
        return Err(CycleError::Config("lead-time experiment needs at least one initial time".into()));
    }
    let space = model.space();
    let fields = space.fields();
    let mut sums = vec![(0.0, 0.0); (max_lead + 1) * fields.len()];
    for s in starts {
        let mut ens = s.ensemble.clone();
        let mut truth = s.truth.clone();
        for lead in 0..=max_lead {
            if lead > 0 {
                forecast_ensemble(model, &mut ens).map_err(|_| CycleError::Diverged { cycle: s.cycle + lead })?;
                model.advance(&mut truth, 1)?;
            }
            for (f, score) in field_scores(space, &ens, &truth, false)?.into_iter().enumerate() {
                let acc = &mut sums[lead * fields.len() + f];
                acc.0 += score.rmse;
                acc.1 += score.spread;
            }
        }
    }
    let n = starts.len() as f64;
    let mut rows = Vec::with_capacity(sums.len());
    for lead in 0..=max_lead {
        for (f, field) in fields.iter().enumerate() {
            let (r, s) = sums[lead * fields.len() + f];
            rows.push(LeadTimeRow {
                lead,
                variable: field.variable.clone(),
                level_hpa: field.level_hpa,
                rmse: r / n,
                spread: s / n,
                n_init: starts.len(),
            });
        }
    }
    Ok(rows)
}

pub fn write_lead_times(path: &Path, rows: &[LeadTimeRow]) -> Result<(), CycleError> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(out, "lead,variable,level_hpa,rmse,spread,n_init")?;
    for r in rows {
        let level = r.level_hpa.map(|p| p.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{level},{},{},{}", r.lead, r.variable, r.rmse, r.spread, r.n_init)?;
    }
    out.flush()?;
    Ok(())
}
