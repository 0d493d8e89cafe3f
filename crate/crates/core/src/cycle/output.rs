//! Files written by an experiment: reports, innovations, snapshots,
//! checkpoints, archives and time-mean rasters.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::EnsembleState;
use crate::models::{read_state, write_state, Dtype, StateLayout};

use super::{CycleError, CycleReport};

pub const REPORT_HEADER: &str =
    "cycle,time,variable,level_hpa,rmse_bg,rmse_an,spread_bg,spread_an,obs_raw,obs_windowed,obs_thinned,obs_rejected";

pub fn report_rows(r: &CycleReport) -> String {
    let mut s = String::new();
    let counts = format!("{},{},{},{}", r.obs_raw, r.obs_windowed, r.obs_thinned, r.obs_rejected);
    if r.fields.is_empty() {
        s.push_str(&format!("{},{},,,,,,,{counts}\n", r.cycle, r.time));
    }
    for f in &r.fields {
        let level = f.level_hpa.map(|p| p.to_string()).unwrap_or_default();
        s.push_str(&format!(
            "{},{},{},{level},{},{},{},{},{counts}\n",
            r.cycle, r.time, f.variable, f.rmse_bg, f.rmse_an, f.spread_bg, f.spread_an
        ));
    }
    s
}

/// Keep the header and the rows of cycles up to `last`, dropping anything a
/// crashed or longer run appended afterwards.
fn truncate_after(path: &Path, last: usize) -> Result<(), CycleError> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let cycle = line.split(',').next().and_then(|c| c.parse::<usize>().ok());
        if cycle.is_none_or(|c| c <= last) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    fs::write(path, kept)?;
    Ok(())
}

/// CSV log, created fresh or continued after a checkpoint.
pub struct CsvLog {
    out: BufWriter<File>,
}

impl CsvLog {
    pub fn open(path: &Path, header: &str, resume_after: Option<usize>) -> Result<Self, CycleError> {
        let file = match resume_after {
            Some(last) if path.exists() => {
                truncate_after(path, last)?;
                OpenOptions::new().append(true).open(path)?
            }
            _ => {
                let mut f = File::create(path)?;
                writeln!(f, "{header}")?;
                f
            }
        };
        Ok(Self {
            out: BufWriter::new(file),
        })
    }

    pub fn writer(&mut self) -> &mut BufWriter<File> {
        &mut self.out
    }

    pub fn flush(&mut self) -> Result<(), CycleError> {
        self.out.flush()?;
        Ok(())
    }
}

/// Running sums for per-element time-mean error and spread.
#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub count: usize,
    pub sq_err_bg: Vec<f64>,
    pub sq_err_an: Vec<f64>,
    pub var_bg: Vec<f64>,
    pub var_an: Vec<f64>,
}

const RASTER_PARTS: [&str; 4] = ["sq_err_bg", "sq_err_an", "var_bg", "var_an"];

impl Raster {
    pub fn new(n: usize) -> Self {
        Self {
            count: 0,
            sq_err_bg: vec![0.0; n],
            sq_err_an: vec![0.0; n],
            var_bg: vec![0.0; n],
            var_an: vec![0.0; n],
        }
    }

    fn accumulate_one(sq_err: &mut [f64], var: &mut [f64], ens: &EnsembleState, truth: &[f64]) {
        let mean = ens.mean();
        let sd = ens.std_dev();
        for i in 0..truth.len() {
            sq_err[i] += (mean[i] - truth[i]).powi(2);
            var[i] += sd[i] * sd[i];
        }
    }

    pub fn accumulate(&mut self, bg: &EnsembleState, an: &EnsembleState, truth: &[f64]) {
        Self::accumulate_one(&mut self.sq_err_bg, &mut self.var_bg, bg, truth);
        Self::accumulate_one(&mut self.sq_err_an, &mut self.var_an, an, truth);
        self.count += 1;
    }

    fn parts(&self) -> [&Vec<f64>; 4] {
        [&self.sq_err_bg, &self.sq_err_an, &self.var_bg, &self.var_an]
    }

    fn parts_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.sq_err_bg, &mut self.sq_err_an, &mut self.var_bg, &mut self.var_an]
    }

    /// Time-mean RMSE and spread per state element, as
    /// `raster_{bg,an}_{rmse,spread}` state files.
    pub fn write(&self, dir: &Path, layout: &StateLayout, time: i64) -> Result<(), CycleError> {
        let n = self.count.max(1) as f64;
        let root = |v: &Vec<f64>| v.iter().map(|s| (s / n).sqrt()).collect::<Vec<_>>();
        for (name, sums) in [
            ("raster_bg_rmse", &self.sq_err_bg),
            ("raster_an_rmse", &self.sq_err_an),
            ("raster_bg_spread", &self.var_bg),
            ("raster_an_spread", &self.var_an),
        ] {
            write_state(&dir.join(name), layout, &root(sums), time, Dtype::Float32)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointMeta {
    cycle: usize,
    time: i64,
    members: usize,
    raster_count: usize,
}

/// Exact restart state after a completed cycle.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub cycle: usize,
    pub time: i64,
    pub ensemble: EnsembleState,
    pub truth: Vec<f64>,
    pub raster: Raster,
}

pub fn member_stem(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("member_{i:03}"))
}

pub fn write_members(dir: &Path, layout: &StateLayout, ens: &EnsembleState, truth: &[f64], time: i64) -> Result<(), CycleError> {
    fs::create_dir_all(dir)?;
    for (i, m) in ens.members().enumerate() {
        write_state(&member_stem(dir, i), layout, m, time, Dtype::Float64)?;
    }
    write_state(&dir.join("truth"), layout, truth, time, Dtype::Float64)?;
    Ok(())
}

pub fn read_members(dir: &Path, layout: &StateLayout, k: usize) -> Result<(EnsembleState, Vec<f64>), CycleError> {
    let members = (0..k)
        .map(|i| read_state(&member_stem(dir, i), layout).map(|(_, v)| v))
        .collect::<Result<Vec<_>, _>>()?;
    let (_, truth) = read_state(&dir.join("truth"), layout)?;
    Ok((EnsembleState::from_members(members)?, truth))
}

impl Checkpoint {
    pub fn write(&self, dir: &Path, layout: &StateLayout) -> Result<(), CycleError> {
        // write into a sibling and swap so a crash never leaves a torn checkpoint
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp)?;
        }
        write_members(&tmp, layout, &self.ensemble, &self.truth, self.time)?;
        for (name, part) in RASTER_PARTS.iter().zip(self.raster.parts()) {
            write_state(&tmp.join(name), layout, part, self.time, Dtype::Float64)?;
        }
        let meta = CheckpointMeta {
            cycle: self.cycle,
            time: self.time,
            members: self.ensemble.size(),
            raster_count: self.raster.count,
        };
        let json = serde_json::to_string_pretty(&meta).map_err(|e| CycleError::Checkpoint(e.to_string()))?;
        fs::write(tmp.join("meta.json"), json + "\n")?;
        if dir.exists() {
            fs::remove_dir_all(dir)?;
        }
        fs::rename(&tmp, dir)?;
        Ok(())
    }

    pub fn read(dir: &Path, layout: &StateLayout) -> Result<Self, CycleError> {
        let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)
            .map_err(|e| CycleError::Checkpoint(e.to_string()))?;
        let (ensemble, truth) = read_members(dir, layout, meta.members)?;
        let mut raster = Raster::new(truth.len());
        raster.count = meta.raster_count;
        for (name, part) in RASTER_PARTS.iter().zip(raster.parts_mut()) {
            *part = read_state(&dir.join(name), layout)?.1;
        }
        Ok(Self {
            cycle: meta.cycle,
            time: meta.time,
            ensemble,
            truth,
            raster,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn truncation_keeps_header_and_earlier_cycles() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        fs::write(&p, "cycle,x\n1,a\n2,b\n3,c\n").unwrap();
        let mut log = CsvLog::open(&p, "cycle,x", Some(2)).unwrap();
        writeln!(log.writer(), "3,d").unwrap();
        log.flush().unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "cycle,x\n1,a\n2,b\n3,d\n");
        CsvLog::open(&p, "cycle,x", None).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "cycle,x\n");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let layout = StateLayout::Ring(3);
        let ens = EnsembleState::from_members(vec![vec![0.1, 0.2, 0.3], vec![1.0 / 3.0, 2.0, -1e-20]]).unwrap();
        let mut raster = Raster::new(3);
        raster.accumulate(&ens, &ens, &[0.0, 1.0, 2.0]);
        let cp = Checkpoint {
            cycle: 7,
            time: 123,
            ensemble: ens,
            truth: vec![0.0, 1.0, 2.0],
            raster,
        };
        let at = dir.path().join("checkpoint");
        cp.write(&at, &layout).unwrap();
        cp.write(&at, &layout).unwrap();
        let back = Checkpoint::read(&at, &layout).unwrap();
        assert_eq!(back.cycle, 7);
        assert_eq!(back.ensemble, cp.ensemble);
        assert_eq!(back.raster, cp.raster);
    }
}
