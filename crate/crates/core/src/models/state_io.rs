//! State files.
//!
//! Gridded states are a JSON header `<stem>.json` next to a raw little-endian
//! raster `<stem>.bin` in `[variable][level][lat][lon]` order. Ring states are
//! text, `<stem>.txt`, one value per line.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::geo::GridSpec;
use crate::obs::Variable;

use super::{ModelError, StateLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    Float32,
    /// Exact restart checkpoints.
    Float64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub n_lon: usize,
    pub n_lat: usize,
    pub n_levels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateHeader {
    pub dims: Dims,
    pub variables: Vec<String>,
    pub levels_hpa: Vec<f64>,
    pub time: i64,
    #[serde(default)]
    pub dtype: Dtype,
}

impl StateHeader {
    /// Regular grid and variable list described by the header.
    pub fn layout(&self) -> Result<StateLayout, String> {
        let grid = GridSpec::regular(self.dims.n_lon, self.dims.n_lat, self.levels_hpa.clone())
            .map_err(|e| e.to_string())?;
        let variables = self
            .variables
            .iter()
            .map(|v| v.parse::<Variable>().map_err(|e| e.to_string()))
            .collect::<Result<_, _>>()?;
        Ok(StateLayout::Grid { grid, variables })
    }
}

pub fn with_suffix(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn expected_len(layout: &StateLayout) -> usize {
    match layout {
        StateLayout::Ring(n) => *n,
        StateLayout::Grid { grid, variables } => variables
            .iter()
            .map(|v| if v.is_surface() { 1 } else { grid.n_levels() })
            .sum::<usize>()
            * grid.n_columns(),
    }
}

fn format_err(path: &Path, msg: impl Into<String>) -> ModelError {
    ModelError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Write a state under `stem`; ring states ignore `time` and `dtype`.
pub fn write_state(stem: &Path, layout: &StateLayout, state: &[f64], time: i64, dtype: Dtype) -> Result<(), ModelError> {
    if state.len() != expected_len(layout) {
        return Err(format_err(
            stem,
            format!("state has {} values, layout needs {}", state.len(), expected_len(layout)),
        ));
    }
    match layout {
        StateLayout::Ring(_) => {
            let mut w = BufWriter::new(fs::File::create(with_suffix(stem, "txt"))?);
            for v in state {
                writeln!(w, "{v:?}")?;
            }
            w.flush()?;
        }
        StateLayout::Grid { grid, variables } => {
            let header = StateHeader {
                dims: Dims {
                    n_lon: grid.n_lon(),
                    n_lat: grid.n_lat(),
                    n_levels: grid.n_levels(),
                },
                variables: variables.iter().map(|v| v.code().to_string()).collect(),
                levels_hpa: grid.levels_hpa().to_vec(),
                time,
                dtype,
            };
            let json = serde_json::to_string_pretty(&header).map_err(|e| format_err(stem, e.to_string()))?;
            fs::write(with_suffix(stem, "json"), json + "\n")?;
            let mut bytes = Vec::with_capacity(state.len() * 8);
            for v in state {
                match dtype {
                    Dtype::Float32 => bytes.extend_from_slice(&(*v as f32).to_le_bytes()),
                    Dtype::Float64 => bytes.extend_from_slice(&v.to_le_bytes()),
                }
            }
            fs::write(with_suffix(stem, "bin"), bytes)?;
        }
    }
    Ok(())
}

/// State stored under `stem`, in whichever format is present.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedState {
    pub layout: StateLayout,
    pub time: Option<i64>,
    pub values: Vec<f64>,
}

pub fn load_state(stem: &Path) -> Result<LoadedState, ModelError> {
    let txt = with_suffix(stem, "txt");
    if txt.exists() {
        let mut values = Vec::new();
        for (i, line) in BufReader::new(fs::File::open(&txt)?).lines().enumerate() {
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            values.push(
                t.parse::<f64>()
                    .map_err(|e| format_err(&txt, format!("line {}: {e}", i + 1)))?,
            );
        }
        return Ok(LoadedState {
            layout: StateLayout::Ring(values.len()),
            time: None,
            values,
        });
    }
    let json_path = with_suffix(stem, "json");
    let header: StateHeader = serde_json::from_str(&fs::read_to_string(&json_path)?)
        .map_err(|e| format_err(&json_path, e.to_string()))?;
    let layout = header.layout().map_err(|e| format_err(&json_path, e))?;
    let bin = with_suffix(stem, "bin");
    let bytes = fs::read(&bin)?;
    let n = expected_len(&layout);
    let width = match header.dtype {
        Dtype::Float32 => 4,
        Dtype::Float64 => 8,
    };
    if bytes.len() != n * width {
        return Err(format_err(
            &bin,
            format!("raster has {} bytes, header implies {}", bytes.len(), n * width),
        ));
    }
    let values = match header.dtype {
        Dtype::Float32 => bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::Float64 => bytes
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect(),
    };
    Ok(LoadedState {
        layout,
        time: Some(header.time),
        values,
    })
}

/// Read a state and check it matches `layout`.
pub fn read_state(stem: &Path, layout: &StateLayout) -> Result<(Option<i64>, Vec<f64>), ModelError> {
    let loaded = load_state(stem)?;
    let compatible = match (&loaded.layout, layout) {
        (StateLayout::Ring(a), StateLayout::Ring(b)) => a == b,
        (
            StateLayout::Grid { grid: g1, variables: v1 },
            StateLayout::Grid { grid: g2, variables: v2 },
        ) => {
            v1 == v2 && g1.n_lon() == g2.n_lon() && g1.n_lat() == g2.n_lat() && g1.levels_hpa() == g2.levels_hpa()
        }
        _ => false,
    };
    if !compatible {
        return Err(format_err(stem, "state does not match the model layout"));
    }
    Ok((loaded.time, loaded.values))
}
