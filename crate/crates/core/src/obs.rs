//! Observation data model, exchange format, unit conversions and
//! assimilation-window selection.

use std::cmp::Ordering;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::geo::{GeoError, GeoPoint};

/// Ratio of the molecular weight of water vapour to that of dry air.
pub const EPSILON_MOLECULAR: f64 = 0.622;

/// Half width of the assimilation window in seconds (30 minutes).
pub const WINDOW_HALF_WIDTH_S: i64 = 1800;

#[derive(Debug, Error)]
pub enum ObsError {
    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("unknown variable code {0:?}")]
    UnknownVariable(String),
    #[error("specific humidity must lie in [0, 1), got {0}")]
    BadHumidity(f64),
    #[error("temperature must be positive, got {0} K")]
    BadTemperature(f64),
    #[error("temperature {0} degC is at or below the pole of the Buck equation")]
    BuckPole(f64),
    #[error("relative humidity error must be non-negative, got {0}%")]
    BadRhError(f64),
    #[error("vapour pressure interval reaches the total pressure (denominator {0} <= 0)")]
    Unphysical(f64),
    #[error("invalid observation: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Assimilated variable kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variable {
    /// Zonal wind (m/s).
    U,
    /// Meridional wind (m/s).
    V,
    /// Temperature (K).
    T,
    /// Specific humidity (kg/kg).
    Q,
    /// Surface pressure (hPa).
    PS,
}

impl Variable {
    pub const ALL: [Variable; 5] = [Variable::U, Variable::V, Variable::T, Variable::Q, Variable::PS];

    pub fn code(self) -> &'static str {
        match self {
            Variable::U => "U",
            Variable::V => "V",
            Variable::T => "T",
            Variable::Q => "Q",
            Variable::PS => "PS",
        }
    }

    pub fn is_surface(self) -> bool {
        self == Variable::PS
    }

    /// Error standard deviation assigned when an observation reports none.
    pub fn default_error(self) -> f64 {
        match self {
            Variable::U | Variable::V => 1.0,
            Variable::T => 1.0,
            Variable::Q => 0.01,
            Variable::PS => 1.0,
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Variable {
    type Err = ObsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "U" => Ok(Variable::U),
            "V" => Ok(Variable::V),
            "T" => Ok(Variable::T),
            "Q" => Ok(Variable::Q),
            "PS" => Ok(Variable::PS),
            other => Err(ObsError::UnknownVariable(other.to_string())),
        }
    }
}

/// A single measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    /// Seconds since the epoch.
    pub time: i64,
    /// Horizontal position; `pressure_hpa` is the reported level.
    pub position: GeoPoint,
    pub variable: Variable,
    pub value: f64,
    pub error_std: Option<f64>,
    pub qmk: Option<u8>,
    /// Filled by thinning for selected observations.
    pub selection_weight: Option<f64>,
}

impl Observation {
    pub fn new(time: i64, position: GeoPoint, variable: Variable, value: f64) -> Self {
        Self {
            time,
            position,
            variable,
            value,
            error_std: None,
            qmk: None,
            selection_weight: None,
        }
    }

    pub fn with_error(mut self, error_std: f64) -> Self {
        self.error_std = Some(error_std);
        self
    }

    pub fn with_qmk(mut self, qmk: u8) -> Self {
        self.qmk = Some(qmk);
        self
    }

    /// Pressure used as vertical coordinate for distances. Surface pressure
    /// observations sit at their own reported pressure.
    pub fn vertical_hpa(&self) -> f64 {
        match self.variable {
            Variable::PS => self.value,
            _ => self.position.pressure_hpa.unwrap_or(f64::NAN),
        }
    }

    /// Error standard deviation; panics if preprocessing has not assigned one.
    pub fn sigma(&self) -> f64 {
        self.error_std.expect("observation error assigned during preprocessing")
    }

    pub fn validate(&self) -> Result<(), ObsError> {
        self.position.validate()?;
        if self.variable != Variable::PS && self.position.pressure_hpa.is_none() {
            return Err(ObsError::Invalid("upper-air observation without a level".into()));
        }
        if !self.value.is_finite() {
            return Err(ObsError::Invalid(format!("non-finite value {}", self.value)));
        }
        if self.variable == Variable::PS && !(self.value > 0.0) {
            return Err(ObsError::Invalid(format!("surface pressure {} must be positive", self.value)));
        }
        if let Some(e) = self.error_std {
            if !(e > 0.0 && e.is_finite()) {
                return Err(ObsError::Invalid(format!("error std {e} must be positive")));
            }
        }
        if let Some(q) = self.qmk {
            if q > 15 {
                return Err(ObsError::Invalid(format!("quality marker {q} outside [0, 15]")));
            }
        }
        Ok(())
    }

    /// Total order used to canonicalize observation lists.
    fn canonical_cmp(&self, other: &Self) -> Ordering {
        self.time
            .cmp(&other.time)
            .then(self.variable.cmp(&other.variable))
            .then(self.position.lat_deg.total_cmp(&other.position.lat_deg))
            .then(self.position.lon_deg.total_cmp(&other.position.lon_deg))
            .then(
                self.position
                    .pressure_hpa
                    .unwrap_or(0.0)
                    .total_cmp(&other.position.pressure_hpa.unwrap_or(0.0)),
            )
            .then(self.value.total_cmp(&other.value))
            .then(
                self.error_std
                    .unwrap_or(-1.0)
                    .total_cmp(&other.error_std.unwrap_or(-1.0)),
            )
            .then(self.qmk.cmp(&other.qmk))
    }
}

/// Observations valid for one analysis time.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsBatch {
    pub observations: Vec<Observation>,
    pub window_center: i64,
    pub window_half_width: i64,
}

impl ObsBatch {
    pub fn empty(window_center: i64) -> Self {
        Self {
            observations: Vec::new(),
            window_center,
            window_half_width: WINDOW_HALF_WIDTH_S,
        }
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Observations within 30 minutes of `center`, boundaries inclusive.
///
/// The result is sorted canonically so it does not depend on input order.
pub fn select_window(all_obs: impl IntoIterator<Item = Observation>, center: i64) -> ObsBatch {
    let mut observations: Vec<Observation> = all_obs
        .into_iter()
        .filter(|o| (o.time - center).abs() <= WINDOW_HALF_WIDTH_S)
        .collect();
    observations.sort_by(Observation::canonical_cmp);
    ObsBatch {
        observations,
        window_center: center,
        window_half_width: WINDOW_HALF_WIDTH_S,
    }
}

/// Fill a missing error standard deviation with the per-variable default.
pub fn assign_default_error(mut obs: Observation) -> Observation {
    if obs.error_std.is_none() {
        obs.error_std = Some(obs.variable.default_error());
    }
    obs
}

fn check_humidity(q: f64) -> Result<(), ObsError> {
    if (0.0..1.0).contains(&q) {
        Ok(())
    } else {
        Err(ObsError::BadHumidity(q))
    }
}

/// Real temperature from virtual temperature and specific humidity.
pub fn virtual_to_real_temperature(t_v: f64, q: f64) -> Result<f64, ObsError> {
    if !(t_v > 0.0) {
        return Err(ObsError::BadTemperature(t_v));
    }
    check_humidity(q)?;
    Ok(t_v / (1.0 + (1.0 / EPSILON_MOLECULAR - 1.0) * q))
}

/// Virtual temperature from real temperature; inverse of
/// [`virtual_to_real_temperature`].
pub fn real_to_virtual_temperature(t: f64, q: f64) -> Result<f64, ObsError> {
    if !(t > 0.0) {
        return Err(ObsError::BadTemperature(t));
    }
    check_humidity(q)?;
    Ok(t * (1.0 + (1.0 / EPSILON_MOLECULAR - 1.0) * q))
}

/// Saturation vapour pressure (hPa) over water, Buck equation.
pub fn saturation_vapor_pressure(t_c: f64) -> Result<f64, ObsError> {
    if t_c <= -257.14 || !t_c.is_finite() {
        return Err(ObsError::BuckPole(t_c));
    }
    Ok(6.1121 * ((18.678 - t_c / 234.5) * (t_c / (257.14 + t_c))).exp())
}

/// Specific humidity error (kg/kg) equivalent to a relative humidity error
/// given in percent, at pressure `p` (hPa), temperature `t_c` (degC) and
/// specific humidity `q`.
///
/// The vapour pressure is perturbed by `+-` the RH error times the saturation
/// pressure and the half-width of the resulting humidity interval returned.
pub fn rh_error_to_q_error(p: f64, t_c: f64, q: f64, rh_err: f64) -> Result<f64, ObsError> {
    if !(p > 0.0) {
        return Err(GeoError::NonPositivePressure(p).into());
    }
    check_humidity(q)?;
    if !(rh_err >= 0.0) {
        return Err(ObsError::BadRhError(rh_err));
    }
    let eps = EPSILON_MOLECULAR;
    let vapour = p * q / (eps + (1.0 - eps) * q);
    let vapour_err = saturation_vapor_pressure(t_c)? * rh_err / 100.0;
    let humidity = |pw: f64| -> Result<f64, ObsError> {
        let denom = p - (1.0 - eps) * pw;
        if denom <= 0.0 {
            return Err(ObsError::Unphysical(denom));
        }
        Ok(eps * pw / denom)
    };
    let q_plus = humidity(vapour + vapour_err)?;
    let q_minus = humidity(vapour - vapour_err)?;
    Ok((q_plus - q_minus) / 2.0)
}

// ---------------------------------------------------------------------------
// exchange format

fn malformed(line: usize, msg: impl Into<String>) -> ObsError {
    ObsError::Malformed { line, msg: msg.into() }
}

/// Parse one record of the comma-separated exchange format.
pub fn parse_record(text: &str, line: usize) -> Result<Observation, ObsError> {
    let fields: Vec<&str> = text.split(',').map(str::trim).collect();
    if fields.len() != 8 {
        return Err(malformed(line, format!("expected 8 fields, found {}", fields.len())));
    }
    let num = |idx: usize, name: &str| -> Result<f64, ObsError> {
        fields[idx]
            .parse::<f64>()
            .map_err(|e| malformed(line, format!("{name}: {e}")))
    };
    let time = fields[0]
        .parse::<i64>()
        .map_err(|e| malformed(line, format!("time: {e}")))?;
    let lat = num(1, "lat_deg")?;
    let lon = num(2, "lon_deg")?;
    let level = num(3, "level_hpa")?;
    let variable: Variable = fields[4].parse()?;
    let value = num(5, "value")?;
    let error_std = match fields[6] {
        "" => None,
        _ => Some(num(6, "error_std")?),
    };
    let qmk = match fields[7] {
        "" => None,
        s => Some(
            s.parse::<u8>()
                .map_err(|e| malformed(line, format!("qmk: {e}")))?,
        ),
    };
    let obs = Observation {
        time,
        position: GeoPoint::with_pressure(lat, lon, level),
        variable,
        value,
        error_std,
        qmk,
        selection_weight: None,
    };
    obs.validate().map_err(|e| match e {
        ObsError::UnknownVariable(_) => e,
        other => malformed(line, other.to_string()),
    })?;
    Ok(obs)
}

/// Format one record. Floats use the shortest representation that parses
/// back to the same value, so write/read is lossless.
pub fn format_record(obs: &Observation) -> String {
    let level = obs.position.pressure_hpa.unwrap_or_else(|| obs.vertical_hpa());
    let err = obs.error_std.map(|e| e.to_string()).unwrap_or_default();
    let qmk = obs.qmk.map(|q| q.to_string()).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{}",
        obs.time,
        obs.position.lat_deg,
        obs.position.lon_deg,
        level,
        obs.variable,
        obs.value,
        err,
        qmk
    )
}

/// Sequential reader over an observation file.
pub struct ObsReader<R> {
    lines: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> ObsReader<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines(),
            line_no: 0,
        }
    }
}

impl<R: BufRead> Iterator for ObsReader<R> {
    type Item = Result<Observation, ObsError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            self.line_no += 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            return Some(parse_record(trimmed, self.line_no));
        }
    }
}

pub fn read_obs_file(path: impl AsRef<Path>) -> Result<ObsReader<BufReader<File>>, ObsError> {
    Ok(ObsReader::new(BufReader::new(File::open(path)?)))
}

pub fn write_obs<'a, W: Write>(
    mut out: W,
    observations: impl IntoIterator<Item = &'a Observation>,
) -> Result<(), ObsError> {
    writeln!(out, "# time,lat_deg,lon_deg,level_hpa,var,value,error_std,qmk")?;
    for o in observations {
        writeln!(out, "{}", format_record(o))?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_obs_file<'a>(
    observations: impl IntoIterator<Item = &'a Observation>,
    path: impl AsRef<Path>,
) -> Result<(), ObsError> {
    write_obs(BufWriter::new(File::create(path)?), observations)
}
