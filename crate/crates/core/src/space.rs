//! Model state geometry: how a flat state vector maps onto physical
//! locations, how observations see it, and which observations are local to
//! each analysis point.

use std::fmt;

use thiserror::Error;

use crate::geo::{cutoff_factor, gaussian_cutoff_weight, GridSpec, SphereIndex};
use crate::obs::{Observation, Variable};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("variable {0} is not part of the model state")]
    MissingVariable(Variable),
    #[error("state has length {got}, expected {expected}")]
    BadStateLength { got: usize, expected: usize },
    #[error("observation has no usable vertical coordinate")]
    NoLevel,
}

/// A contiguous 2-D horizontal slab of the state (one variable, one level).
#[derive(Debug, Clone, PartialEq)]
pub struct FieldSlice {
    pub variable: String,
    /// `None` for single-level fields.
    pub level_hpa: Option<f64>,
    pub offset: usize,
    pub len: usize,
}

impl FieldSlice {
    pub fn label(&self) -> String {
        match self.level_hpa {
            Some(p) => format!("{}{}", self.variable, p),
            None => self.variable.clone(),
        }
    }

    pub fn of<'a>(&self, state: &'a [f64]) -> &'a [f64] {
        &state[self.offset..self.offset + self.len]
    }
}

/// Model equivalent of an observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observed {
    pub value: f64,
    /// The observation level lay outside the model levels and was clamped.
    pub clamped: bool,
}

/// Observations local to each analysis point, with their localization weights.
pub trait Localizer: Sync {
    /// Fill `out` with `(observation index, weight)` pairs having positive
    /// weight, in ascending observation order.
    fn local_obs(&self, point: usize, out: &mut Vec<(usize, f64)>);
}

pub trait StateSpace: Send + Sync + fmt::Debug {
    fn state_len(&self) -> usize;

    /// Horizontal slabs in state order; each lives on [`Self::metric_grid`].
    fn fields(&self) -> Vec<FieldSlice>;

    /// Horizontal geometry used for verification of each field slice.
    fn metric_grid(&self) -> &GridSpec;

    /// Observation operator.
    fn observe(&self, state: &[f64], obs: &Observation) -> Result<Observed, SpaceError>;

    /// Number of independent local analyses.
    fn n_analysis_points(&self) -> usize;

    /// State elements updated jointly at analysis point `point`.
    fn point_state_indices(&self, point: usize, out: &mut Vec<usize>);

    /// Localization structure for one batch of observations. Surface analysis
    /// points take their vertical coordinate from `background_mean`.
    fn localizer<'a>(
        &'a self,
        obs: &'a [Observation],
        background_mean: &'a [f64],
        rho_h: f64,
        rho_v: f64,
    ) -> Box<dyn Localizer + 'a>;

    /// The same space with one analysis point per state element, each seeing
    /// only observations of its own variable. `None` where that split means
    /// nothing (a single-variable state).
    fn split_by_variable(&self) -> Option<Box<dyn StateSpace + '_>> {
        None
    }
}

// ---------------------------------------------------------------------------
// ring

/// Cyclic one-dimensional state (Lorenz-96).
///
/// Site `i` sits at longitude `360 i / n` on the equator. Distances are cyclic
/// index differences, scaled so that the horizontal localization scale spans
/// `loc_intervals` grid intervals whatever its value in km.
#[derive(Debug, Clone)]
pub struct RingSpace {
    n: usize,
    loc_intervals: f64,
    grid: GridSpec,
}

impl RingSpace {
    pub fn new(n: usize, loc_intervals: f64) -> Self {
        let lons = (0..n).map(|i| 360.0 * i as f64 / n as f64).collect();
        let grid = GridSpec::new(lons, vec![0.0], vec![500.0]).expect("ring grid is valid");
        Self { n, loc_intervals, grid }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn loc_intervals(&self) -> f64 {
        self.loc_intervals
    }

    /// Longitude of ring site `i`.
    pub fn site_lon(&self, i: usize) -> f64 {
        360.0 * i as f64 / self.n as f64
    }

    /// Fractional ring coordinate of an observation.
    fn coordinate(&self, obs: &Observation) -> f64 {
        obs.position.lon_deg / 360.0 * self.n as f64
    }

    fn cyclic_distance(&self, a: f64, b: f64) -> f64 {
        let n = self.n as f64;
        let d = (a - b).rem_euclid(n);
        d.min(n - d)
    }
}

impl StateSpace for RingSpace {
    fn state_len(&self) -> usize {
        self.n
    }

    fn fields(&self) -> Vec<FieldSlice> {
        vec![FieldSlice {
            variable: "X".into(),
            level_hpa: None,
            offset: 0,
            len: self.n,
        }]
    }

    fn metric_grid(&self) -> &GridSpec {
        &self.grid
    }

    fn observe(&self, state: &[f64], obs: &Observation) -> Result<Observed, SpaceError> {
        if state.len() != self.n {
            return Err(SpaceError::BadStateLength {
                got: state.len(),
                expected: self.n,
            });
        }
        let x = self.coordinate(obs);
        let i0 = x.floor();
        let frac = x - i0;
        let i0 = (i0 as usize) % self.n;
        let i1 = (i0 + 1) % self.n;
        let value = if frac == 0.0 {
            state[i0]
        } else {
            (1.0 - frac) * state[i0] + frac * state[i1]
        };
        Ok(Observed { value, clamped: false })
    }

    fn n_analysis_points(&self) -> usize {
        self.n
    }

    fn point_state_indices(&self, point: usize, out: &mut Vec<usize>) {
        out.clear();
        out.push(point);
    }

    fn localizer<'a>(
        &'a self,
        obs: &'a [Observation],
        _background_mean: &'a [f64],
        _rho_h: f64,
        _rho_v: f64,
    ) -> Box<dyn Localizer + 'a> {
        Box::new(RingLocalizer {
            space: self,
            coords: obs.iter().map(|o| self.coordinate(o)).collect(),
        })
    }
}

struct RingLocalizer<'a> {
    space: &'a RingSpace,
    coords: Vec<f64>,
}

impl Localizer for RingLocalizer<'_> {
    fn local_obs(&self, point: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        for (j, &x) in self.coords.iter().enumerate() {
            // distance in units of the localization scale; infinite
            // loc_intervals disables localization
            let d = self.space.cyclic_distance(point as f64, x) / self.space.loc_intervals;
            let w = gaussian_cutoff_weight(d, 0.0, 1.0, 1.0);
            if w > 0.0 {
                out.push((j, w));
            }
        }
    }
}

// ---------------------------------------------------------------------------
// lat-lon-pressure grid

/// Gridded state laid out as `[variable][level][lat][lon]`. Upper-air
/// variables have one slab per model level, surface pressure has one.
#[derive(Debug, Clone)]
pub struct GridSpace {
    grid: GridSpec,
    variables: Vec<Variable>,
    offsets: Vec<usize>,
    len: usize,
}

impl GridSpace {
    pub fn new(grid: GridSpec, variables: Vec<Variable>) -> Self {
        let mut offsets = Vec::with_capacity(variables.len());
        let mut len = 0;
        for v in &variables {
            offsets.push(len);
            len += Self::levels_of(&grid, *v) * grid.n_columns();
        }
        Self {
            grid,
            variables,
            offsets,
            len,
        }
    }

    /// Every assimilated variable on the given grid.
    pub fn full(grid: GridSpec) -> Self {
        Self::new(grid, Variable::ALL.to_vec())
    }

    fn levels_of(grid: &GridSpec, v: Variable) -> usize {
        if v.is_surface() {
            1
        } else {
            grid.n_levels()
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn variables(&self) -> &[Variable] {
        &self.variables
    }

    pub fn n_levels_of(&self, v: Variable) -> usize {
        Self::levels_of(&self.grid, v)
    }

    fn has_surface(&self) -> bool {
        self.variables.contains(&Variable::PS)
    }

    fn has_upper_air(&self) -> bool {
        self.variables.iter().any(|v| !v.is_surface())
    }

    /// Offset of the slab of variable `v` at level slot `level`.
    pub fn slab_offset(&self, v: Variable, level: usize) -> Result<usize, SpaceError> {
        let pos = self
            .variables
            .iter()
            .position(|x| *x == v)
            .ok_or(SpaceError::MissingVariable(v))?;
        Ok(self.offsets[pos] + level * self.grid.n_columns())
    }

    /// State index of variable `v`, level slot, latitude row and longitude column.
    pub fn index(&self, v: Variable, level: usize, lat: usize, lon: usize) -> Result<usize, SpaceError> {
        Ok(self.slab_offset(v, level)? + lat * self.grid.n_lon() + lon)
    }

    fn n_level_slots(&self) -> usize {
        let upper = if self.has_upper_air() { self.grid.n_levels() } else { 0 };
        upper + usize::from(self.has_surface())
    }

    /// Bilinear weights `(column, weight)` for a horizontal position.
    fn horizontal_stencil(&self, lat: f64, lon: f64) -> [(usize, f64); 4] {
        let g = &self.grid;
        let lons = g.lon_deg();
        let n_lon = lons.len();
        // longitude bracket, periodic
        let lon = crate::geo::normalize_lon(lon);
        let i0 = match lons.partition_point(|&x| x <= lon) {
            0 => n_lon - 1,
            p => p - 1,
        };
        let i1 = (i0 + 1) % n_lon;
        let span = if n_lon == 1 {
            360.0
        } else {
            (lons[i1] - lons[i0]).rem_euclid(360.0)
        };
        let fx = if n_lon == 1 {
            0.0
        } else {
            (lon - lons[i0]).rem_euclid(360.0) / span
        };

        // latitude bracket; constant beyond the outermost rows
        let lats = g.lat_deg();
        let n_lat = lats.len();
        let ascending = n_lat < 2 || lats[1] > lats[0];
        let key = |x: f64| if ascending { x } else { -x };
        let (j0, j1, fy) = if n_lat == 1 || key(lat) <= key(lats[0]) {
            (0, 0, 0.0)
        } else if key(lat) >= key(lats[n_lat - 1]) {
            (n_lat - 1, n_lat - 1, 0.0)
        } else {
            let p = lats.partition_point(|&x| key(x) <= key(lat));
            let j0 = p - 1;
            let fy = (key(lat) - key(lats[j0])) / (key(lats[p]) - key(lats[j0]));
            (j0, p, fy)
        };
        [
            (j0 * n_lon + i0, (1.0 - fx) * (1.0 - fy)),
            (j0 * n_lon + i1, fx * (1.0 - fy)),
            (j1 * n_lon + i0, (1.0 - fx) * fy),
            (j1 * n_lon + i1, fx * fy),
        ]
    }

    fn interpolate_slab(&self, slab: &[f64], stencil: &[(usize, f64); 4]) -> f64 {
        // skip zero weights so exact node hits return the node value bitwise
        stencil
            .iter()
            .filter(|(_, w)| *w != 0.0)
            .map(|&(c, w)| w * slab[c])
            .sum()
    }

    /// Vertical bracket `(lower slot, upper slot, weight of upper)` in ln p.
    fn vertical_stencil(&self, p: f64) -> (usize, usize, f64, bool) {
        let levels = self.grid.levels_hpa();
        let n = levels.len();
        if p >= levels[0] {
            return (0, 0, 0.0, p > levels[0]);
        }
        if p <= levels[n - 1] {
            return (n - 1, n - 1, 0.0, p < levels[n - 1]);
        }
        // levels decrease with index
        let upper = levels.partition_point(|&x| x > p);
        let lower = upper - 1;
        if levels[upper] == p {
            return (upper, upper, 0.0, false);
        }
        let f = (levels[lower].ln() - p.ln()) / (levels[lower].ln() - levels[upper].ln());
        (lower, upper, f, false)
    }

    /// Interpolate variable `v` at a position (pressure ignored for PS).
    pub fn interpolate(
        &self,
        state: &[f64],
        variable: Variable,
        lat: f64,
        lon: f64,
        pressure_hpa: Option<f64>,
    ) -> Result<Observed, SpaceError> {
        if state.len() != self.len {
            return Err(SpaceError::BadStateLength {
                got: state.len(),
                expected: self.len,
            });
        }
        let stencil = self.horizontal_stencil(lat, lon);
        let ncol = self.grid.n_columns();
        if variable.is_surface() {
            let off = self.slab_offset(variable, 0)?;
            let value = self.interpolate_slab(&state[off..off + ncol], &stencil);
            return Ok(Observed { value, clamped: false });
        }
        let p = pressure_hpa.ok_or(SpaceError::NoLevel)?;
        let (lo, hi, f, clamped) = self.vertical_stencil(p);
        let off_lo = self.slab_offset(variable, lo)?;
        let v_lo = self.interpolate_slab(&state[off_lo..off_lo + ncol], &stencil);
        let value = if f == 0.0 {
            v_lo
        } else {
            let off_hi = self.slab_offset(variable, hi)?;
            let v_hi = self.interpolate_slab(&state[off_hi..off_hi + ncol], &stencil);
            (1.0 - f) * v_lo + f * v_hi
        };
        Ok(Observed { value, clamped })
    }
}

impl StateSpace for GridSpace {
    fn state_len(&self) -> usize {
        self.len
    }

    fn fields(&self) -> Vec<FieldSlice> {
        let ncol = self.grid.n_columns();
        let mut out = Vec::new();
        for (v, &off) in self.variables.iter().zip(&self.offsets) {
            if v.is_surface() {
                out.push(FieldSlice {
                    variable: v.code().into(),
                    level_hpa: None,
                    offset: off,
                    len: ncol,
                });
            } else {
                for (l, &p) in self.grid.levels_hpa().iter().enumerate() {
                    out.push(FieldSlice {
                        variable: v.code().into(),
                        level_hpa: Some(p),
                        offset: off + l * ncol,
                        len: ncol,
                    });
                }
            }
        }
        out
    }

    fn metric_grid(&self) -> &GridSpec {
        &self.grid
    }

    fn observe(&self, state: &[f64], obs: &Observation) -> Result<Observed, SpaceError> {
        self.interpolate(
            state,
            obs.variable,
            obs.position.lat_deg,
            obs.position.lon_deg,
            obs.position.pressure_hpa,
        )
    }

    fn n_analysis_points(&self) -> usize {
        self.n_level_slots() * self.grid.n_columns()
    }

    /// Points are ordered level slot major; the last slot is the surface when
    /// surface pressure is part of the state.
    fn point_state_indices(&self, point: usize, out: &mut Vec<usize>) {
        out.clear();
        let ncol = self.grid.n_columns();
        let (slot, column) = (point / ncol, point % ncol);
        let upper_slots = if self.has_upper_air() { self.grid.n_levels() } else { 0 };
        for (v, &off) in self.variables.iter().zip(&self.offsets) {
            if v.is_surface() {
                if slot == upper_slots {
                    out.push(off + column);
                }
            } else if slot < upper_slots {
                out.push(off + slot * ncol + column);
            }
        }
    }

    fn localizer<'a>(
        &'a self,
        obs: &'a [Observation],
        background_mean: &'a [f64],
        rho_h: f64,
        rho_v: f64,
    ) -> Box<dyn Localizer + 'a> {
        let cut_h = cutoff_factor() * rho_h;
        let index = SphereIndex::new(obs.iter().map(|o| (o.position.lat_deg, o.position.lon_deg)), cut_h);
        let mut scratch = Vec::new();
        let columns = (0..self.grid.n_columns())
            .map(|c| {
                let p = self.grid.column_point(c);
                index.within(p.lat_deg, p.lon_deg, cut_h, &mut scratch);
                scratch.clone()
            })
            .collect();
        let surface_ln_p = match self.slab_offset(Variable::PS, 0) {
            Ok(off) => background_mean[off..off + self.grid.n_columns()]
                .iter()
                .map(|p| p.max(f64::MIN_POSITIVE).ln())
                .collect(),
            Err(_) => Vec::new(),
        };
        Box::new(GridLocalizer {
            space: self,
            columns,
            obs_ln_p: obs.iter().map(|o| o.vertical_hpa().ln()).collect(),
            level_ln_p: self.grid.levels_hpa().iter().map(|p| p.ln()).collect(),
            surface_ln_p,
            rho_h,
            rho_v,
        })
    }

    fn split_by_variable(&self) -> Option<Box<dyn StateSpace + '_>> {
        Some(Box::new(VariableSplit::new(self)))
    }
}

struct GridLocalizer<'a> {
    space: &'a GridSpace,
    /// Horizontally local observations and distances for each column.
    columns: Vec<Vec<(usize, f64)>>,
    obs_ln_p: Vec<f64>,
    level_ln_p: Vec<f64>,
    surface_ln_p: Vec<f64>,
    rho_h: f64,
    rho_v: f64,
}

impl Localizer for GridLocalizer<'_> {
    fn local_obs(&self, point: usize, out: &mut Vec<(usize, f64)>) {
        out.clear();
        let ncol = self.space.grid.n_columns();
        let (slot, column) = (point / ncol, point % ncol);
        let ln_p = if slot < self.level_ln_p.len() && self.space.has_upper_air() {
            self.level_ln_p[slot]
        } else {
            self.surface_ln_p[column]
        };
        for &(j, d_h) in &self.columns[column] {
            let d_v = (ln_p - self.obs_ln_p[j]).abs();
            let w = gaussian_cutoff_weight(d_h, d_v, self.rho_h, self.rho_v);
            if w > 0.0 {
                out.push((j, w));
            }
        }
    }
}

/// A grid space analysed element by element, with observations of other
/// variables ignored. Useful when the model's variables are uncorrelated
/// and an ensemble would otherwise invent cross-variable covariances.
#[derive(Debug)]
pub struct VariableSplit<'a> {
    space: &'a GridSpace,
    /// Variable and level slot of every slab, in state order.
    slabs: Vec<(Variable, usize)>,
}

impl<'a> VariableSplit<'a> {
    pub fn new(space: &'a GridSpace) -> Self {
        let upper_slots = if space.has_upper_air() { space.grid.n_levels() } else { 0 };
        let mut slabs = Vec::new();
        for &v in &space.variables {
            if v.is_surface() {
                slabs.push((v, upper_slots));
            } else {
                slabs.extend((0..space.grid.n_levels()).map(|l| (v, l)));
            }
        }
        Self { space, slabs }
    }
}

impl StateSpace for VariableSplit<'_> {
    fn state_len(&self) -> usize {
        self.space.state_len()
    }

    fn fields(&self) -> Vec<FieldSlice> {
        self.space.fields()
    }

    fn metric_grid(&self) -> &GridSpec {
        self.space.metric_grid()
    }

    fn observe(&self, state: &[f64], obs: &Observation) -> Result<Observed, SpaceError> {
        self.space.observe(state, obs)
    }

    fn n_analysis_points(&self) -> usize {
        self.space.state_len()
    }

    fn point_state_indices(&self, point: usize, out: &mut Vec<usize>) {
        out.clear();
        out.push(point);
    }

    fn localizer<'b>(
        &'b self,
        obs: &'b [Observation],
        background_mean: &'b [f64],
        rho_h: f64,
        rho_v: f64,
    ) -> Box<dyn Localizer + 'b> {
        Box::new(SplitLocalizer {
            inner: self.space.localizer(obs, background_mean, rho_h, rho_v),
            obs,
            slabs: &self.slabs,
            ncol: self.space.grid.n_columns(),
        })
    }
}

struct SplitLocalizer<'a> {
    inner: Box<dyn Localizer + 'a>,
    obs: &'a [Observation],
    slabs: &'a [(Variable, usize)],
    ncol: usize,
}

impl Localizer for SplitLocalizer<'_> {
    fn local_obs(&self, point: usize, out: &mut Vec<(usize, f64)>) {
        let (variable, slot) = self.slabs[point / self.ncol];
        self.inner.local_obs(slot * self.ncol + point % self.ncol, out);
        out.retain(|&(j, _)| self.obs[j].variable == variable);
    }
}
