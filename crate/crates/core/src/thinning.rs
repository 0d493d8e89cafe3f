//! Greedy observation thinning that keeps the selected network as
//! homogeneous as possible.
//!
//! Every observation carries a weight toward each nearby grid point (distance
//! weight times quality weight). Grid points accumulate the weights of all
//! local observations (`density_all`) and of the already selected ones
//! (`density_sel`). Each iteration selects the observation whose best
//! contribution `w (w_max - W_sel) / (W_sel + eps)` over its grid points is
//! largest, then damps the weights of observations around it by
//! `(1 - w_d)^2`. Selection stops when the best contribution drops below
//! `c_thresh` or `m_thresh` observations were taken.

use std::io::Write;

use thiserror::Error;

use crate::geo::{cutoff_factor, gaussian_cutoff_weight, GridSpec, SphereIndex};
use crate::obs::{ObsBatch, Observation, Variable};

#[derive(Debug, Error)]
pub enum ThinningError {
    #[error("quality marker {0} outside [0, 15]")]
    QualityMarker(u8),
    #[error("invalid thinning configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThinningConfig {
    /// Horizontal length scale (km).
    pub r_h: f64,
    /// Vertical length scale (log hPa).
    pub r_v: f64,
    /// Saturation density of a grid point.
    pub w_max: f64,
    /// Stop once the best contribution falls below this.
    pub c_thresh: f64,
    /// Maximum number of selections per variable; `None` is unbounded.
    pub m_thresh: Option<usize>,
    pub epsilon: f64,
    /// Stop the whole selection as soon as any grid point saturates, instead
    /// of only zeroing contributions around saturated grid points.
    pub global_saturation_exit: bool,
    /// Recompute contributions only for observations whose inputs changed.
    pub use_update_flags: bool,
}

impl Default for ThinningConfig {
    fn default() -> Self {
        Self {
            r_h: 500.0,
            r_v: 0.1,
            w_max: 1.0,
            c_thresh: 0.01,
            m_thresh: None,
            epsilon: 1e-10,
            global_saturation_exit: false,
            use_update_flags: true,
        }
    }
}

impl ThinningConfig {
    pub fn validate(&self) -> Result<(), ThinningError> {
        let positive = [
            ("r_h", self.r_h),
            ("r_v", self.r_v),
            ("w_max", self.w_max),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(ThinningError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.c_thresh >= 0.0) {
            return Err(ThinningError::Config(format!("c_thresh must be non-negative, got {}", self.c_thresh)));
        }
        Ok(())
    }
}

/// Distance weight; same functional form as the localization weight.
pub fn distance_weight(d_h: f64, d_v: f64, r_h: f64, r_v: f64) -> f64 {
    gaussian_cutoff_weight(d_h, d_v, r_h, r_v)
}

/// Weight of a quality marker: 0, 1, 2, 3 map to 1.0, 0.8, 0.4, 0.1; a
/// missing marker to 0.4; anything above 3 is never selected.
pub fn quality_weight(qmk: Option<u8>) -> Result<f64, ThinningError> {
    Ok(match qmk {
        None => 0.4,
        Some(0) => 1.0,
        Some(1) => 0.8,
        Some(2) => 0.4,
        Some(3) => 0.1,
        Some(q) if q <= 15 => 0.0,
        Some(q) => return Err(ThinningError::QualityMarker(q)),
    })
}

/// Impact of selecting an observation with weight `w` on a grid point whose
/// selected density is `density_sel`.
pub fn contribution(w: f64, density_sel: f64, w_max: f64, epsilon: f64) -> f64 {
    (w * (w_max - density_sel) / (density_sel + epsilon)).max(0.0)
}

/// Grid point used for thinning one variable kind.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThinGridPoint {
    pub column: usize,
    /// `None` for surface variables, which are thinned horizontally.
    pub level_hpa: Option<f64>,
}

/// Weights, densities and selection bookkeeping of one thinning run.
#[derive(Debug, Clone)]
pub struct ThinningState {
    pub grid_points: Vec<ThinGridPoint>,
    /// Per grid point: `(observation, current weight)` of its local
    /// observations, ascending by observation.
    pub weights: Vec<Vec<(usize, f64)>>,
    /// Per observation: `(grid point, slot in weights[grid point])`.
    pub obs_grids: Vec<Vec<(usize, usize)>>,
    pub density_all: Vec<f64>,
    pub density_sel: Vec<f64>,
    /// Selected observations in selection order.
    pub selected: Vec<usize>,
    /// Remaining weight of each selected observation when it was taken.
    pub selection_weight: Vec<f64>,
    pub update_flag: Vec<bool>,
    /// Quality weight times the accumulated damping of each observation.
    pub remaining_weight: Vec<f64>,
}

impl ThinningState {
    pub fn weight(&self, grid_point: usize, obs: usize) -> f64 {
        self.weights[grid_point]
            .binary_search_by_key(&obs, |p| p.0)
            .map(|slot| self.weights[grid_point][slot].1)
            .unwrap_or(0.0)
    }
}

fn grid_points_for(variable: Variable, grid: &GridSpec) -> Vec<ThinGridPoint> {
    let ncol = grid.n_columns();
    if variable.is_surface() {
        (0..ncol)
            .map(|column| ThinGridPoint { column, level_hpa: None })
            .collect()
    } else {
        grid.levels_hpa()
            .iter()
            .flat_map(|&p| (0..ncol).map(move |column| ThinGridPoint { column, level_hpa: Some(p) }))
            .collect()
    }
}

/// Step-wise greedy thinning of observations of a single variable kind.
pub struct Thinner<'a> {
    obs: &'a [Observation],
    cfg: ThinningConfig,
    state: ThinningState,
    obs_index: SphereIndex,
    obs_ln_p: Vec<f64>,
    best: Vec<f64>,
    is_selected: Vec<bool>,
    stopped: bool,
    scratch: Vec<(usize, f64)>,
}

impl<'a> Thinner<'a> {
    pub fn new(obs: &'a [Observation], grid: &GridSpec, cfg: &ThinningConfig) -> Result<Self, ThinningError> {
        cfg.validate()?;
        let variable = obs.first().map(|o| o.variable).unwrap_or(Variable::T);
        let grid_points = grid_points_for(variable, grid);
        let cut_h = cutoff_factor() * cfg.r_h;
        let columns = SphereIndex::new((0..grid.n_columns()).map(|c| {
            let p = grid.column_point(c);
            (p.lat_deg, p.lon_deg)
        }), cut_h);
        let ncol = grid.n_columns();
        let obs_ln_p: Vec<f64> = obs.iter().map(|o| o.vertical_hpa().ln()).collect();

        let mut weights: Vec<Vec<(usize, f64)>> = vec![Vec::new(); grid_points.len()];
        let mut obs_grids: Vec<Vec<(usize, usize)>> = vec![Vec::new(); obs.len()];
        let mut remaining_weight = Vec::with_capacity(obs.len());
        let mut near = Vec::new();
        for (j, o) in obs.iter().enumerate() {
            let wq = quality_weight(o.qmk)?;
            remaining_weight.push(wq);
            if wq == 0.0 {
                continue;
            }
            columns.within(o.position.lat_deg, o.position.lon_deg, cut_h, &mut near);
            let levels: Vec<(usize, f64)> = if o.variable.is_surface() {
                vec![(0, 0.0)]
            } else {
                grid.levels_hpa()
                    .iter()
                    .enumerate()
                    .map(|(l, p)| (l, (p.ln() - obs_ln_p[j]).abs()))
                    .collect()
            };
            for &(l, d_v) in &levels {
                for &(column, d_h) in &near {
                    let w = distance_weight(d_h, d_v, cfg.r_h, cfg.r_v) * wq;
                    if w > 0.0 {
                        let gp = l * ncol + column;
                        obs_grids[j].push((gp, weights[gp].len()));
                        weights[gp].push((j, w));
                    }
                }
            }
        }
        let density_all: Vec<f64> = weights.iter().map(|ws| ws.iter().map(|p| p.1).sum()).collect();
        let state = ThinningState {
            density_sel: vec![0.0; grid_points.len()],
            grid_points,
            weights,
            obs_grids,
            density_all,
            selected: Vec::new(),
            selection_weight: Vec::new(),
            update_flag: vec![true; obs.len()],
            remaining_weight,
        };
        let obs_index = SphereIndex::new(obs.iter().map(|o| (o.position.lat_deg, o.position.lon_deg)), cut_h);
        Ok(Self {
            obs,
            cfg: cfg.clone(),
            state,
            obs_index,
            obs_ln_p,
            best: vec![0.0; obs.len()],
            is_selected: vec![false; obs.len()],
            stopped: false,
            scratch: Vec::new(),
        })
    }

    pub fn state(&self) -> &ThinningState {
        &self.state
    }

    pub fn into_state(self) -> ThinningState {
        self.state
    }

    pub fn is_selected(&self, j: usize) -> bool {
        self.is_selected[j]
    }

    /// `c_{j,i}` for every local grid point of observation `j`.
    pub fn contributions_of(&self, j: usize) -> Vec<(usize, f64)> {
        self.state.obs_grids[j]
            .iter()
            .map(|&(gp, slot)| {
                let w = self.state.weights[gp][slot].1;
                (gp, contribution(w, self.state.density_sel[gp], self.cfg.w_max, self.cfg.epsilon))
            })
            .collect()
    }

    fn best_contribution(&self, j: usize) -> f64 {
        self.state.obs_grids[j]
            .iter()
            .map(|&(gp, slot)| {
                contribution(
                    self.state.weights[gp][slot].1,
                    self.state.density_sel[gp],
                    self.cfg.w_max,
                    self.cfg.epsilon,
                )
            })
            .fold(0.0, f64::max)
    }

    fn refresh(&mut self) {
        for j in 0..self.obs.len() {
            if self.is_selected[j] {
                continue;
            }
            if self.state.update_flag[j] || !self.cfg.use_update_flags {
                self.best[j] = self.best_contribution(j);
                self.state.update_flag[j] = false;
            }
        }
    }

    /// Damp the weights of every observation local to the selected `j`
    /// (including `j` itself) by `(1 - w_d)^2` and flag them for update.
    pub fn decay_weights(&mut self, j: usize) {
        let o = &self.obs[j];
        let cut_h = cutoff_factor() * self.cfg.r_h;
        self.obs_index
            .within(o.position.lat_deg, o.position.lon_deg, cut_h, &mut self.scratch);
        for &(k, d_h) in &self.scratch {
            let d_v = (self.obs_ln_p[j] - self.obs_ln_p[k]).abs();
            let wd = distance_weight(d_h, d_v, self.cfg.r_h, self.cfg.r_v);
            if wd <= 0.0 {
                continue;
            }
            let factor = (1.0 - wd) * (1.0 - wd);
            for &(gp, slot) in &self.state.obs_grids[k] {
                self.state.weights[gp][slot].1 *= factor;
            }
            self.state.remaining_weight[k] *= factor;
            self.state.update_flag[k] = true;
        }
    }

    /// One greedy iteration. Returns the selected observation, or `None`
    /// once a stopping criterion is met.
    pub fn step(&mut self) -> Option<usize> {
        if self.stopped {
            return None;
        }
        if self.cfg.m_thresh.is_some_and(|m| self.state.selected.len() >= m) {
            self.stopped = true;
            return None;
        }
        self.refresh();
        let mut pick: Option<(usize, f64)> = None;
        for j in 0..self.obs.len() {
            if self.is_selected[j] {
                continue;
            }
            // strict comparison: the lowest index wins ties
            if pick.is_none_or(|(_, c)| self.best[j] > c) {
                pick = Some((j, self.best[j]));
            }
        }
        let j = match pick {
            Some((j, c)) if c > 0.0 && c >= self.cfg.c_thresh => j,
            _ => {
                self.stopped = true;
                return None;
            }
        };
        self.is_selected[j] = true;
        self.state.selected.push(j);
        self.state.selection_weight.push(self.state.remaining_weight[j]);
        for &(gp, slot) in &self.state.obs_grids[j] {
            self.state.density_sel[gp] += self.state.weights[gp][slot].1;
        }
        // densities changed: every observation sharing a grid point is stale
        for &(gp, _) in &self.state.obs_grids[j] {
            for &(k, _) in &self.state.weights[gp] {
                self.state.update_flag[k] = true;
            }
        }
        if self.cfg.global_saturation_exit
            && self.state.density_sel.iter().any(|&d| d >= self.cfg.w_max)
        {
            self.stopped = true;
        }
        self.decay_weights(j);
        Some(j)
    }

    /// Run to completion.
    pub fn run(mut self) -> ThinningState {
        while self.step().is_some() {}
        self.state
    }
}

/// Thin observations of a single variable kind.
pub fn thin_variable(
    obs: &[Observation],
    grid: &GridSpec,
    cfg: &ThinningConfig,
) -> Result<ThinningState, ThinningError> {
    if let Some(first) = obs.first() {
        debug_assert!(obs.iter().all(|o| o.variable == first.variable));
    }
    Ok(Thinner::new(obs, grid, cfg)?.run())
}

/// Result of thinning one batch, variable by variable.
#[derive(Debug, Clone)]
pub struct ThinningOutcome {
    pub selected: ObsBatch,
    pub per_variable: Vec<VariableThinning>,
}

#[derive(Debug, Clone)]
pub struct VariableThinning {
    pub variable: Variable,
    /// Batch indices of the observations thinned in this group.
    pub batch_indices: Vec<usize>,
    pub state: ThinningState,
}

/// Thin each variable kind independently. Selected observations are returned
/// grouped by variable, in selection order, with `selection_weight` filled.
pub fn thin(batch: &ObsBatch, grid: &GridSpec, cfg: &ThinningConfig) -> Result<ThinningOutcome, ThinningError> {
    let mut selected = Vec::new();
    let mut per_variable = Vec::new();
    for variable in Variable::ALL {
        let batch_indices: Vec<usize> = batch
            .observations
            .iter()
            .enumerate()
            .filter(|(_, o)| o.variable == variable)
            .map(|(i, _)| i)
            .collect();
        if batch_indices.is_empty() {
            continue;
        }
        let group: Vec<Observation> = batch_indices.iter().map(|&i| batch.observations[i].clone()).collect();
        let mut thinner = Thinner::new(&group, grid, cfg)?;
        while let Some(j) = thinner.step() {
            let mut o = group[j].clone();
            o.selection_weight = thinner.state().selection_weight.last().copied();
            selected.push(o);
        }
        per_variable.push(VariableThinning {
            variable,
            batch_indices,
            state: thinner.into_state(),
        });
    }
    Ok(ThinningOutcome {
        selected: ObsBatch {
            observations: selected,
            window_center: batch.window_center,
            window_half_width: batch.window_half_width,
        },
        per_variable,
    })
}

/// CSV with one row per grid point and variable: total and selected density.
pub fn write_density_report<W: Write>(
    mut out: W,
    outcome: &ThinningOutcome,
    grid: &GridSpec,
) -> Result<(), ThinningError> {
    writeln!(out, "variable,grid_index,lat_deg,lon_deg,level_hpa,density_all,density_sel")?;
    for group in &outcome.per_variable {
        for (gp, point) in group.state.grid_points.iter().enumerate() {
            let p = grid.column_point(point.column);
            let level = point.level_hpa.map(|l| l.to_string()).unwrap_or_default();
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                group.variable,
                gp,
                p.lat_deg,
                p.lon_deg,
                level,
                group.state.density_all[gp],
                group.state.density_sel[gp]
            )?;
        }
    }
    out.flush()?;
    Ok(())
}
