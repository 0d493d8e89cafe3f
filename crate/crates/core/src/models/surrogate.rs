//! Cheap stand-in for a global forecast model on a lat-lon-pressure grid.
//!
//! Each variable/level slab carries a normalized anomaly `z = (x - clim) / scale`
//! about a zonally symmetric climatology. One step applies, in order:
//!
//! 1. a semi-Lagrangian zonal shift by `speed[level]` cells with linear
//!    interpolation,
//! 2. an optional Lorenz-96 tendency along each latitude circle, integrated
//!    with RK4, which makes the model chaotic,
//! 3. linear relaxation `z <- (1 - r) z`,
//! 4. explicit diffusion: a zonal Laplacian plus a meridional flux-form term
//!    weighted by band-edge cosines, with no flux through the poles.
//!
//! Slabs evolve independently, so an ensemble finds no real covariance
//! between variables or levels.
//!
//! Steps 1 and 4 conserve the area-weighted mean of every slab. Step 4 is
//! stable while `2 kappa + kappa g (c_{j-1/2} + c_{j+1/2}) / A_j <= 1` for every
//! latitude band `j` (band-edge cosines `c`, band area `A_j`, mean band area
//! `g`); the bound is checked at construction.

use crate::geo::{GridSpec, DEFAULT_LEVELS_HPA};
use crate::obs::Variable;
use crate::space::{GridSpace, StateSpace};

use super::lorenz96::rk4_step;
use super::{ForecastModel, ModelError, ParamReader, StateLayout};

/// Largest normalized anomaly fed to the chaotic term. Free trajectories stay
/// well inside it.
const CHAOS_BOUND: f64 = 20.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateConfig {
    pub grid: GridSpec,
    /// Zonal shift per step in grid cells, one per level; surface pressure
    /// moves with the lowest level.
    pub speed: Vec<f64>,
    /// Relaxation toward climatology per step.
    pub relaxation: f64,
    /// Diffusion coefficient in grid-cell units.
    pub diffusion: f64,
    /// Forcing of the along-latitude chaotic term; `None` disables it.
    pub chaos_forcing: Option<f64>,
    pub chaos_dt: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec::default(),
            speed: vec![1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 1.0],
            relaxation: 0.002,
            diffusion: 0.002,
            chaos_forcing: Some(8.0),
            chaos_dt: 0.05,
        }
    }
}

fn parse_list(s: &str) -> Result<Vec<f64>, ModelError> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| ModelError::Config(format!("bad list entry `{v}`: {e}")))
        })
        .collect()
}

impl SurrogateConfig {
    pub const KEYS: &'static [&'static str] = &[
        "n_lon",
        "n_lat",
        "levels",
        "speed",
        "relaxation",
        "diffusion",
        "chaos_forcing",
        "chaos_dt",
    ];

    pub fn from_params(p: &mut ParamReader) -> Result<Self, ModelError> {
        let d = Self::default();
        let n_lon = p.get("n_lon", d.grid.n_lon())?;
        let n_lat = p.get("n_lat", d.grid.n_lat())?;
        let levels = match p.raw("levels") {
            Some(s) => parse_list(&s)?,
            None => DEFAULT_LEVELS_HPA.to_vec(),
        };
        let grid = GridSpec::regular(n_lon, n_lat, levels).map_err(|e| ModelError::Config(e.to_string()))?;
        let speed = match p.raw("speed") {
            Some(s) => parse_list(&s)?,
            None if grid.n_levels() == d.speed.len() => d.speed.clone(),
            None => vec![1.0; grid.n_levels()],
        };
        let chaos_forcing = match p.raw("chaos_forcing").as_deref() {
            None => d.chaos_forcing,
            Some("none") | Some("off") => None,
            Some(s) => Some(
                s.parse()
                    .map_err(|e| ModelError::Config(format!("chaos_forcing `{s}`: {e}")))?,
            ),
        };
        let cfg = Self {
            grid,
            speed,
            relaxation: p.get("relaxation", d.relaxation)?,
            diffusion: p.get("diffusion", d.diffusion)?,
            chaos_forcing,
            chaos_dt: p.get("chaos_dt", d.chaos_dt)?,
        };
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct Surrogate {
    cfg: SurrogateConfig,
    space: GridSpace,
    clim: Vec<f64>,
    /// Anomaly scale per slab.
    scale: Vec<f64>,
    /// Meridional flux coefficient at each band edge `j + 1/2`, `n_lat - 1`
    /// entries, and the per-band divisor `g / A_j`.
    edge_cos: Vec<f64>,
    band_factor: Vec<f64>,
}

/// Zonally symmetric climatology of variable `v` at latitude `lat` and
/// pressure `p`.
fn climatology(v: Variable, lat_deg: f64, p_hpa: f64) -> f64 {
    let phi = lat_deg.to_radians();
    let s = p_hpa / 1000.0;
    match v {
        // westerly jets peaking in mid-latitudes, stronger aloft
        Variable::U => 5.0 + 25.0 * (2.0 * phi).sin().powi(2) * (1.0 - s).max(0.1),
        Variable::V => 0.0,
        Variable::T => 210.0 + 70.0 * phi.cos().powi(2) * s.powf(0.286),
        Variable::Q => 0.018 * phi.cos().powi(4) * s.powi(3) + 1e-5,
        Variable::PS => 1013.0 - 10.0 * (2.0 * phi).sin().powi(2),
    }
}

fn anomaly_scale(v: Variable, level_clim_mean: f64) -> f64 {
    match v {
        Variable::U | Variable::V => 2.0,
        Variable::T => 1.0,
        Variable::Q => 0.05 * level_clim_mean,
        Variable::PS => 1.0,
    }
}

impl Surrogate {
    pub fn new(cfg: SurrogateConfig) -> Result<Self, ModelError> {
        let grid = &cfg.grid;
        if cfg.speed.len() != grid.n_levels() {
            return Err(ModelError::Config(format!(
                "{} speeds for {} levels",
                cfg.speed.len(),
                grid.n_levels()
            )));
        }
        if !(0.0..1.0).contains(&cfg.relaxation) || cfg.diffusion < 0.0 || !(cfg.chaos_dt > 0.0) {
            return Err(ModelError::Config(
                "relaxation must be in [0, 1), diffusion >= 0 and chaos_dt > 0".into(),
            ));
        }
        if cfg.speed.iter().any(|s| !s.is_finite()) {
            return Err(ModelError::Config("non-finite advection speed".into()));
        }
        let space = GridSpace::full(grid.clone());
        let (n_lon, n_lat) = (grid.n_lon(), grid.n_lat());

        // band geometry from the cell areas of the first column
        let band_area: Vec<f64> = (0..n_lat).map(|j| grid.cell_area()[j * n_lon]).collect();
        let mean_band = band_area.iter().sum::<f64>() / n_lat as f64;
        let lats = grid.lat_deg();
        let edge_cos: Vec<f64> = (0..n_lat.saturating_sub(1))
            .map(|j| (0.5 * (lats[j] + lats[j + 1])).to_radians().cos())
            .collect();
        let band_factor: Vec<f64> = band_area.iter().map(|a| mean_band / a).collect();
        for j in 0..n_lat {
            let below = if j > 0 { edge_cos[j - 1] } else { 0.0 };
            let above = if j + 1 < n_lat { edge_cos[j] } else { 0.0 };
            let total = cfg.diffusion * (2.0 + (below + above) * band_factor[j]);
            if total > 1.0 {
                return Err(ModelError::Config(format!(
                    "diffusion {} is unstable: band {j} coefficient sum {total:.3} exceeds 1",
                    cfg.diffusion
                )));
            }
        }

        let mut clim = vec![0.0; space.state_len()];
        let mut scale = Vec::new();
        for f in space.fields() {
            let v: Variable = f.variable.parse().expect("state variables are known");
            let p = f.level_hpa.unwrap_or(1000.0);
            for c in 0..f.len {
                clim[f.offset + c] = climatology(v, lats[c / n_lon], p);
            }
            let level_mean = clim[f.offset..f.offset + f.len].iter().sum::<f64>() / f.len as f64;
            scale.push(anomaly_scale(v, level_mean));
        }
        Ok(Self {
            cfg,
            space,
            clim,
            scale,
            edge_cos,
            band_factor,
        })
    }

    pub fn config(&self) -> &SurrogateConfig {
        &self.cfg
    }

    pub fn grid_space(&self) -> &GridSpace {
        &self.space
    }

    pub fn climatology(&self) -> &[f64] {
        &self.clim
    }

    fn slab_speed(&self, level_hpa: Option<f64>) -> f64 {
        match level_hpa {
            Some(p) => {
                let l = self
                    .cfg
                    .grid
                    .levels_hpa()
                    .iter()
                    .position(|&q| q == p)
                    .expect("slab level is a grid level");
                self.cfg.speed[l]
            }
            None => self.cfg.speed[0],
        }
    }

    /// Advance one normalized slab in place; `row` and `tmp` are scratch.
    fn step_slab(&self, z: &mut [f64], speed: f64, tmp: &mut Vec<f64>) {
        let (n_lon, n_lat) = (self.cfg.grid.n_lon(), self.cfg.grid.n_lat());
        tmp.resize(n_lon, 0.0);

        // 1. zonal shift: value at i comes from departure point i - speed
        let shift = speed.rem_euclid(n_lon as f64);
        let whole = shift.floor();
        let frac = shift - whole;
        let whole = whole as usize;
        if shift != 0.0 {
            for row in z.chunks_exact_mut(n_lon) {
                for (i, dst) in tmp.iter_mut().enumerate() {
                    let a = row[(i + n_lon - whole) % n_lon];
                    *dst = if frac == 0.0 {
                        a
                    } else {
                        let b = row[(i + 2 * n_lon - whole - 1) % n_lon];
                        (1.0 - frac) * a + frac * b
                    };
                }
                row.copy_from_slice(tmp);
            }
        }

        // 2. chaotic along-latitude term; anomalies far off the attractor
        // (an analysis can put them there) are clipped first, or RK4 explodes
        if let Some(f) = self.cfg.chaos_forcing {
            for row in z.chunks_exact_mut(n_lon) {
                row.iter_mut().for_each(|v| *v = v.clamp(-CHAOS_BOUND, CHAOS_BOUND));
                rk4_step(row, f, self.cfg.chaos_dt);
            }
        }

        // 3. relaxation
        if self.cfg.relaxation > 0.0 {
            let keep = 1.0 - self.cfg.relaxation;
            z.iter_mut().for_each(|v| *v *= keep);
        }

        // 4. diffusion
        let kappa = self.cfg.diffusion;
        if kappa > 0.0 {
            let old = z.to_vec();
            for j in 0..n_lat {
                for i in 0..n_lon {
                    let c = j * n_lon + i;
                    let east = old[j * n_lon + (i + 1) % n_lon];
                    let west = old[j * n_lon + (i + n_lon - 1) % n_lon];
                    let mut flux = 0.0;
                    if j + 1 < n_lat {
                        flux += self.edge_cos[j] * (old[c + n_lon] - old[c]);
                    }
                    if j > 0 {
                        flux -= self.edge_cos[j - 1] * (old[c] - old[c - n_lon]);
                    }
                    z[c] = old[c] + kappa * (east - 2.0 * old[c] + west) + kappa * self.band_factor[j] * flux;
                }
            }
        }
    }
}

impl ForecastModel for Surrogate {
    fn name(&self) -> &'static str {
        "surrogate"
    }

    fn space(&self) -> &dyn StateSpace {
        &self.space
    }

    fn layout(&self) -> StateLayout {
        StateLayout::Grid {
            grid: self.cfg.grid.clone(),
            variables: self.space.variables().to_vec(),
        }
    }

    fn steps_per_cycle(&self) -> usize {
        1
    }

    fn step(&self, state: &mut [f64]) {
        let mut tmp = Vec::new();
        let fields = self.space.fields();
        let mut z: Vec<f64> = state
            .iter()
            .zip(&self.clim)
            .enumerate()
            .map(|(i, (x, c))| (x - c) / self.scale[i / self.cfg.grid.n_columns()])
            .collect();
        for f in &fields {
            self.step_slab(&mut z[f.offset..f.offset + f.len], self.slab_speed(f.level_hpa), &mut tmp);
        }
        for (i, (x, c)) in state.iter_mut().zip(&self.clim).enumerate() {
            *x = c + self.scale[i / self.cfg.grid.n_columns()] * z[i];
        }
    }

    /// Climatology plus a smooth wave-number-3 anomaly whose phase varies with
    /// latitude and slab, off the attractor.
    fn default_initial_state(&self) -> Vec<f64> {
        let n_lon = self.cfg.grid.n_lon();
        let mut x = self.clim.clone();
        for (slab, (f, &s)) in self.space.fields().iter().zip(&self.scale).enumerate() {
            for c in 0..f.len {
                let lon = self.cfg.grid.lon_deg()[c % n_lon].to_radians();
                let phase = 0.7 * (c / n_lon) as f64 + 1.3 * slab as f64;
                x[f.offset + c] += s * (2.0 + 3.0 * (3.0 * lon + phase).sin());
            }
        }
        x
    }

    fn perturbation_scale(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.space.state_len()];
        for (f, &s) in self.space.fields().iter().zip(&self.scale) {
            out[f.offset..f.offset + f.len].fill(s);
        }
        out
    }

    fn climatology(&self) -> Option<&[f64]> {
        Some(&self.clim)
    }
}
