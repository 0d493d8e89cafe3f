//! Synthetic observing networks and observations drawn from a nature run.

use rand::Rng;

use crate::geo::{GeoPoint, GridSpec};
use crate::obs::{ObsBatch, Observation, Variable, WINDOW_HALF_WIDTH_S};
use crate::rng;
use crate::space::{SpaceError, StateSpace};

/// Where and what an observation measures.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsSite {
    pub position: GeoPoint,
    pub variable: Variable,
}

/// Error standard deviation per variable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorTable([f64; 5]);

impl Default for ErrorTable {
    fn default() -> Self {
        Self(Variable::ALL.map(Variable::default_error))
    }
}

impl ErrorTable {
    pub fn uniform(sigma: f64) -> Self {
        Self([sigma; 5])
    }

    fn slot(v: Variable) -> usize {
        Variable::ALL.iter().position(|x| *x == v).expect("variable is listed")
    }

    pub fn get(&self, v: Variable) -> f64 {
        self.0[Self::slot(v)]
    }

    pub fn set(&mut self, v: Variable, sigma: f64) {
        self.0[Self::slot(v)] = sigma;
    }
}

/// Every `stride`-th site of a ring of `n`, starting at `offset`. Ring
/// observations are encoded as equatorial temperature at 500 hPa.
pub fn ring_network(n: usize, stride: usize, offset: usize) -> Vec<ObsSite> {
    (offset..n)
        .step_by(stride.max(1))
        .map(|i| ObsSite {
            position: GeoPoint::with_pressure(0.0, 360.0 * i as f64 / n as f64, 500.0),
            variable: Variable::T,
        })
        .collect()
}

fn sites_at(points: &[(f64, f64)], grid: &GridSpec, variables: &[Variable]) -> Vec<ObsSite> {
    let mut out = Vec::new();
    for &v in variables {
        if v.is_surface() {
            out.extend(points.iter().map(|&(lat, lon)| ObsSite {
                position: GeoPoint::new(lat, lon),
                variable: v,
            }));
        } else {
            for &p in grid.levels_hpa() {
                out.extend(points.iter().map(|&(lat, lon)| ObsSite {
                    position: GeoPoint::with_pressure(lat, lon, p),
                    variable: v,
                }));
            }
        }
    }
    out
}

/// `count` columns spread uniformly over the sphere, each observing every
/// variable at every model level.
pub fn uniform_network(grid: &GridSpec, variables: &[Variable], count: usize, seed: u64) -> Vec<ObsSite> {
    let mut r = rng::stream(seed, u64::MAX, 0, 0);
    let points: Vec<(f64, f64)> = (0..count)
        .map(|_| {
            let lat = (2.0 * r.random::<f64>() - 1.0).asin().to_degrees();
            (lat, 360.0 * r.random::<f64>())
        })
        .collect();
    sites_at(&points, grid, variables)
}

/// `count` columns gathered in Gaussian clusters of the given angular radius
/// around `clusters` random centres.
pub fn clustered_network(
    grid: &GridSpec,
    variables: &[Variable],
    count: usize,
    clusters: usize,
    radius_deg: f64,
    seed: u64,
) -> Vec<ObsSite> {
    let mut r = rng::stream(seed, u64::MAX, 1, 0);
    let centres: Vec<(f64, f64)> = (0..clusters.max(1))
        .map(|_| {
            let lat = (2.0 * r.random::<f64>() - 1.0).asin().to_degrees();
            (lat.clamp(-70.0, 70.0), 360.0 * r.random::<f64>())
        })
        .collect();
    let points: Vec<(f64, f64)> = (0..count)
        .map(|i| {
            let (clat, clon) = centres[i % centres.len()];
            let dlat: f64 = radius_deg * r.sample::<f64, _>(rand_distr::StandardNormal);
            let dlon: f64 = radius_deg * r.sample::<f64, _>(rand_distr::StandardNormal);
            let lat = (clat + dlat).clamp(-89.0, 89.0);
            let lon = (clon + dlon / lat.to_radians().cos()).rem_euclid(360.0);
            (lat, lon)
        })
        .collect();
    sites_at(&points, grid, variables)
}

/// Observations of `truth` at every site with Gaussian errors keyed by
/// `(seed, cycle, site index)`; all are stamped at `time` with quality
/// marker 0.
pub fn synth_obs(
    space: &dyn StateSpace,
    truth: &[f64],
    sites: &[ObsSite],
    errors: &ErrorTable,
    seed: u64,
    cycle: u64,
    time: i64,
) -> Result<ObsBatch, SpaceError> {
    let observations = sites
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let sigma = errors.get(s.variable);
            let probe = Observation::new(time, s.position, s.variable, 0.0);
            let h = space.observe(truth, &probe)?.value;
            let value = h + sigma * rng::normal_at(seed, cycle, u64::MAX, j as u64);
            Ok(Observation::new(time, s.position, s.variable, value)
                .with_error(sigma)
                .with_qmk(0))
        })
        .collect::<Result<_, SpaceError>>()?;
    Ok(ObsBatch {
        observations,
        window_center: time,
        window_half_width: WINDOW_HALF_WIDTH_S,
    })
}
