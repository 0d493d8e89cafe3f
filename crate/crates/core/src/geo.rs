//! Spherical geometry shared by localization, thinning and verification.
//!
//! Everything here works on a perfect sphere whose surface area matches the
//! Earth's. Longitudes are normalized to `[0, 360)` on construction and all
//! distance computations are wrap-correct.

use std::collections::HashMap;

use thiserror::Error;

/// Radius (km) of the sphere with the same surface area as the Earth.
pub const EARTH_RADIUS_KM: f64 = 6371.0072;

/// Ratio between the hard cutoff distance of the Gaussian weight functions and
/// their length scale: weights vanish beyond `sqrt(10/3)` length scales.
pub fn cutoff_factor() -> f64 {
    (10.0f64 / 3.0).sqrt()
}

/// Pressure levels (hPa) of the default grid, bottom to top.
pub const DEFAULT_LEVELS_HPA: [f64; 7] = [925.0, 850.0, 700.0, 600.0, 500.0, 250.0, 50.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("pressure must be positive, got {0} hPa")]
    NonPositivePressure(f64),
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("latitude weights undefined: every cosine is zero")]
    DegenerateLatitudes,
    #[error("empty coordinate array: {0}")]
    Empty(&'static str),
    #[error("{0} must be strictly monotone")]
    NotMonotone(&'static str),
    #[error("cell areas must be positive and match the grid size ({expected} cells)")]
    BadCellAreas { expected: usize },
}

/// Wrap a longitude into `[0, 360)`.
pub fn normalize_lon(lon_deg: f64) -> f64 {
    let r = lon_deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// A location on the sphere, optionally with a pressure as vertical coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub pressure_hpa: Option<f64>,
}

impl GeoPoint {
    pub fn new(lat_deg: f64, lon_deg: f64) -> Self {
        Self {
            lat_deg,
            lon_deg: normalize_lon(lon_deg),
            pressure_hpa: None,
        }
    }

    pub fn with_pressure(lat_deg: f64, lon_deg: f64, pressure_hpa: f64) -> Self {
        Self {
            pressure_hpa: Some(pressure_hpa),
            ..Self::new(lat_deg, lon_deg)
        }
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(-90.0..=90.0).contains(&self.lat_deg) {
            return Err(GeoError::LatitudeOutOfRange(self.lat_deg));
        }
        match self.pressure_hpa {
            Some(p) if !(p > 0.0) => Err(GeoError::NonPositivePressure(p)),
            _ => Ok(()),
        }
    }

    /// Cartesian coordinates on the unit sphere.
    pub fn unit_vector(&self) -> [f64; 3] {
        unit_vector(self.lat_deg, self.lon_deg)
    }
}

pub fn unit_vector(lat_deg: f64, lon_deg: f64) -> [f64; 3] {
    let (sp, cp) = lat_deg.to_radians().sin_cos();
    let (sl, cl) = lon_deg.to_radians().sin_cos();
    [cp * cl, cp * sl, sp]
}

/// Great-circle distance in km.
///
/// Uses the atan2 (Vincenty special case) form, which stays well conditioned
/// both for near-coincident and for antipodal points.
pub fn great_circle_distance(a: &GeoPoint, b: &GeoPoint) -> f64 {
    great_circle_distance_deg(a.lat_deg, a.lon_deg, b.lat_deg, b.lon_deg)
}

pub fn great_circle_distance_deg(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let (s1, c1) = lat1.to_radians().sin_cos();
    let (s2, c2) = lat2.to_radians().sin_cos();
    let (sd, cd) = (lon2 - lon1).to_radians().sin_cos();
    let y = ((c2 * sd).powi(2) + (c1 * s2 - s1 * c2 * cd).powi(2)).sqrt();
    let x = s1 * s2 + c1 * c2 * cd;
    EARTH_RADIUS_KM * y.atan2(x)
}

/// Vertical distance `|ln p1 - ln p2|` in log hPa.
pub fn log_pressure_distance(p1_hpa: f64, p2_hpa: f64) -> Result<f64, GeoError> {
    for p in [p1_hpa, p2_hpa] {
        if !(p > 0.0) {
            return Err(GeoError::NonPositivePressure(p));
        }
    }
    Ok((p1_hpa.ln() - p2_hpa.ln()).abs())
}

/// Gaussian weight with a hard cutoff at `sqrt(10/3)` length scales in either
/// coordinate. Both the localization and the thinning distance weights have
/// this form.
pub fn gaussian_cutoff_weight(d_h: f64, d_v: f64, scale_h: f64, scale_v: f64) -> f64 {
    let cut = cutoff_factor();
    if d_h < cut * scale_h && d_v < cut * scale_v {
        let (rh, rv) = (d_h / scale_h, d_v / scale_v);
        (-0.5 * (rh * rh + rv * rv)).exp()
    } else {
        0.0
    }
}

/// Row weights `cos(lat) / mean(cos(lat))`, so their mean is one.
pub fn latitude_weights(lats_deg: &[f64]) -> Result<Vec<f64>, GeoError> {
    if lats_deg.is_empty() {
        return Err(GeoError::Empty("latitudes"));
    }
    if let Some(&bad) = lats_deg.iter().find(|l| !(-90.0..=90.0).contains(*l)) {
        return Err(GeoError::LatitudeOutOfRange(bad));
    }
    let cosines: Vec<f64> = lats_deg
        .iter()
        .map(|l| {
            // cos(90 deg) evaluates to ~6e-17; treat the poles as exact zeros
            if l.abs() == 90.0 {
                0.0
            } else {
                l.to_radians().cos()
            }
        })
        .collect();
    let mean = cosines.iter().sum::<f64>() / cosines.len() as f64;
    if mean <= 0.0 {
        return Err(GeoError::DegenerateLatitudes);
    }
    Ok(cosines.into_iter().map(|c| c / mean).collect())
}

/// Regular longitude/latitude/pressure grid.
///
/// Horizontal fields are stored latitude-major: index `j * n_lon + i` for
/// latitude row `j` and longitude column `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    lon_deg: Vec<f64>,
    lat_deg: Vec<f64>,
    levels_hpa: Vec<f64>,
    cell_area: Vec<f64>,
    lat_weight: Vec<f64>,
}

impl GridSpec {
    pub fn new(lon_deg: Vec<f64>, lat_deg: Vec<f64>, levels_hpa: Vec<f64>) -> Result<Self, GeoError> {
        if lon_deg.is_empty() {
            return Err(GeoError::Empty("longitudes"));
        }
        if levels_hpa.is_empty() {
            return Err(GeoError::Empty("levels"));
        }
        let lon_deg: Vec<f64> = lon_deg.into_iter().map(normalize_lon).collect();
        if lon_deg.windows(2).any(|w| w[1] <= w[0]) {
            return Err(GeoError::NotMonotone("longitudes"));
        }
        let lat_weight = latitude_weights(&lat_deg)?;
        let ascending = lat_deg.windows(2).all(|w| w[1] > w[0]);
        let descending = lat_deg.windows(2).all(|w| w[1] < w[0]);
        if !(ascending || descending) {
            return Err(GeoError::NotMonotone("latitudes"));
        }
        if let Some(&p) = levels_hpa.iter().find(|p| !(**p > 0.0)) {
            return Err(GeoError::NonPositivePressure(p));
        }
        if levels_hpa.windows(2).any(|w| w[1] >= w[0]) {
            return Err(GeoError::NotMonotone("levels"));
        }
        let cell_area = spherical_cell_areas(&lon_deg, &lat_deg);
        if cell_area.iter().any(|a| !(*a > 0.0)) {
            return Err(GeoError::BadCellAreas {
                expected: cell_area.len(),
            });
        }
        Ok(Self {
            lon_deg,
            lat_deg,
            levels_hpa,
            cell_area,
            lat_weight,
        })
    }

    /// Equally spaced grid with cell-centred latitudes (no pole rows).
    pub fn regular(n_lon: usize, n_lat: usize, levels_hpa: Vec<f64>) -> Result<Self, GeoError> {
        if n_lon == 0 || n_lat == 0 {
            return Err(GeoError::Empty("grid dimensions"));
        }
        let dlon = 360.0 / n_lon as f64;
        let dlat = 180.0 / n_lat as f64;
        let lon = (0..n_lon).map(|i| i as f64 * dlon).collect();
        let lat = (0..n_lat).map(|j| -90.0 + dlat * (j as f64 + 0.5)).collect();
        Self::new(lon, lat, levels_hpa)
    }

    /// Replace the computed cell areas (any consistent unit).
    pub fn with_cell_areas(mut self, areas: Vec<f64>) -> Result<Self, GeoError> {
        let expected = self.n_columns();
        if areas.len() != expected || areas.iter().any(|a| !(*a > 0.0)) {
            return Err(GeoError::BadCellAreas { expected });
        }
        self.cell_area = areas;
        Ok(self)
    }

    pub fn n_lon(&self) -> usize {
        self.lon_deg.len()
    }

    pub fn n_lat(&self) -> usize {
        self.lat_deg.len()
    }

    pub fn n_levels(&self) -> usize {
        self.levels_hpa.len()
    }

    /// Number of horizontal grid columns.
    pub fn n_columns(&self) -> usize {
        self.n_lon() * self.n_lat()
    }

    pub fn lon_deg(&self) -> &[f64] {
        &self.lon_deg
    }

    pub fn lat_deg(&self) -> &[f64] {
        &self.lat_deg
    }

    pub fn levels_hpa(&self) -> &[f64] {
        &self.levels_hpa
    }

    /// Cell areas in steradians unless overridden, latitude-major.
    pub fn cell_area(&self) -> &[f64] {
        &self.cell_area
    }

    pub fn lat_weight(&self) -> &[f64] {
        &self.lat_weight
    }

    /// Horizontal position of column `c = j * n_lon + i`.
    pub fn column_point(&self, column: usize) -> GeoPoint {
        let (j, i) = (column / self.n_lon(), column % self.n_lon());
        GeoPoint::new(self.lat_deg[j], self.lon_deg[i])
    }
}

impl Default for GridSpec {
    /// 64 x 32 at 5.625 degrees with seven pressure levels.
    fn default() -> Self {
        Self::regular(64, 32, DEFAULT_LEVELS_HPA.to_vec()).expect("default grid is valid")
    }
}

/// Cell areas (steradians) of quadrilaterals bounded by coordinate midpoints.
fn spherical_cell_areas(lon_deg: &[f64], lat_deg: &[f64]) -> Vec<f64> {
    let n_lon = lon_deg.len();
    let widths: Vec<f64> = (0..n_lon)
        .map(|i| {
            if n_lon == 1 {
                return 360.0;
            }
            let prev = lon_deg[(i + n_lon - 1) % n_lon];
            let next = lon_deg[(i + 1) % n_lon];
            let west = (lon_deg[i] - prev).rem_euclid(360.0);
            let east = (next - lon_deg[i]).rem_euclid(360.0);
            0.5 * (west + east)
        })
        .collect();

    let n_lat = lat_deg.len();
    let ascending = n_lat < 2 || lat_deg[1] > lat_deg[0];
    let sorted: Vec<f64> = if ascending {
        lat_deg.to_vec()
    } else {
        lat_deg.iter().rev().copied().collect()
    };
    let mut edges = Vec::with_capacity(n_lat + 1);
    edges.push(-90.0);
    for w in sorted.windows(2) {
        edges.push(0.5 * (w[0] + w[1]));
    }
    edges.push(90.0);
    let mut band: Vec<f64> = (0..n_lat)
        .map(|j| edges[j + 1].to_radians().sin() - edges[j].to_radians().sin())
        .collect();
    if !ascending {
        band.reverse();
    }

    let mut areas = Vec::with_capacity(n_lat * n_lon);
    for b in &band {
        for w in &widths {
            areas.push(w.to_radians() * b);
        }
    }
    areas
}

/// Uniform bucket index over points on the sphere for fixed-radius queries.
///
/// Points are hashed by their unit-vector coordinates into cubes whose side is
/// the chord of the build radius, so a query only visits the 27 neighbouring
/// cubes.
#[derive(Debug, Clone)]
pub struct SphereIndex {
    lat_lon: Vec<(f64, f64)>,
    cell: f64,
    buckets: HashMap<[i32; 3], Vec<usize>>,
    radius_km: f64,
}

impl SphereIndex {
    pub fn new(points: impl IntoIterator<Item = (f64, f64)>, radius_km: f64) -> Self {
        let lat_lon: Vec<(f64, f64)> = points.into_iter().collect();
        let angle = (radius_km / EARTH_RADIUS_KM).min(std::f64::consts::PI);
        let cell = (2.0 * (0.5 * angle).sin()).max(1e-9);
        let mut buckets: HashMap<[i32; 3], Vec<usize>> = HashMap::new();
        for (idx, &(lat, lon)) in lat_lon.iter().enumerate() {
            buckets.entry(Self::key(unit_vector(lat, lon), cell)).or_default().push(idx);
        }
        Self {
            lat_lon,
            cell,
            buckets,
            radius_km,
        }
    }

    fn key(v: [f64; 3], cell: f64) -> [i32; 3] {
        [
            (v[0] / cell).floor() as i32,
            (v[1] / cell).floor() as i32,
            (v[2] / cell).floor() as i32,
        ]
    }

    pub fn len(&self) -> usize {
        self.lat_lon.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lat_lon.is_empty()
    }

    /// Indices (ascending) and distances of points strictly closer than
    /// `radius_km`, which must not exceed the build radius.
    pub fn within(&self, lat_deg: f64, lon_deg: f64, radius_km: f64, out: &mut Vec<(usize, f64)>) {
        debug_assert!(radius_km <= self.radius_km * (1.0 + 1e-12));
        out.clear();
        let k = Self::key(unit_vector(lat_deg, lon_deg), self.cell);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    if let Some(bucket) = self.buckets.get(&[k[0] + dx, k[1] + dy, k[2] + dz]) {
                        for &idx in bucket {
                            let (la, lo) = self.lat_lon[idx];
                            let d = great_circle_distance_deg(lat_deg, lon_deg, la, lo);
                            if d < radius_km {
                                out.push((idx, d));
                            }
                        }
                    }
                }
            }
        }
        out.sort_unstable_by_key(|&(idx, _)| idx);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const HALF_CIRCUMFERENCE: f64 = std::f64::consts::PI * EARTH_RADIUS_KM;

    #[test]
    fn distance_examples() {
        let o = GeoPoint::new(0.0, 0.0);
        assert_eq!(great_circle_distance(&o, &o), 0.0);
        let anti = GeoPoint::new(0.0, 180.0);
        assert!((great_circle_distance(&o, &anti) - 20015.109_415).abs() < 1e-5);
        assert!((great_circle_distance(&o, &anti) - HALF_CIRCUMFERENCE).abs() < 1e-9);
        let pole = GeoPoint::new(90.0, 0.0);
        assert!((great_circle_distance(&o, &pole) - 0.5 * HALF_CIRCUMFERENCE).abs() < 1e-9);
        assert!((great_circle_distance(&o, &pole) - 10007.554_708).abs() < 1e-5);
    }

    #[test]
    fn distance_accuracy_near_coincident_and_antipodal() {
        // 1 m apart along the equator
        let a = GeoPoint::new(0.0, 10.0);
        let b = GeoPoint::new(0.0, 10.0 + (0.001 / EARTH_RADIUS_KM).to_degrees());
        assert!((great_circle_distance(&a, &b) - 0.001).abs() < 1e-9);
        // nearly antipodal, 1 km short
        let c = GeoPoint::new(0.0, 190.0 - (1.0 / EARTH_RADIUS_KM).to_degrees());
        assert!((great_circle_distance(&a, &c) - (HALF_CIRCUMFERENCE - 1.0)).abs() < 1e-3);
    }

    #[test]
    fn distance_wraps_longitude() {
        let a = GeoPoint::new(10.0, 359.0);
        let b = GeoPoint::new(10.0, 1.0);
        let c = GeoPoint::new(10.0, -1.0);
        assert_eq!(c.lon_deg, 359.0);
        let d = great_circle_distance(&a, &b);
        assert!(d < 2.0 * 111.3 && d > 2.0 * 109.0);
    }

    #[test]
    fn log_pressure_examples() {
        assert_eq!(log_pressure_distance(500.0, 500.0).unwrap(), 0.0);
        assert!((log_pressure_distance(1000.0, 500.0).unwrap() - 0.693_147_180_559_945_3).abs() < 1e-12);
        assert!((log_pressure_distance(925.0, 50.0).unwrap() - 2.917_770_732_084_279).abs() < 1e-12);
        assert_eq!(
            log_pressure_distance(0.0, 500.0),
            Err(GeoError::NonPositivePressure(0.0))
        );
        assert!(log_pressure_distance(500.0, -3.0).is_err());
    }

    #[test]
    fn latitude_weight_examples() {
        assert_eq!(latitude_weights(&[0.0]).unwrap(), vec![1.0]);
        let w = latitude_weights(&[60.0, 0.0]).unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 4.0 / 3.0).abs() < 1e-12);
        assert_eq!(latitude_weights(&[90.0, -90.0]), Err(GeoError::DegenerateLatitudes));
        assert!(latitude_weights(&[]).is_err());
        assert!(latitude_weights(&[91.0]).is_err());
    }

    #[test]
    fn default_grid_geometry() {
        let g = GridSpec::default();
        assert_eq!((g.n_lon(), g.n_lat(), g.n_levels()), (64, 32, 7));
        assert_eq!(g.levels_hpa(), &DEFAULT_LEVELS_HPA);
        assert!((g.lon_deg()[1] - 5.625).abs() < 1e-12);
        assert!((g.lat_deg()[1] - g.lat_deg()[0] - 5.625).abs() < 1e-12);
        assert!((g.lat_deg()[0] + 87.1875).abs() < 1e-12);
        let mean: f64 = g.lat_weight().iter().sum::<f64>() / g.n_lat() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
        let total: f64 = g.cell_area().iter().sum();
        assert!((total - 4.0 * std::f64::consts::PI).abs() < 1e-10);
        assert!(g.cell_area().iter().all(|a| *a > 0.0));
    }

    #[test]
    fn grid_rejects_bad_levels() {
        assert!(GridSpec::regular(8, 4, vec![500.0, 850.0]).is_err());
        assert!(GridSpec::regular(8, 4, vec![500.0, 500.0]).is_err());
        assert!(GridSpec::regular(8, 4, vec![500.0, -1.0]).is_err());
        let g = GridSpec::regular(2, 2, vec![500.0]).unwrap();
        assert!(g.clone().with_cell_areas(vec![1.0, 2.0, 3.0]).is_err());
        assert!(g.with_cell_areas(vec![1.0, 2.0, 3.0, 4.0]).is_ok());
    }

    #[test]
    fn sphere_index_matches_brute_force() {
        let pts: Vec<(f64, f64)> = (0..400)
            .map(|i| {
                let f = i as f64;
                (((f * 37.3) % 180.0) - 90.0, (f * 71.9) % 360.0)
            })
            .collect();
        let idx = SphereIndex::new(pts.iter().copied(), 1500.0);
        let mut out = Vec::new();
        for &(la, lo) in pts.iter().step_by(7).chain([(90.0, 0.0), (-89.9, 123.0)].iter()) {
            idx.within(la, lo, 1500.0, &mut out);
            let brute: Vec<usize> = pts
                .iter()
                .enumerate()
                .filter(|(_, &(b, c))| great_circle_distance_deg(la, lo, b, c) < 1500.0)
                .map(|(i, _)| i)
                .collect();
            let got: Vec<usize> = out.iter().map(|p| p.0).collect();
            assert_eq!(got, brute);
        }
    }

    fn point() -> impl Strategy<Value = GeoPoint> {
        (-90.0f64..=90.0, -180.0f64..540.0).prop_map(|(la, lo)| GeoPoint::new(la, lo))
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in point(), b in point(), c in point()) {
            let ac = great_circle_distance(&a, &c);
            let ab = great_circle_distance(&a, &b);
            let bc = great_circle_distance(&b, &c);
            prop_assert!(ac <= ab + bc + 1e-6);
            prop_assert!(ab >= 0.0 && ab <= HALF_CIRCUMFERENCE + 1e-9);
            prop_assert!((ab - great_circle_distance(&b, &a)).abs() < 1e-9);
        }

        #[test]
        fn rotation_invariance(a in point(), b in point(), shift in -720.0f64..720.0) {
            let d = great_circle_distance(&a, &b);
            let ra = GeoPoint::new(a.lat_deg, a.lon_deg + shift);
            let rb = GeoPoint::new(b.lat_deg, b.lon_deg + shift);
            prop_assert!((d - great_circle_distance(&ra, &rb)).abs() < 1e-6);
        }

        #[test]
        fn weights_have_unit_mean(lats in proptest::collection::vec(-89.99f64..89.99, 1..64)) {
            let w = latitude_weights(&lats).unwrap();
            let mean = w.iter().sum::<f64>() / w.len() as f64;
            prop_assert!((mean - 1.0).abs() < 1e-12);
        }
    }
}
