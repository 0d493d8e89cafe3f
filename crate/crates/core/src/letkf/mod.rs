//! Local ensemble transform Kalman filter with Gaussian R-localization,
//! background gross-error checking and relaxation-based inflation.

mod relax;

use std::io::{self, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use thiserror::Error;

use crate::ensemble::{EnsembleError, EnsembleState};
use crate::geo::gaussian_cutoff_weight;
use crate::obs::Observation;
use crate::space::{SpaceError, StateSpace};

pub use relax::{
    relax_rtpp, relax_rtps, NoRelaxation, RelaxDiagnostics, RelaxError, Relaxation, RelaxationRegistry, Rtpp, Rtps,
};

#[derive(Debug, Error)]
pub enum LetkfError {
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Relax(#[from] RelaxError),
    #[error("invalid assimilation setting: {0}")]
    Config(String),
    #[error("observation {0} has no positive error standard deviation")]
    MissingError(usize),
}

/// Relaxation method and factor; `alpha = None` uses the method's preset.
#[derive(Debug, Clone, PartialEq)]
pub struct RelaxationSpec {
    pub method: String,
    pub alpha: Option<f64>,
}

impl RelaxationSpec {
    pub fn none() -> Self {
        Self {
            method: "none".into(),
            alpha: None,
        }
    }

    pub fn rtps(alpha: f64) -> Self {
        Self {
            method: "rtps".into(),
            alpha: Some(alpha),
        }
    }

    pub fn rtpp(alpha: f64) -> Self {
        Self {
            method: "rtpp".into(),
            alpha: Some(alpha),
        }
    }

    pub fn build(&self) -> Result<Box<dyn Relaxation>, RelaxError> {
        RelaxationRegistry::build(&self.method, self.alpha)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaConfig {
    pub ensemble_size: usize,
    /// Horizontal localization scale, km.
    pub rho_h: f64,
    /// Vertical localization scale, ln hPa.
    pub rho_v: f64,
    pub relaxation: RelaxationSpec,
    pub gross_error_factor: f64,
    /// Analyse each variable from its own observations only.
    pub variable_localization: bool,
}

impl Default for DaConfig {
    fn default() -> Self {
        Self {
            ensemble_size: 20,
            rho_h: 600.0,
            rho_v: 0.1,
            relaxation: RelaxationSpec {
                method: "rtps".into(),
                alpha: None,
            },
            gross_error_factor: 10.0,
            variable_localization: false,
        }
    }
}

impl DaConfig {
    pub fn validate(&self) -> Result<(), LetkfError> {
        if self.ensemble_size < 2 {
            return Err(LetkfError::Config(format!(
                "ensemble size {} is below 2",
                self.ensemble_size
            )));
        }
        if !(self.rho_h > 0.0) || !(self.rho_v > 0.0) {
            return Err(LetkfError::Config("localization scales must be positive".into()));
        }
        if !(self.gross_error_factor > 0.0) {
            return Err(LetkfError::Config("gross error factor must be positive".into()));
        }
        self.relaxation.build()?;
        Ok(())
    }
}

/// Gaussian localization weight, exactly zero beyond `sqrt(10/3)` scales in
/// either direction.
pub fn localization_weight(d_h: f64, d_v: f64, rho_h: f64, rho_v: f64) -> f64 {
    gaussian_cutoff_weight(d_h, d_v, rho_h, rho_v)
}

/// Accept unless the departure exceeds `factor` error standard deviations.
pub fn gross_error_check(departure: f64, error_std: f64, factor: f64) -> bool {
    departure.abs() <= factor * error_std
}

/// Background ensemble mapped into observation space, observation-major:
/// `values[j * k + i]` is member `i` at observation `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObsEnsemble {
    k: usize,
    values: Vec<f64>,
    mean: Vec<f64>,
    clamped: Vec<bool>,
}

impl ObsEnsemble {
    pub fn compute(
        background: &EnsembleState,
        space: &dyn StateSpace,
        obs: &[Observation],
    ) -> Result<Self, LetkfError> {
        let k = background.size();
        let rows: Vec<(Vec<f64>, bool)> = obs
            .par_iter()
            .map(|o| {
                let mut row = Vec::with_capacity(k);
                let mut clamped = false;
                for m in background.members() {
                    let h = space.observe(m, o)?;
                    clamped |= h.clamped;
                    row.push(h.value);
                }
                Ok((row, clamped))
            })
            .collect::<Result<_, SpaceError>>()?;
        let mut values = Vec::with_capacity(k * obs.len());
        let mut mean = Vec::with_capacity(obs.len());
        let mut clamped = Vec::with_capacity(obs.len());
        for (row, c) in rows {
            mean.push(row.iter().sum::<f64>() / k as f64);
            values.extend(row);
            clamped.push(c);
        }
        Ok(Self {
            k,
            values,
            mean,
            clamped,
        })
    }

    pub fn len(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mean.is_empty()
    }

    pub fn members_at(&self, j: usize) -> &[f64] {
        &self.values[j * self.k..(j + 1) * self.k]
    }

    /// Mean of the members' observation equivalents.
    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn clamped(&self, j: usize) -> bool {
        self.clamped[j]
    }

    /// Keep only the listed observations, in the given order.
    pub fn subset(&self, keep: &[usize]) -> Self {
        let mut values = Vec::with_capacity(keep.len() * self.k);
        for &j in keep {
            values.extend_from_slice(self.members_at(j));
        }
        Self {
            k: self.k,
            values,
            mean: keep.iter().map(|&j| self.mean[j]).collect(),
            clamped: keep.iter().map(|&j| self.clamped[j]).collect(),
        }
    }
}

/// Quality-control audit of one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationRecord {
    /// Index into the batch that was checked.
    pub obs_index: usize,
    pub background_equivalent: f64,
    pub departure: f64,
    pub accepted: bool,
    /// The observation level was outside the model levels.
    pub clamped: bool,
}

/// Observations surviving the gross-error check plus their background
/// equivalents.
#[derive(Debug, Clone)]
pub struct QcOutcome {
    pub accepted: Vec<Observation>,
    pub obs_ensemble: ObsEnsemble,
    pub records: Vec<InnovationRecord>,
}

impl QcOutcome {
    pub fn rejected(&self) -> usize {
        self.records.iter().filter(|r| !r.accepted).count()
    }
}

/// Gross-error check against the background mean equivalent.
pub fn quality_control(
    background: &EnsembleState,
    space: &dyn StateSpace,
    obs: &[Observation],
    factor: f64,
) -> Result<QcOutcome, LetkfError> {
    let hx = ObsEnsemble::compute(background, space, obs)?;
    let mut keep = Vec::new();
    let mut records = Vec::with_capacity(obs.len());
    for (j, o) in obs.iter().enumerate() {
        let sigma = positive_error(o, j)?;
        let hxb = hx.mean()[j];
        let departure = o.value - hxb;
        let accepted = gross_error_check(departure, sigma, factor);
        if accepted {
            keep.push(j);
        }
        records.push(InnovationRecord {
            obs_index: j,
            background_equivalent: hxb,
            departure,
            accepted,
            clamped: hx.clamped(j),
        });
    }
    Ok(QcOutcome {
        accepted: keep.iter().map(|&j| obs[j].clone()).collect(),
        obs_ensemble: hx.subset(&keep),
        records,
    })
}

fn positive_error(o: &Observation, j: usize) -> Result<f64, LetkfError> {
    match o.error_std {
        Some(s) if s > 0.0 && s.is_finite() => Ok(s),
        _ => Err(LetkfError::MissingError(j)),
    }
}

pub const INNOVATION_HEADER: &str =
    "cycle,obs_index,var,lat_deg,lon_deg,level_hpa,value,error_std,hxb,departure,accepted,clamped";

/// Append innovation records for one cycle as CSV rows.
pub fn write_innovations<W: Write>(
    out: &mut W,
    cycle: usize,
    obs: &[Observation],
    records: &[InnovationRecord],
) -> io::Result<()> {
    for r in records {
        let o = &obs[r.obs_index];
        let level = o.position.pressure_hpa.map(|p| p.to_string()).unwrap_or_default();
        writeln!(
            out,
            "{cycle},{},{},{},{},{level},{},{},{},{},{},{}",
            r.obs_index,
            o.variable,
            o.position.lat_deg,
            o.position.lon_deg,
            o.value,
            o.error_std.unwrap_or(f64::NAN),
            r.background_equivalent,
            r.departure,
            u8::from(r.accepted),
            u8::from(r.clamped),
        )?;
    }
    Ok(())
}

/// Counters from one analysis.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AnalysisDiagnostics {
    pub points: usize,
    /// Points that had at least one local observation.
    pub points_updated: usize,
    pub max_local_obs: usize,
    pub total_local_obs: usize,
    /// Eigenvalues raised to the floor across all points.
    pub eigen_floored: usize,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub ensemble: EnsembleState,
    pub diagnostics: AnalysisDiagnostics,
}

const EIGEN_FLOOR: f64 = 1e-12;

/// Analysis ensemble for `obs`, computing background equivalents first.
pub fn letkf_analysis(
    background: &EnsembleState,
    space: &dyn StateSpace,
    obs: &[Observation],
    cfg: &DaConfig,
) -> Result<Analysis, LetkfError> {
    let hx = ObsEnsemble::compute(background, space, obs)?;
    letkf_analysis_with(background, space, obs, &hx, cfg)
}

/// Analysis ensemble given precomputed background equivalents of `obs`.
pub fn letkf_analysis_with(
    background: &EnsembleState,
    space: &dyn StateSpace,
    obs: &[Observation],
    hx: &ObsEnsemble,
    cfg: &DaConfig,
) -> Result<Analysis, LetkfError> {
    if !(cfg.rho_h > 0.0) || !(cfg.rho_v > 0.0) {
        return Err(LetkfError::Config("localization scales must be positive".into()));
    }
    if background.state_len() != space.state_len() {
        return Err(SpaceError::BadStateLength {
            got: background.state_len(),
            expected: space.state_len(),
        }
        .into());
    }
    if hx.len() != obs.len() {
        return Err(LetkfError::Config("observation equivalents do not match the batch".into()));
    }
    let n_points = space.n_analysis_points();
    let mut diagnostics = AnalysisDiagnostics {
        points: n_points,
        ..Default::default()
    };
    if obs.is_empty() {
        return Ok(Analysis {
            ensemble: background.clone(),
            diagnostics,
        });
    }

    let k = background.size();
    let inv_r: Vec<f64> = obs
        .iter()
        .enumerate()
        .map(|(j, o)| positive_error(o, j).map(|s| 1.0 / (s * s)))
        .collect::<Result<_, _>>()?;
    // observation-space perturbations and innovations
    let mut yb = vec![0.0; obs.len() * k];
    let mut innov = vec![0.0; obs.len()];
    for j in 0..obs.len() {
        let mu = hx.mean()[j];
        for (dst, v) in yb[j * k..(j + 1) * k].iter_mut().zip(hx.members_at(j)) {
            *dst = v - mu;
        }
        innov[j] = obs[j].value - mu;
    }

    let mean = background.mean();
    let localizer = space.localizer(obs, &mean, cfg.rho_h, cfg.rho_v);
    let ctx = PointContext {
        k,
        yb: &yb,
        innov: &innov,
        inv_r: &inv_r,
        background,
        mean: &mean,
    };

    let results: Vec<PointResult> = (0..n_points)
        .into_par_iter()
        .map_init(
            || (Vec::new(), Vec::new()),
            |(local, indices), p| {
                localizer.local_obs(p, local);
                if local.is_empty() {
                    return PointResult::default();
                }
                space.point_state_indices(p, indices);
                ctx.solve(local, indices)
            },
        )
        .collect();

    let mut out = background.clone();
    for r in results {
        if r.n_obs == 0 {
            continue;
        }
        diagnostics.points_updated += 1;
        diagnostics.max_local_obs = diagnostics.max_local_obs.max(r.n_obs);
        diagnostics.total_local_obs += r.n_obs;
        diagnostics.eigen_floored += r.floored;
        for (slot, &s) in r.indices.iter().enumerate() {
            for i in 0..k {
                out.member_mut(i)[s] = r.values[slot * k + i];
            }
        }
    }
    Ok(Analysis {
        ensemble: out,
        diagnostics,
    })
}

struct PointContext<'a> {
    k: usize,
    yb: &'a [f64],
    innov: &'a [f64],
    inv_r: &'a [f64],
    background: &'a EnsembleState,
    mean: &'a [f64],
}

#[derive(Default)]
struct PointResult {
    n_obs: usize,
    floored: usize,
    indices: Vec<usize>,
    /// Analysis values, `values[slot * k + member]`.
    values: Vec<f64>,
}

impl PointContext<'_> {
    fn solve(&self, local: &[(usize, f64)], indices: &[usize]) -> PointResult {
        let k = self.k;
        let l = local.len();
        // Y (l x k) and C = Y^T R~^-1 (k x l)
        let y = DMatrix::from_fn(l, k, |r, i| self.yb[local[r].0 * k + i]);
        let c = DMatrix::from_fn(k, l, |i, r| {
            let (j, w) = local[r];
            y[(r, i)] * w * self.inv_r[j]
        });
        let d = DVector::from_fn(l, |r, _| self.innov[local[r].0]);

        let (pa, mut t, floored) = if l < k {
            dual_transform(&y, local, self.inv_r, k)
        } else {
            primal_transform(&c, &y, k)
        };
        let w_mean = &pa * (&c * &d);
        for col in 0..k {
            for r in 0..k {
                t[(r, col)] += w_mean[r];
            }
        }

        let mut values = vec![0.0; indices.len() * k];
        let mut xp = vec![0.0; k];
        for (slot, &s) in indices.iter().enumerate() {
            let mu = self.mean[s];
            for (m, dst) in xp.iter_mut().enumerate() {
                *dst = self.background.get(m, s) - mu;
            }
            for i in 0..k {
                let mut acc = 0.0;
                for (m, x) in xp.iter().enumerate() {
                    acc += x * t[(m, i)];
                }
                values[slot * k + i] = mu + acc;
            }
        }
        PointResult {
            n_obs: l,
            floored,
            indices: indices.to_vec(),
            values,
        }
    }
}

/// `P~a` and `W = [(k-1) P~a]^{1/2}` from the k x k eigendecomposition of
/// `(k-1) I + Y^T R~^-1 Y`, with the eigenvalue floor applied.
fn primal_transform(c: &DMatrix<f64>, y: &DMatrix<f64>, k: usize) -> (DMatrix<f64>, DMatrix<f64>, usize) {
    let mut a = c * y;
    for i in 0..k {
        a[(i, i)] += (k - 1) as f64;
    }
    // symmetrize against roundoff before the eigensolver
    let a = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(a);
    let lambda_max = eig.eigenvalues.max();
    let floor = EIGEN_FLOOR * lambda_max.max(f64::MIN_POSITIVE);
    let mut floored = 0;
    let lambda: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&v| {
            if v < floor {
                floored += 1;
                floor
            } else {
                v
            }
        })
        .collect();
    let q = &eig.eigenvectors;
    // P~a = Q diag(1/lambda) Q^T, W = Q diag(sqrt((k-1)/lambda)) Q^T
    let q_inv = DMatrix::from_fn(k, k, |r, col| q[(r, col)] / lambda[col]);
    let q_sqrt = DMatrix::from_fn(k, k, |r, col| q[(r, col)] * ((k - 1) as f64 / lambda[col]).sqrt());
    (&q_inv * q.transpose(), &q_sqrt * q.transpose(), floored)
}

/// Same result as [`primal_transform`] when there are fewer local obs than
/// members. `Y^T R~^-1 Y = B^T B` with `B = R~^{-1/2} Y` has rank at most
/// `l`, so its nonzero eigenpairs come from the l x l matrix `B B^T`; every
/// other eigenvalue of the k x k matrix is exactly `k - 1`, far above the
/// floor.
fn dual_transform(y: &DMatrix<f64>, local: &[(usize, f64)], inv_r: &[f64], k: usize) -> (DMatrix<f64>, DMatrix<f64>, usize) {
    let l = local.len();
    let km1 = (k - 1) as f64;
    let b = DMatrix::from_fn(l, k, |r, i| {
        let (j, w) = local[r];
        y[(r, i)] * (w * inv_r[j]).sqrt()
    });
    let m = &b * b.transpose();
    let m = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(m);
    let lambda_max = eig.eigenvalues.max();
    let mut pa = DMatrix::from_diagonal_element(k, k, 1.0 / km1);
    let mut w = DMatrix::identity(k, k);
    for (col, &lambda) in eig.eigenvalues.iter().enumerate() {
        // a null direction of B B^T contributes nothing
        if !(lambda > EIGEN_FLOOR * lambda_max) {
            continue;
        }
        let v = b.transpose() * eig.eigenvectors.column(col) / lambda.sqrt();
        let vv = &v * v.transpose();
        pa += &vv * (1.0 / (km1 + lambda) - 1.0 / km1);
        w += &vv * ((km1 / (km1 + lambda)).sqrt() - 1.0);
    }
    (pa, w, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GeoPoint, GridSpec};
    use crate::obs::Variable;
    use crate::space::{GridSpace, RingSpace};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn ring_obs(space: &RingSpace, site: usize, value: f64, sigma: f64) -> Observation {
        Observation::new(0, GeoPoint::new(0.0, space.site_lon(site)), Variable::T, value).with_error(sigma)
    }

    fn random_ensemble(rng: &mut ChaCha8Rng, k: usize, n: usize, scale: f64) -> EnsembleState {
        let data = (0..k * n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        EnsembleState::from_flat(k, n, data).unwrap()
    }

    #[test]
    fn dual_transform_matches_primal() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        for (k, l) in [(20, 1), (20, 4), (8, 7), (5, 2)] {
            let y = DMatrix::from_fn(l, k, |_, _| rng.sample::<f64, _>(StandardNormal));
            // one duplicated row makes B B^T singular when l > 1
            let y = if l > 1 { DMatrix::from_fn(l, k, |r, i| y[(r.min(l - 2), i)]) } else { y };
            let local: Vec<(usize, f64)> = (0..l).map(|r| (r, rng.random_range(0.1..1.0))).collect();
            let inv_r: Vec<f64> = (0..l).map(|_| rng.random_range(0.5..4.0)).collect();
            let c = DMatrix::from_fn(k, l, |i, r| y[(r, i)] * local[r].1 * inv_r[r]);
            let (pa1, w1, f1) = primal_transform(&c, &y, k);
            let (pa2, w2, f2) = dual_transform(&y, &local, &inv_r, k);
            assert_eq!((f1, f2), (0, 0));
            assert!((&pa1 - &pa2).amax() < 1e-12, "k {k} l {l}");
            assert!((&w1 - &w2).amax() < 1e-12, "k {k} l {l}");
        }
    }

    fn no_loc_cfg() -> DaConfig {
        DaConfig {
            relaxation: RelaxationSpec::none(),
            ..Default::default()
        }
    }

    fn rel_close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn weight_and_gross_error_examples() {
        assert_eq!(localization_weight(0.0, 0.0, 600.0, 0.1), 1.0);
        assert!((localization_weight(600.0, 0.0, 600.0, 0.1) - (-0.5f64).exp()).abs() < 1e-15);
        assert_eq!(localization_weight(0.0, 0.19, 600.0, 0.1), 0.0);
        assert!(gross_error_check(0.0, 1.0, 10.0));
        assert!(!gross_error_check(10.5, 1.0, 10.0));
        assert!(gross_error_check(10.0, 1.0, 10.0));
        assert!(gross_error_check(-10.0, 1.0, 10.0));
    }

    #[test]
    fn empty_batch_is_identity() {
        let space = RingSpace::new(8, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bg = random_ensemble(&mut rng, 5, 8, 1.0);
        let a = letkf_analysis(&bg, &space, &[], &no_loc_cfg()).unwrap();
        assert_eq!(a.ensemble, bg);
    }

    #[test]
    fn scalar_kalman_oracle() {
        let space = RingSpace::new(1, f64::INFINITY);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let k = rng.random_range(2..30);
            let scale = rng.random_range(0.1..3.0);
            let bg = random_ensemble(&mut rng, k, 1, scale);
            let xb = bg.mean()[0];
            let var_b = bg.std_dev()[0].powi(2);
            let r: f64 = rng.random_range(0.05..4.0);
            let y = xb + rng.random_range(-3.0..3.0);
            let o = ring_obs(&space, 0, y, r.sqrt());
            let a = letkf_analysis(&bg, &space, &[o], &no_loc_cfg()).unwrap();
            let want = xb + var_b / (var_b + r) * (y - xb);
            assert!(rel_close(a.ensemble.mean()[0], want, 1e-10));
            let var_a = a.ensemble.std_dev()[0].powi(2);
            assert!(rel_close(var_a, var_b * r / (var_b + r), 1e-10));
        }
    }

    /// Full matrix Kalman update of the sample mean and covariance.
    fn kalman_oracle(bg: &EnsembleState, h_sites: &[usize], y: &[f64], r: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let (k, n) = bg.shape();
        let xb = DVector::from_vec(bg.mean());
        let xp = DMatrix::from_fn(n, k, |s, i| bg.get(i, s) - xb[s]);
        let pb = &xp * xp.transpose() / (k - 1) as f64;
        let h = DMatrix::from_fn(h_sites.len(), n, |j, s| if h_sites[j] == s { 1.0 } else { 0.0 });
        let s = &h * &pb * h.transpose() + DMatrix::from_diagonal(&DVector::from_vec(r.to_vec()));
        let gain = &pb * h.transpose() * s.try_inverse().unwrap();
        let xa = &xb + &gain * (DVector::from_vec(y.to_vec()) - &h * &xb);
        let pa = (DMatrix::identity(n, n) - &gain * &h) * &pb;
        (xa, pa)
    }

    fn sample_cov(e: &EnsembleState) -> DMatrix<f64> {
        let (k, n) = e.shape();
        let mu = e.mean();
        let xp = DMatrix::from_fn(n, k, |s, i| e.get(i, s) - mu[s]);
        &xp * xp.transpose() / (k - 1) as f64
    }

    #[test]
    fn matches_full_kalman_filter_without_localization() {
        let n = 5;
        let space = RingSpace::new(n, f64::INFINITY);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let bg = random_ensemble(&mut rng, 40, n, 1.5);
            let sites = [0usize, 2, 3, 4, 2];
            let r: Vec<f64> = sites.iter().map(|_| rng.random_range(0.2..2.0)).collect();
            let y: Vec<f64> = sites.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
            let obs: Vec<_> = sites
                .iter()
                .zip(&y)
                .zip(&r)
                .map(|((&s, &v), &ri)| ring_obs(&space, s, v, ri.sqrt()))
                .collect();
            let a = letkf_analysis(&bg, &space, &obs, &no_loc_cfg()).unwrap();
            let (xa, pa) = kalman_oracle(&bg, &sites, &y, &r);
            for (got, want) in a.ensemble.mean().iter().zip(xa.iter()) {
                assert!(rel_close(*got, *want, 1e-8), "{got} vs {want}");
            }
            let cov = sample_cov(&a.ensemble);
            for (got, want) in cov.iter().zip(pa.iter()) {
                assert!(rel_close(*got, *want, 1e-8), "{got} vs {want}");
            }
        }
    }

    #[test]
    fn zero_innovation_keeps_mean_and_shrinks_spread() {
        let space = RingSpace::new(10, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bg = random_ensemble(&mut rng, 8, 10, 1.0);
        let o = ring_obs(&space, 4, bg.mean()[4], 0.5);
        let a = letkf_analysis(&bg, &space, &[o], &no_loc_cfg()).unwrap();
        for (x, y) in a.ensemble.mean().iter().zip(bg.mean()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (sa, sb) in a.ensemble.std_dev().iter().zip(bg.std_dev()) {
            assert!(*sa <= sb + 1e-12);
        }
    }

    #[test]
    fn localization_limits_the_update() {
        let space = RingSpace::new(40, 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bg = random_ensemble(&mut rng, 10, 40, 1.0);
        let o = ring_obs(&space, 0, 3.0, 1.0);
        let a = letkf_analysis(&bg, &space, &[o], &no_loc_cfg()).unwrap();
        // cutoff at sqrt(10/3) * 2 = 3.65 sites
        for s in 0..40 {
            let d = s.min(40 - s);
            let same = (0..10).all(|i| a.ensemble.get(i, s) == bg.get(i, s));
            assert_eq!(same, d > 3, "site {s}");
        }
        assert_eq!(a.diagnostics.points_updated, 7);
    }

    #[test]
    fn grid_obs_beyond_cutoff_leave_background() {
        let grid = GridSpec::regular(8, 4, vec![850.0, 500.0]).unwrap();
        let space = GridSpace::new(grid, vec![Variable::T]);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bg = random_ensemble(&mut rng, 6, space.state_len(), 1.0);
        // between two levels but too far from both vertically for rho_v
        let o = Observation::new(0, GeoPoint::with_pressure(10.0, 30.0, 650.0), Variable::T, 1.0).with_error(1.0);
        let cfg = DaConfig {
            rho_h: 1e-3,
            ..no_loc_cfg()
        };
        let a = letkf_analysis(&bg, &space, &[o.clone()], &cfg).unwrap();
        assert_eq!(a.ensemble, bg);
        let cfg = DaConfig {
            rho_h: 5000.0,
            rho_v: 1.0,
            ..no_loc_cfg()
        };
        let a = letkf_analysis(&bg, &space, &[o], &cfg).unwrap();
        assert_ne!(a.ensemble, bg);
    }

    #[test]
    fn quality_control_splits_batch() {
        let space = RingSpace::new(4, 1.0);
        let bg = EnsembleState::from_members(vec![vec![0.0; 4], vec![2.0; 4]]).unwrap();
        let obs = vec![
            ring_obs(&space, 0, 1.0 + 10.0, 1.0),
            ring_obs(&space, 1, 1.0 + 10.5, 1.0),
            ring_obs(&space, 2, 0.5, 1.0),
        ];
        let qc = quality_control(&bg, &space, &obs, 10.0).unwrap();
        let acc: Vec<bool> = qc.records.iter().map(|r| r.accepted).collect();
        assert_eq!(acc, [true, false, true]);
        assert_eq!(qc.rejected(), 1);
        assert_eq!(qc.accepted.len(), 2);
        assert_eq!(qc.obs_ensemble.len(), 2);
        assert_eq!(qc.records[2].departure, -0.5);
        let mut buf = Vec::new();
        write_innovations(&mut buf, 3, &obs, &qc.records).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.lines().nth(1).unwrap().starts_with("3,1,T,"));
        let fields = INNOVATION_HEADER.split(',').count();
        assert!(text.lines().all(|l| l.split(',').count() == fields));
    }

    #[test]
    fn missing_error_is_reported() {
        let space = RingSpace::new(4, 1.0);
        let bg = EnsembleState::from_members(vec![vec![0.0; 4], vec![2.0; 4]]).unwrap();
        let o = Observation::new(0, GeoPoint::new(0.0, 0.0), Variable::T, 1.0);
        assert!(matches!(
            letkf_analysis(&bg, &space, &[o], &no_loc_cfg()),
            Err(LetkfError::MissingError(0))
        ));
    }

    fn ring_case() -> impl Strategy<Value = (u64, Vec<(usize, f64, f64)>)> {
        (
            any::<u64>(),
            proptest::collection::vec((0usize..12, -3.0f64..3.0, 0.3f64..2.0), 1..10),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn order_invariance_and_zero_sum((seed, spec) in ring_case(), rot in 0usize..10) {
            let space = RingSpace::new(12, 2.5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bg = random_ensemble(&mut rng, 7, 12, 1.0);
            let obs: Vec<_> = spec.iter().map(|&(s, v, e)| ring_obs(&space, s, v, e)).collect();
            let mut permuted = obs.clone();
            permuted.rotate_left(rot % obs.len());
            permuted.reverse();
            let a = letkf_analysis(&bg, &space, &obs, &no_loc_cfg()).unwrap().ensemble;
            let b = letkf_analysis(&bg, &space, &permuted, &no_loc_cfg()).unwrap().ensemble;
            for (x, y) in a.as_flat().iter().zip(b.as_flat()) {
                prop_assert!((x - y).abs() <= 1e-10 * x.abs().max(1.0));
            }
            let p = a.perturbations();
            for s in 0..12 {
                let sum: f64 = (0..7).map(|i| p.get(i, s)).sum();
                prop_assert!(sum.abs() < 1e-10);
            }
        }

        #[test]
        fn larger_errors_weaken_single_obs_update(seed in any::<u64>(), site in 0usize..12, y in -3.0f64..3.0, e in 0.2f64..3.0) {
            let space = RingSpace::new(12, 2.5);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bg = random_ensemble(&mut rng, 6, 12, 1.0);
            let xb = bg.mean();
            let a = letkf_analysis(&bg, &space, &[ring_obs(&space, site, y, e)], &no_loc_cfg()).unwrap().ensemble.mean();
            let b = letkf_analysis(&bg, &space, &[ring_obs(&space, site, y, 2.0 * e)], &no_loc_cfg()).unwrap().ensemble.mean();
            for s in 0..12 {
                prop_assert!((b[s] - xb[s]).abs() <= (a[s] - xb[s]).abs() + 1e-12);
            }
        }
    }
}
