//! Area- and latitude-weighted verification scores on horizontal slabs.
//!
//! Slabs are laid out latitude-major (`lat * n_lon + lon`), matching
//! [`GridSpec::cell_area`].

use thiserror::Error;

use crate::ensemble::EnsembleState;
use crate::geo::GridSpec;
use crate::space::StateSpace;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("field has {got} values, grid has {expected} cells")]
    Shape { got: usize, expected: usize },
    #[error("spread needs at least two members, got {0}")]
    TooFewMembers(usize),
    #[error("anomaly correlation undefined: {0} anomalies have zero variance")]
    ZeroAnomaly(&'static str),
}

/// What member deviations are measured against in [`spread`].
#[derive(Debug, Clone, Copy)]
pub enum SpreadCentering<'a> {
    /// The ensemble mean (conventional spread).
    Mean,
    /// A reference field, reproducing the truth-centred variant.
    Truth(&'a [f64]),
}

fn check(len: usize, grid: &GridSpec) -> Result<(), MetricsError> {
    if len != grid.n_columns() {
        return Err(MetricsError::Shape {
            got: len,
            expected: grid.n_columns(),
        });
    }
    Ok(())
}

/// Square root of the area-weighted mean of `values`, normalized by the mean
/// area.
fn weighted_root_mean(values: impl Iterator<Item = f64>, areas: &[f64]) -> f64 {
    let mut num = 0.0;
    for (v, a) in values.zip(areas) {
        num += a * v;
    }
    let den: f64 = areas.iter().sum();
    (num / den).sqrt()
}

pub fn rmse(mean: &[f64], truth: &[f64], grid: &GridSpec) -> Result<f64, MetricsError> {
    check(mean.len(), grid)?;
    check(truth.len(), grid)?;
    Ok(weighted_root_mean(
        mean.iter().zip(truth).map(|(m, t)| (m - t) * (m - t)),
        grid.cell_area(),
    ))
}

/// Square root of the area-weighted sample variance (divisor `k - 1`).
pub fn spread(members: &[&[f64]], grid: &GridSpec, centering: SpreadCentering) -> Result<f64, MetricsError> {
    let k = members.len();
    if k < 2 {
        return Err(MetricsError::TooFewMembers(k));
    }
    let n = grid.n_columns();
    for m in members {
        check(m.len(), grid)?;
    }
    if let SpreadCentering::Truth(t) = centering {
        check(t.len(), grid)?;
    }
    // deviations are taken from the first member so identical members give
    // exactly zero
    let var = (0..n).map(|c| {
        let (offset, shift) = match centering {
            SpreadCentering::Mean => {
                let base = members[0][c];
                (base, members.iter().map(|m| m[c] - base).sum::<f64>() / k as f64)
            }
            SpreadCentering::Truth(t) => (t[c], 0.0),
        };
        let mut s = 0.0;
        for m in members {
            let d = m[c] - offset - shift;
            s += d * d;
        }
        s / (k - 1) as f64
    });
    Ok(weighted_root_mean(var, grid.cell_area()))
}

/// Latitude-weighted anomaly correlation of `mean` and `truth` about `clim`.
pub fn acc(mean: &[f64], truth: &[f64], clim: &[f64], grid: &GridSpec) -> Result<f64, MetricsError> {
    check(mean.len(), grid)?;
    check(truth.len(), grid)?;
    check(clim.len(), grid)?;
    let n_lon = grid.n_lon();
    let (mut ft, mut ff, mut tt) = (0.0, 0.0, 0.0);
    for (j, &l) in grid.lat_weight().iter().enumerate() {
        let (mut row_ft, mut row_ff, mut row_tt) = (0.0, 0.0, 0.0);
        for c in j * n_lon..(j + 1) * n_lon {
            let f = mean[c] - clim[c];
            let t = truth[c] - clim[c];
            row_ft += f * t;
            row_ff += f * f;
            row_tt += t * t;
        }
        ft += l * row_ft;
        ff += l * row_ff;
        tt += l * row_tt;
    }
    if !(ff > 0.0) {
        return Err(MetricsError::ZeroAnomaly("forecast"));
    }
    if !(tt > 0.0) {
        return Err(MetricsError::ZeroAnomaly("truth"));
    }
    Ok(ft / (ff.sqrt() * tt.sqrt()))
}

/// Scores for one horizontal slab of the state.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldScore {
    pub variable: String,
    pub level_hpa: Option<f64>,
    pub rmse: f64,
    pub spread: f64,
}

/// RMSE of the ensemble mean and spread for every slab of `space`.
pub fn field_scores(
    space: &dyn StateSpace,
    ensemble: &EnsembleState,
    truth: &[f64],
    spread_vs_truth: bool,
) -> Result<Vec<FieldScore>, MetricsError> {
    let grid = space.metric_grid();
    let mean = ensemble.mean();
    space
        .fields()
        .into_iter()
        .map(|f| {
            let t = f.of(truth);
            let members: Vec<&[f64]> = ensemble.members().map(|m| f.of(m)).collect();
            let centering = if spread_vs_truth {
                SpreadCentering::Truth(t)
            } else {
                SpreadCentering::Mean
            };
            Ok(FieldScore {
                rmse: rmse(f.of(&mean), t, grid)?,
                spread: spread(&members, grid, centering)?,
                variable: f.variable,
                level_hpa: f.level_hpa,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()
    }

    fn four_cell_grid(areas: Vec<f64>) -> GridSpec {
        GridSpec::new(vec![0.0, 180.0], vec![-30.0, 45.0], vec![500.0])
            .unwrap()
            .with_cell_areas(areas)
            .unwrap()
    }

    #[test]
    fn rmse_examples() {
        let g = GridSpec::default();
        let truth = vec![1.5; g.n_columns()];
        assert_eq!(rmse(&truth, &truth, &g).unwrap(), 0.0);
        let off: Vec<f64> = truth.iter().map(|t| t + 2.0).collect();
        assert!((rmse(&off, &truth, &g).unwrap() - 2.0).abs() < 1e-12);

        let g = four_cell_grid(vec![1.0, 2.0, 3.0, 4.0]);
        let m = [1.0, 0.0, -1.0, 2.0];
        let t = [0.0, 0.0, 0.0, 0.0];
        // (1 + 0 + 3 + 16) / 10
        assert!((rmse(&m, &t, &g).unwrap() - 2.0f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn spread_examples() {
        let g = GridSpec::regular(6, 4, vec![500.0]).unwrap();
        let a = vec![3.0; 24];
        assert_eq!(spread(&[&a, &a, &a], &g, SpreadCentering::Mean).unwrap(), 0.0);
        let lo = vec![-1.0; 24];
        let hi = vec![1.0; 24];
        assert!((spread(&[&lo, &hi], &g, SpreadCentering::Mean).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(
            spread(&[&lo], &g, SpreadCentering::Mean),
            Err(MetricsError::TooFewMembers(1))
        );
        // truth-centred variant: deviations 0 and 2 about truth = -1
        let s = spread(&[&lo, &hi], &g, SpreadCentering::Truth(&lo)).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
    }

    #[test]
    fn acc_examples() {
        let g = GridSpec::regular(8, 4, vec![500.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let clim = random_field(&mut rng, 32);
        let truth = random_field(&mut rng, 32);
        assert!((acc(&truth, &truth, &clim, &g).unwrap() - 1.0).abs() < 1e-12);
        let flipped: Vec<f64> = truth.iter().zip(&clim).map(|(t, c)| 2.0 * c - t).collect();
        assert!((acc(&flipped, &truth, &clim, &g).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(
            acc(&clim, &truth, &clim, &g),
            Err(MetricsError::ZeroAnomaly("forecast"))
        );
    }

    #[test]
    fn shape_errors() {
        let g = GridSpec::regular(4, 2, vec![500.0]).unwrap();
        assert!(matches!(rmse(&[0.0; 7], &[0.0; 8], &g), Err(MetricsError::Shape { .. })));
    }

    /// Direct double sums over (lat, lon) with explicit weights.
    fn naive(g: &GridSpec, m: &[f64], t: &[f64], c: &[f64], members: &[Vec<f64>]) -> (f64, f64, f64) {
        let (nlat, nlon) = (g.n_lat(), g.n_lon());
        let area = |j: usize, i: usize| g.cell_area()[j * nlon + i];
        let n = (nlat * nlon) as f64;
        let mut mean_area = 0.0;
        let mut se = 0.0;
        let mut var = 0.0;
        for j in 0..nlat {
            for i in 0..nlon {
                let idx = j * nlon + i;
                mean_area += area(j, i) / n;
                se += area(j, i) * (m[idx] - t[idx]).powi(2) / n;
                let mu = members.iter().map(|x| x[idx]).sum::<f64>() / members.len() as f64;
                let v = members.iter().map(|x| (x[idx] - mu).powi(2)).sum::<f64>() / (members.len() - 1) as f64;
                var += area(j, i) * v / n;
            }
        }
        let cos: Vec<f64> = g.lat_deg().iter().map(|p| p.to_radians().cos()).collect();
        let mean_cos = cos.iter().sum::<f64>() / nlat as f64;
        let (mut a, mut b, mut d) = (0.0, 0.0, 0.0);
        for j in 0..nlat {
            let l = cos[j] / mean_cos;
            for i in 0..nlon {
                let idx = j * nlon + i;
                a += l * (m[idx] - c[idx]) * (t[idx] - c[idx]);
                b += l * (m[idx] - c[idx]).powi(2);
                d += l * (t[idx] - c[idx]).powi(2);
            }
        }
        ((se / mean_area).sqrt(), (var / mean_area).sqrt(), a / (b.sqrt() * d.sqrt()))
    }

    #[test]
    fn naive_oracle_on_default_grid() {
        let g = GridSpec::default();
        let n = g.n_columns();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..5 {
            let members: Vec<Vec<f64>> = (0..6).map(|_| random_field(&mut rng, n)).collect();
            let t = random_field(&mut rng, n);
            let c = random_field(&mut rng, n);
            let refs: Vec<&[f64]> = members.iter().map(|m| m.as_slice()).collect();
            let m: Vec<f64> = (0..n).map(|i| members.iter().map(|x| x[i]).sum::<f64>() / 6.0).collect();
            let (r, s, a) = naive(&g, &m, &t, &c, &members);
            assert!((rmse(&m, &t, &g).unwrap() - r).abs() <= 1e-12 * r);
            assert!((spread(&refs, &g, SpreadCentering::Mean).unwrap() - s).abs() <= 1e-12 * s);
            assert!((acc(&m, &t, &c, &g).unwrap() - a).abs() <= 1e-12);
        }
    }

    proptest! {
        #[test]
        fn area_scaling_and_shift_invariance(seed in any::<u64>(), scale in 1e-3f64..1e3, shift in -50.0f64..50.0) {
            let g = GridSpec::regular(8, 6, vec![500.0]).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, t, c) = (random_field(&mut rng, 48), random_field(&mut rng, 48), random_field(&mut rng, 48));
            let scaled = g.clone().with_cell_areas(g.cell_area().iter().map(|a| a * scale).collect()).unwrap();
            let r0 = rmse(&m, &t, &g).unwrap();
            prop_assert!((rmse(&m, &t, &scaled).unwrap() - r0).abs() <= 1e-12 * r0);
            let s0 = spread(&[&m, &t, &c], &g, SpreadCentering::Mean).unwrap();
            prop_assert!((spread(&[&m, &t, &c], &scaled, SpreadCentering::Mean).unwrap() - s0).abs() <= 1e-12 * s0);

            let a0 = acc(&m, &t, &c, &g).unwrap();
            prop_assert!(a0.abs() <= 1.0 + 1e-12);
            let sh = |v: &[f64]| v.iter().map(|x| x + shift).collect::<Vec<_>>();
            let a1 = acc(&sh(&m), &sh(&t), &sh(&c), &g).unwrap();
            prop_assert!((a1 - a0).abs() < 1e-10);
        }
    }
}
