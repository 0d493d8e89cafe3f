//! Unit conversions and default errors applied to windowed observations.

use std::collections::HashMap;

use crate::obs::{
    assign_default_error, rh_error_to_q_error, virtual_to_real_temperature, ObsError, Observation, Variable,
};
use crate::space::StateSpace;

const KELVIN: f64 = 273.15;

type SiteKey = (i64, u64, u64, u64);

fn site_key(o: &Observation) -> SiteKey {
    (
        o.time,
        o.position.lat_deg.to_bits(),
        o.position.lon_deg.to_bits(),
        o.position.pressure_hpa.unwrap_or(f64::NAN).to_bits(),
    )
}

/// Values reported by other observations at exactly the same place and time.
struct CoReported {
    q: HashMap<SiteKey, f64>,
    t: HashMap<SiteKey, f64>,
}

impl CoReported {
    fn new(obs: &[Observation]) -> Self {
        let mut q = HashMap::new();
        let mut t = HashMap::new();
        for o in obs {
            match o.variable {
                Variable::Q => {
                    q.entry(site_key(o)).or_insert(o.value);
                }
                Variable::T => {
                    t.entry(site_key(o)).or_insert(o.value);
                }
                _ => {}
            }
        }
        Self { q, t }
    }
}

fn background_value(space: &dyn StateSpace, mean: &[f64], o: &Observation, v: Variable) -> Option<f64> {
    let mut probe = o.clone();
    probe.variable = v;
    space.observe(mean, &probe).ok().map(|h| h.value)
}

/// Settings for [`preprocess`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Conversions {
    pub t_is_virtual: bool,
    /// Relative humidity error (percent) for humidity reports without an
    /// error.
    pub rh_error: Option<f64>,
}

/// Convert virtual temperatures, derive humidity errors and fill default
/// errors. Humidity and temperature come from a co-reported observation when
/// one exists, otherwise from the background mean. Observations whose
/// conversion fails are dropped; the count of dropped ones is returned.
pub fn preprocess(
    obs: Vec<Observation>,
    space: &dyn StateSpace,
    background_mean: &[f64],
    conv: Conversions,
) -> (Vec<Observation>, usize) {
    let co = CoReported::new(&obs);
    let mut out = Vec::with_capacity(obs.len());
    let mut dropped = 0;
    for mut o in obs {
        let key = site_key(&o);
        let converted: Result<(), ObsError> = (|| {
            if conv.t_is_virtual && o.variable == Variable::T {
                let q = co
                    .q
                    .get(&key)
                    .copied()
                    .or_else(|| background_value(space, background_mean, &o, Variable::Q))
                    .ok_or_else(|| ObsError::Invalid("no humidity for virtual temperature".into()))?;
                o.value = virtual_to_real_temperature(o.value, q)?;
            }
            if let (Some(rh), Variable::Q, None) = (conv.rh_error, o.variable, o.error_std) {
                let p = o
                    .position
                    .pressure_hpa
                    .ok_or_else(|| ObsError::Invalid("humidity report without level".into()))?;
                let mut t = co
                    .t
                    .get(&key)
                    .copied()
                    .or_else(|| background_value(space, background_mean, &o, Variable::T))
                    .ok_or_else(|| ObsError::Invalid("no temperature for humidity error".into()))?;
                if conv.t_is_virtual && co.t.contains_key(&key) {
                    t = virtual_to_real_temperature(t, o.value)?;
                }
                o.error_std = Some(rh_error_to_q_error(p, t - KELVIN, o.value, rh)?);
            }
            Ok(())
        })();
        match converted {
            Ok(()) => out.push(assign_default_error(o)),
            Err(_) => dropped += 1,
        }
    }
    (out, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{GeoPoint, GridSpec};
    use crate::obs::real_to_virtual_temperature;
    use crate::space::GridSpace;

    fn space() -> GridSpace {
        GridSpace::full(GridSpec::regular(8, 4, vec![850.0, 500.0]).unwrap())
    }

    fn uniform_state(space: &GridSpace, t: f64, q: f64) -> Vec<f64> {
        let mut x = vec![0.0; space.state_len()];
        for f in space.fields() {
            let v = match f.variable.as_str() {
                "T" => t,
                "Q" => q,
                _ => 1.0,
            };
            x[f.offset..f.offset + f.len].iter_mut().for_each(|e| *e = v);
        }
        x
    }

    #[test]
    fn virtual_temperature_prefers_co_reported_humidity() {
        let s = space();
        let mean = uniform_state(&s, 280.0, 0.002);
        let at = GeoPoint::with_pressure(10.0, 45.0, 850.0);
        let tv = real_to_virtual_temperature(280.0, 0.01).unwrap();
        let obs = vec![
            Observation::new(0, at, Variable::T, tv),
            Observation::new(0, at, Variable::Q, 0.01),
            Observation::new(0, GeoPoint::with_pressure(-10.0, 90.0, 500.0), Variable::T, tv),
        ];
        let conv = Conversions {
            t_is_virtual: true,
            rh_error: None,
        };
        let (out, dropped) = preprocess(obs, &s, &mean, conv);
        assert_eq!(dropped, 0);
        assert!((out[0].value - 280.0).abs() < 1e-10);
        // no co-reported humidity: the background's 0.002 is used
        assert!((out[2].value - virtual_to_real_temperature(tv, 0.002).unwrap()).abs() < 1e-10);
        assert!(out.iter().all(|o| o.error_std.is_some()));
        assert_eq!(out[0].error_std, Some(Variable::T.default_error()));
    }

    #[test]
    fn humidity_error_from_relative_humidity() {
        let s = space();
        let mean = uniform_state(&s, 290.0, 0.005);
        let q = Observation::new(0, GeoPoint::with_pressure(0.0, 0.0, 850.0), Variable::Q, 0.008);
        let conv = Conversions {
            t_is_virtual: false,
            rh_error: Some(10.0),
        };
        let (out, _) = preprocess(vec![q.clone(), q.clone().with_error(0.001)], &s, &mean, conv);
        let expected = rh_error_to_q_error(850.0, 290.0 - KELVIN, 0.008, 10.0).unwrap();
        assert!((out[0].error_std.unwrap() - expected).abs() < 1e-15);
        assert_eq!(out[1].error_std, Some(0.001));
        // an impossible humidity cannot be converted and is dropped
        let bad = Observation::new(0, GeoPoint::with_pressure(0.0, 0.0, 850.0), Variable::Q, 1.5);
        let (out, dropped) = preprocess(vec![bad], &s, &mean, conv);
        assert!(out.is_empty());
        assert_eq!(dropped, 1);
    }
}
