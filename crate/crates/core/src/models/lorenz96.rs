use crate::space::{RingSpace, StateSpace};

use super::{ForecastModel, ModelError, ParamReader, StateLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct Lorenz96Config {
    pub n: usize,
    pub forcing: f64,
    /// RK4 step, model time units.
    pub dt: f64,
    pub steps_per_cycle: usize,
    /// Localization scale in ring intervals.
    pub loc_intervals: f64,
}

impl Default for Lorenz96Config {
    fn default() -> Self {
        Self {
            n: 40,
            forcing: 8.0,
            dt: 0.05,
            steps_per_cycle: 1,
            loc_intervals: 4.0,
        }
    }
}

impl Lorenz96Config {
    pub const KEYS: &'static [&'static str] = &["n", "forcing", "dt", "steps_per_cycle", "loc_intervals"];

    pub fn from_params(p: &mut ParamReader) -> Result<Self, ModelError> {
        let d = Self::default();
        let cfg = Self {
            n: p.get("n", d.n)?,
            forcing: p.get("forcing", d.forcing)?,
            dt: p.get("dt", d.dt)?,
            steps_per_cycle: p.get("steps_per_cycle", d.steps_per_cycle)?,
            loc_intervals: p.get("loc_intervals", d.loc_intervals)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n < 4 {
            return Err(ModelError::Config(format!("lorenz96 needs n >= 4, got {}", self.n)));
        }
        if !(self.dt > 0.0) || self.steps_per_cycle == 0 || !(self.loc_intervals > 0.0) {
            return Err(ModelError::Config(
                "lorenz96 dt, steps_per_cycle and loc_intervals must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn tendency(x: &[f64], forcing: f64, out: &mut [f64]) {
    let n = x.len();
    for j in 0..n {
        let p1 = x[(j + 1) % n];
        let m1 = x[(j + n - 1) % n];
        let m2 = x[(j + n - 2) % n];
        out[j] = (p1 - m2) * m1 - x[j] + forcing;
    }
}

/// Classical fourth-order Runge-Kutta step of `dt` for the cyclic system
/// `dx_j/dt = (x_{j+1} - x_{j-2}) x_{j-1} - x_j + F`.
pub fn rk4_step(x: &mut [f64], forcing: f64, dt: f64) {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    tendency(x, forcing, &mut k1);
    for j in 0..n {
        tmp[j] = x[j] + 0.5 * dt * k1[j];
    }
    tendency(&tmp, forcing, &mut k2);
    for j in 0..n {
        tmp[j] = x[j] + 0.5 * dt * k2[j];
    }
    tendency(&tmp, forcing, &mut k3);
    for j in 0..n {
        tmp[j] = x[j] + dt * k3[j];
    }
    tendency(&tmp, forcing, &mut k4);
    for j in 0..n {
        x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
    }
}

/// One RK4 step, rejecting non-finite input.
pub fn lorenz96_step(state: &[f64], cfg: &Lorenz96Config) -> Result<Vec<f64>, ModelError> {
    if state.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { step: 0 });
    }
    let mut x = state.to_vec();
    rk4_step(&mut x, cfg.forcing, cfg.dt);
    Ok(x)
}

#[derive(Debug, Clone)]
pub struct Lorenz96 {
    cfg: Lorenz96Config,
    space: RingSpace,
}

impl Lorenz96 {
    pub fn new(cfg: Lorenz96Config) -> Result<Self, ModelError> {
        cfg.validate()?;
        let space = RingSpace::new(cfg.n, cfg.loc_intervals);
        Ok(Self { cfg, space })
    }

    pub fn config(&self) -> &Lorenz96Config {
        &self.cfg
    }
}

impl ForecastModel for Lorenz96 {
    fn name(&self) -> &'static str {
        "lorenz96"
    }

    fn space(&self) -> &dyn StateSpace {
        &self.space
    }

    fn layout(&self) -> StateLayout {
        StateLayout::Ring(self.cfg.n)
    }

    fn steps_per_cycle(&self) -> usize {
        self.cfg.steps_per_cycle
    }

    fn step(&self, state: &mut [f64]) {
        rk4_step(state, self.cfg.forcing, self.cfg.dt);
    }

    /// Rest state nudged at one site; spin it up before use.
    fn default_initial_state(&self) -> Vec<f64> {
        let mut x = vec![self.cfg.forcing; self.cfg.n];
        x[0] += 0.01;
        x
    }

    fn perturbation_scale(&self) -> Vec<f64> {
        vec![1.0; self.cfg.n]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn attractor_state(n: usize) -> Vec<f64> {
        let mut x = vec![8.0; n];
        x[0] += 0.01;
        for _ in 0..2000 {
            rk4_step(&mut x, 8.0, 0.05);
        }
        x
    }

    #[test]
    fn forcing_is_a_fixed_point() {
        let cfg = Lorenz96Config::default();
        let x = vec![cfg.forcing; cfg.n];
        assert_eq!(lorenz96_step(&x, &cfg).unwrap(), x);
    }

    fn rk4_substeps(x0: &[f64], dt: f64, n: usize) -> Vec<f64> {
        let mut x = x0.to_vec();
        for _ in 0..n {
            rk4_step(&mut x, 8.0, dt / n as f64);
        }
        x
    }

    fn euler(x0: &[f64], dt: f64, n: usize) -> Vec<f64> {
        let mut x = x0.to_vec();
        let mut k = vec![0.0; x.len()];
        for _ in 0..n {
            tendency(&x, 8.0, &mut k);
            for (xi, ki) in x.iter_mut().zip(&k) {
                *xi += dt / n as f64 * ki;
            }
        }
        x
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn matches_fine_euler_integration() {
        let cfg = Lorenz96Config::default();
        let x0 = attractor_state(cfg.n);
        // 1000 sub-steps of the integrator against Richardson-extrapolated
        // explicit Euler at dt/1000 and dt/2000
        let fine = rk4_substeps(&x0, cfg.dt, 1000);
        let (e1, e2) = (euler(&x0, cfg.dt, 1000), euler(&x0, cfg.dt, 2000));
        let extrapolated: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| 2.0 * b - a).collect();
        assert!(max_diff(&fine, &extrapolated) < 1e-6);
        // a single step carries the expected fourth-order truncation error
        let one = lorenz96_step(&x0, &cfg).unwrap();
        let two = rk4_substeps(&x0, cfg.dt, 2);
        let ratio = max_diff(&one, &fine) / max_diff(&two, &fine);
        assert!((10.0..24.0).contains(&ratio), "error ratio {ratio}");
        assert!(max_diff(&one, &fine) < 5e-3);
    }

    #[test]
    fn rotation_equivariance() {
        let cfg = Lorenz96Config::default();
        let x = attractor_state(cfg.n);
        let mut rot = x.clone();
        rot.rotate_left(7);
        let mut a = lorenz96_step(&x, &cfg).unwrap();
        a.rotate_left(7);
        assert_eq!(a, lorenz96_step(&rot, &cfg).unwrap());
    }

    #[test]
    fn rejects_non_finite() {
        let cfg = Lorenz96Config::default();
        let mut x = vec![1.0; 40];
        x[3] = f64::NAN;
        assert!(lorenz96_step(&x, &cfg).is_err());
        assert!(Lorenz96Config { n: 3, ..cfg }.validate().is_err());
    }

    #[test]
    fn chaotic_divergence() {
        let a0 = attractor_state(40);
        let mut b0 = a0.clone();
        b0[5] += 1e-8;
        let (mut a, mut b) = (a0, b0);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let mut log_d = Vec::new();
        for step in 1..=400 {
            rk4_step(&mut a, 8.0, 0.05);
            rk4_step(&mut b, 8.0, 0.05);
            if step % 20 == 0 {
                log_d.push(dist(&a, &b).ln());
            }
        }
        // exponential growth over 2..10 time units, then O(1) separation
        let rate = (log_d[9] - log_d[1]) / 8.0;
        assert!(rate > 1.0 && rate < 2.2, "growth rate {rate}");
        assert!(dist(&a, &b) > 1.0);
    }
}
