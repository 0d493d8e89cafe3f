//! Relaxation-to-prior covariance inflation.

use std::fmt;

use thiserror::Error;

use crate::ensemble::{EnsembleError, EnsembleState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RelaxError {
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error("relaxation factor {alpha} is out of range for {method}")]
    BadAlpha { method: &'static str, alpha: f64 },
    #[error("unknown relaxation method `{0}` (known: none, rtps, rtpp)")]
    UnknownMethod(String),
}

/// Outcome of one relaxation pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RelaxDiagnostics {
    /// State elements left untouched because the analysis spread was zero.
    pub zero_spread: usize,
}

/// A covariance relaxation method applied after each analysis.
pub trait Relaxation: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn alpha(&self) -> f64;
    fn apply(&self, analysis: &mut EnsembleState, background: &EnsembleState) -> Result<RelaxDiagnostics, RelaxError>;
}

#[derive(Debug, Clone, Copy)]
pub struct NoRelaxation;

impl Relaxation for NoRelaxation {
    fn name(&self) -> &'static str {
        "none"
    }

    fn alpha(&self) -> f64 {
        0.0
    }

    fn apply(&self, analysis: &mut EnsembleState, background: &EnsembleState) -> Result<RelaxDiagnostics, RelaxError> {
        analysis.check_same_shape(background)?;
        Ok(RelaxDiagnostics::default())
    }
}

/// Relaxation to prior spread.
#[derive(Debug, Clone, Copy)]
pub struct Rtps {
    alpha: f64,
}

impl Rtps {
    pub fn new(alpha: f64) -> Result<Self, RelaxError> {
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(RelaxError::BadAlpha { method: "rtps", alpha });
        }
        Ok(Self { alpha })
    }
}

impl Relaxation for Rtps {
    fn name(&self) -> &'static str {
        "rtps"
    }

    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn apply(&self, analysis: &mut EnsembleState, background: &EnsembleState) -> Result<RelaxDiagnostics, RelaxError> {
        relax_rtps(analysis, background, self.alpha)
    }
}

/// Relaxation to prior perturbations.
#[derive(Debug, Clone, Copy)]
pub struct Rtpp {
    alpha: f64,
}

impl Rtpp {
    pub fn new(alpha: f64) -> Result<Self, RelaxError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(RelaxError::BadAlpha { method: "rtpp", alpha });
        }
        Ok(Self { alpha })
    }
}

impl Relaxation for Rtpp {
    fn name(&self) -> &'static str {
        "rtpp"
    }

    fn alpha(&self) -> f64 {
        self.alpha
    }

    fn apply(&self, analysis: &mut EnsembleState, background: &EnsembleState) -> Result<RelaxDiagnostics, RelaxError> {
        relax_rtpp(analysis, background, self.alpha)
    }
}

/// Scale analysis perturbations so that each element's spread becomes
/// `(1 - alpha) sigma_a + alpha sigma_b`. Elements with zero analysis spread
/// are left unchanged and counted.
pub fn relax_rtps(
    analysis: &mut EnsembleState,
    background: &EnsembleState,
    alpha: f64,
) -> Result<RelaxDiagnostics, RelaxError> {
    analysis.check_same_shape(background)?;
    let mean = analysis.mean();
    let sigma_a = analysis.std_dev();
    let sigma_b = background.std_dev();
    let mut zero_spread = 0;
    let factor: Vec<f64> = sigma_a
        .iter()
        .zip(&sigma_b)
        .map(|(&sa, &sb)| {
            if sa > 0.0 {
                alpha * (sb - sa) / sa + 1.0
            } else {
                zero_spread += 1;
                1.0
            }
        })
        .collect();
    for m in analysis.members_mut() {
        for ((x, mu), f) in m.iter_mut().zip(&mean).zip(&factor) {
            if *f != 1.0 {
                *x = mu + f * (*x - mu);
            }
        }
    }
    Ok(RelaxDiagnostics { zero_spread })
}

/// Blend analysis and background perturbations: `(1 - alpha) da + alpha db`.
pub fn relax_rtpp(
    analysis: &mut EnsembleState,
    background: &EnsembleState,
    alpha: f64,
) -> Result<RelaxDiagnostics, RelaxError> {
    analysis.check_same_shape(background)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(RelaxError::BadAlpha { method: "rtpp", alpha });
    }
    if alpha == 0.0 {
        return Ok(RelaxDiagnostics::default());
    }
    let mean_a = analysis.mean();
    let mean_b = background.mean();
    for (i, m) in analysis.members_mut().enumerate() {
        let b = background.member(i);
        for (((x, mu_a), xb), mu_b) in m.iter_mut().zip(&mean_a).zip(b).zip(&mean_b) {
            *x = mu_a + (1.0 - alpha) * (*x - mu_a) + alpha * (xb - mu_b);
        }
    }
    Ok(RelaxDiagnostics::default())
}

struct Entry {
    name: &'static str,
    default_alpha: f64,
    make: fn(f64) -> Result<Box<dyn Relaxation>, RelaxError>,
}

const ENTRIES: &[Entry] = &[
    Entry {
        name: "none",
        default_alpha: 0.0,
        make: |_| Ok(Box::new(NoRelaxation)),
    },
    Entry {
        name: "rtps",
        default_alpha: 1.2,
        make: |a| Ok(Box::new(Rtps::new(a)?)),
    },
    Entry {
        name: "rtpp",
        default_alpha: 0.9,
        make: |a| Ok(Box::new(Rtpp::new(a)?)),
    },
];

/// Relaxation methods selectable by name.
pub struct RelaxationRegistry;

impl RelaxationRegistry {
    pub fn names() -> impl Iterator<Item = &'static str> {
        ENTRIES.iter().map(|e| e.name)
    }

    pub fn default_alpha(name: &str) -> Option<f64> {
        ENTRIES.iter().find(|e| e.name == name).map(|e| e.default_alpha)
    }

    /// Build a method; `alpha = None` takes the method's preset.
    pub fn build(name: &str, alpha: Option<f64>) -> Result<Box<dyn Relaxation>, RelaxError> {
        let key = name.to_ascii_lowercase();
        let entry = ENTRIES
            .iter()
            .find(|e| e.name == key)
            .ok_or_else(|| RelaxError::UnknownMethod(name.to_string()))?;
        (entry.make)(alpha.unwrap_or(entry.default_alpha))
    }
}
