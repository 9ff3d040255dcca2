//! Mask-ratio-dependent expert capacity schedules.
//!
//! A schedule maps the mask ratio `r` of a denoising step to an effective
//! top-k, `k(r) = clamp(k_min + (k_max - k_min) * s(r), k_min, k_max)`, which is
//! then turned into a per-expert token capacity `c = k * N / E`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SIGMA: f64 = 0.22;

/// Relative FLOPs deviation above which a schedule is flagged.
pub const FLOPS_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedulerKind {
    Static,
    Linear,
    LinearReverse,
    Cosine,
    CosineReverse,
    Gaussian,
    GaussianReverse,
}

impl SchedulerKind {
    pub const ALL: [SchedulerKind; 7] = [
        SchedulerKind::Static,
        SchedulerKind::Linear,
        SchedulerKind::LinearReverse,
        SchedulerKind::Cosine,
        SchedulerKind::CosineReverse,
        SchedulerKind::Gaussian,
        SchedulerKind::GaussianReverse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchedulerKind::Static => "static",
            SchedulerKind::Linear => "linear",
            SchedulerKind::LinearReverse => "linear_reverse",
            SchedulerKind::Cosine => "cosine",
            SchedulerKind::CosineReverse => "cosine_reverse",
            SchedulerKind::Gaussian => "gaussian",
            SchedulerKind::GaussianReverse => "gaussian_reverse",
        }
    }
}

impl fmt::Display for SchedulerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchedulerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::input(format!("unknown scheduler kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CapacitySchedule {
    pub kind: SchedulerKind,
    pub k_min: f64,
    pub k_max: f64,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub k_static: f64,
}

fn default_sigma() -> f64 {
    DEFAULT_SIGMA
}

impl CapacitySchedule {
    pub fn new(kind: SchedulerKind, k_min: f64, k_max: f64) -> Result<Self> {
        let sched = Self {
            kind,
            k_min,
            k_max,
            sigma: DEFAULT_SIGMA,
            k_static: 0.5 * (k_min + k_max),
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn fixed(k: f64) -> Result<Self> {
        let sched = Self {
            kind: SchedulerKind::Static,
            k_min: k,
            k_max: k,
            sigma: DEFAULT_SIGMA,
            k_static: k,
        };
        sched.validate()?;
        Ok(sched)
    }

    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        self.sigma = sigma;
        self.validate()?;
        Ok(self)
    }

    pub fn with_static_k(mut self, k_static: f64) -> Result<Self> {
        self.k_static = k_static;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k_min > 0.0 && self.k_max > 0.0) {
            return Err(Error::config("k_min and k_max must be positive"));
        }
        if self.k_min > self.k_max {
            return Err(Error::config(format!(
                "k_min {} exceeds k_max {}",
                self.k_min, self.k_max
            )));
        }
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.kind == SchedulerKind::Static && !(self.k_static > 0.0) {
            return Err(Error::config("static schedule needs a positive k_static"));
        }
        Ok(())
    }
}

fn gaussian_normalized(r: f64, sigma: f64) -> f64 {
    let g = |x: f64| (-(x - 0.5).powi(2) / (2.0 * sigma * sigma)).exp();
    let g0 = g(0.0);
    (g(r) - g0) / (1.0 - g0)
}

/// Shape function `s(r)` of a scheduler family, in `[0, 1]`.
pub fn s_of_r(kind: SchedulerKind, r: f64, sigma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::input(format!("mask ratio {r} outside [0, 1]")));
    }
    Ok(match kind {
        SchedulerKind::Static => {
            return Err(Error::NotApplicable(
                "static schedules have no shape function".into(),
            ))
        }
        SchedulerKind::Linear => r,
        SchedulerKind::LinearReverse => 1.0 - r,
        SchedulerKind::Cosine => 0.5 * (1.0 - (PI * r).cos()),
        SchedulerKind::CosineReverse => 0.5 * (1.0 + (PI * r).cos()),
        SchedulerKind::Gaussian => gaussian_normalized(r, sigma),
        SchedulerKind::GaussianReverse => 1.0 - gaussian_normalized(r, sigma),
    })
}

/// Effective top-k at mask ratio `r`.
pub fn k_of_r(schedule: &CapacitySchedule, r: f64) -> Result<f64> {
    if schedule.kind == SchedulerKind::Static {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::input(format!("mask ratio {r} outside [0, 1]")));
        }
        return Ok(schedule.k_static);
    }
    let s = s_of_r(schedule.kind, r, schedule.sigma)?;
    let k = schedule.k_min + (schedule.k_max - schedule.k_min) * s;
    Ok(k.clamp(schedule.k_min, schedule.k_max))
}

/// Per-expert token capacity for an effective top-k: `round(k * N / E)`,
/// rounding half up, clamped to `[1, N]`.
pub fn capacity_from_k(k: f64, n_tokens: usize, n_experts: usize) -> usize {
    assert!(k > 0.0 && n_tokens > 0 && n_experts > 0);
    let exact = k * n_tokens as f64 / n_experts as f64;
    let c = (exact + 0.5).floor() as usize;
    c.clamp(1, n_tokens)
}

/// `E[k(r)]` for `r ~ Uniform(0, 1)` by composite midpoint quadrature.
pub fn expected_k(schedule: &CapacitySchedule, resolution: usize) -> Result<f64> {
    if resolution < 1000 {
        return Err(Error::input(format!(
            "quadrature resolution must be >= 1000, got {resolution}"
        )));
    }
    midpoint(resolution, |r| k_of_r(schedule, r))
}

/// `E[s(r)]`; for static schedules the equivalent shape value of `k_static`.
pub fn expected_s(schedule: &CapacitySchedule, resolution: usize) -> Result<f64> {
    if schedule.kind == SchedulerKind::Static {
        let span = schedule.k_max - schedule.k_min;
        return Ok(if span > 0.0 {
            (schedule.k_static - schedule.k_min) / span
        } else {
            0.5
        });
    }
    if resolution < 1000 {
        return Err(Error::input(format!(
            "quadrature resolution must be >= 1000, got {resolution}"
        )));
    }
    midpoint(resolution, |r| s_of_r(schedule.kind, r, schedule.sigma))
}

fn midpoint(resolution: usize, f: impl Fn(f64) -> Result<f64>) -> Result<f64> {
    let h = 1.0 / resolution as f64;
    let mut acc = 0.0;
    for i in 0..resolution {
        acc += f((i as f64 + 0.5) * h)?;
    }
    Ok(acc * h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlopsRow {
    pub kind: SchedulerKind,
    pub expected_s: f64,
    pub expected_k: f64,
    pub delta: f64,
    /// `|delta|` exceeds [`FLOPS_TOLERANCE`] of the baseline.
    pub flagged: bool,
}

pub const REPORT_RESOLUTION: usize = 100_000;

/// Expected top-k of each schedule against a static baseline.
pub fn flops_equivalence_report(
    schedules: &[CapacitySchedule],
    baseline_k: f64,
) -> Result<Vec<FlopsRow>> {
    if schedules.is_empty() {
        return Err(Error::input("no schedules to compare"));
    }
    schedules
        .iter()
        .map(|s| {
            let expected_k = expected_k(s, REPORT_RESOLUTION)?;
            let delta = expected_k - baseline_k;
            Ok(FlopsRow {
                kind: s.kind,
                expected_s: expected_s(s, REPORT_RESOLUTION)?,
                expected_k,
                delta,
                flagged: delta.abs() > FLOPS_TOLERANCE * baseline_k,
            })
        })
        .collect()
}

/// The seven schedules of the reference comparison: static at the midpoint,
/// then each dynamic family sharing `k_min`, `k_max`, `sigma`.
pub fn standard_schedules(k_min: f64, k_max: f64, sigma: f64) -> Result<Vec<CapacitySchedule>> {
    SchedulerKind::ALL
        .into_iter()
        .map(|kind| CapacitySchedule::new(kind, k_min, k_max)?.with_sigma(sigma))
        .collect()
}
