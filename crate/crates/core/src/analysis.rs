//! Post-hoc analytics: per-bin convergence rates, FLOPs and throughput
//! accounting, and token-coverage probabilities.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{csv_err, LossTrace, N_BINS};

/// Cells with fewer points than this are reported as missing.
pub const MIN_POINTS_PER_CELL: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    windows: Vec<(u64, u64)>,
}

impl StageSpec {
    pub fn new(windows: Vec<(u64, u64)>) -> Result<Self> {
        for (i, &(a, b)) in windows.iter().enumerate() {
            if a >= b {
                return Err(Error::input(format!("empty stage window ({a}, {b})")));
            }
            if i > 0 && windows[i - 1].1 > a {
                return Err(Error::input("stage windows overlap or are out of order"));
            }
        }
        Ok(Self { windows })
    }

    pub fn windows(&self) -> &[(u64, u64)] {
        &self.windows
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Windows are half-open `[start, end)`, except that the final window
    /// also takes its end step.
    pub fn contains(&self, stage: usize, step: u64) -> bool {
        let (a, b) = self.windows[stage];
        step >= a && (step < b || (stage + 1 == self.windows.len() && step == b))
    }
}

/// Doubling windows `(start, 2 start), (2 start, 4 start), ...` truncated at `end`.
pub fn geometric_stages(start: u64, end: u64) -> Result<StageSpec> {
    if start == 0 || start >= end {
        return Err(Error::input(format!(
            "geometric stages need 0 < start < end, got ({start}, {end})"
        )));
    }
    let mut windows = Vec::new();
    let mut lo = start;
    while lo < end {
        let hi = lo.saturating_mul(2).min(end);
        windows.push((lo, hi));
        lo = hi;
    }
    StageSpec::new(windows)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn ols(points: &[(f64, f64)]) -> Option<LineFit> {
    let n = points.len();
    if n < 2 {
        return None;
    }
    let nf = n as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let my = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x - mx, y - my);
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Some(LineFit {
        slope,
        intercept: my - slope * mx,
        r2,
    })
}

/// Convergence rates per `[bin][stage]`; `None` marks a missing cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub stages: StageSpec,
    pub eta: Vec<Vec<Option<f64>>>,
    pub fit_r2: Vec<Vec<Option<f64>>>,
    pub n_points: Vec<Vec<usize>>,
}

impl ConvergenceReport {
    pub fn n_bins(&self) -> usize {
        self.eta.len()
    }

    pub fn missing_cells(&self) -> usize {
        self.eta.iter().flatten().filter(|c| c.is_none()).count()
    }

    /// `bin,stage_start,stage_end,eta,r2,n`; missing cells leave eta and r2 empty.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin", "stage_start", "stage_end", "eta", "r2", "n"])
            .map_err(csv_err)?;
        for (b, row) in self.eta.iter().enumerate() {
            for (s, eta) in row.iter().enumerate() {
                let (a, e) = self.stages.windows()[s];
                w.write_record([
                    b.to_string(),
                    a.to_string(),
                    e.to_string(),
                    fmt_opt(*eta),
                    fmt_opt(self.fit_r2[b][s]),
                    self.n_points[b][s].to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `eta_r = -d ln L_r / dt`, estimated by OLS of `ln L` against step within
/// each stage window.
pub fn convergence_rate(trace: &LossTrace, stages: &StageSpec) -> Result<ConvergenceReport> {
    if let Some(bad) = trace.records.iter().find(|r| !(r.mean_loss > 0.0)) {
        return Err(Error::input(format!(
            "loss {} at step {} bin {} is not positive",
            bad.mean_loss, bad.step, bad.bin
        )));
    }
    let n_stages = stages.len();
    let mut eta = vec![vec![None; n_stages]; N_BINS];
    let mut fit_r2 = vec![vec![None; n_stages]; N_BINS];
    let mut n_points = vec![vec![0; n_stages]; N_BINS];
    for bin in 0..N_BINS {
        let series = trace.series(bin);
        for stage in 0..n_stages {
            let pts: Vec<(f64, f64)> = series
                .iter()
                .filter(|(t, _)| stages.contains(stage, *t))
                .map(|&(t, l)| (t as f64, l.ln()))
                .collect();
            n_points[bin][stage] = pts.len();
            if pts.len() < MIN_POINTS_PER_CELL {
                continue;
            }
            if let Some(fit) = ols(&pts) {
                // Report +0.0 rather than -0.0 for flat traces.
                eta[bin][stage] = Some(0.0 - fit.slope);
                fit_r2[bin][stage] = Some(fit.r2);
            }
        }
    }
    Ok(ConvergenceReport {
        stages: stages.clone(),
        eta,
        fit_r2,
        n_points,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioReport {
    pub stages: StageSpec,
    /// `eta_dyn / eta_static`; `None` where either side is missing or the
    /// static rate is zero.
    pub ratio: Vec<Vec<Option<f64>>>,
}

impl RatioReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["bin", "stage_start", "stage_end", "ratio"])
            .map_err(csv_err)?;
        for (b, row) in self.ratio.iter().enumerate() {
            for (s, r) in row.iter().enumerate() {
                let (a, e) = self.stages.windows()[s];
                w.write_record([b.to_string(), a.to_string(), e.to_string(), fmt_opt(*r)])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn eta_ratio(dyn_report: &ConvergenceReport, static_report: &ConvergenceReport) -> Result<RatioReport> {
    if dyn_report.stages != static_report.stages || dyn_report.eta.len() != static_report.eta.len() {
        return Err(Error::input("convergence reports have different bins or stages"));
    }
    let ratio = dyn_report
        .eta
        .iter()
        .zip(&static_report.eta)
        .map(|(d_row, s_row)| {
            d_row
                .iter()
                .zip(s_row)
                .map(|(d, s)| match (d, s) {
                    (Some(d), Some(s)) if *s != 0.0 => Some(d / s),
                    _ => None,
                })
                .collect()
        })
        .collect();
    Ok(RatioReport {
        stages: dyn_report.stages.clone(),
        ratio,
    })
}

/// Architecture quantities that enter the forward FLOPs count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub batch: usize,
    pub seq_len: usize,
    pub n_layers: usize,
    pub hidden: usize,
    pub expert_ffn: usize,
    /// Total hidden width of all shared experts.
    pub shared_ffn: usize,
    pub routed_k: f64,
    pub n_experts: usize,
    pub vocab: usize,
}

/// Forward-pass FLOPs, counting a multiply-add as 2:
///
/// ```text
/// F = 2 B L N d^2 [ (4 + 2 L / d) + 3 (k d_ffn + d_shared) / d ] + 2 B L d V
/// ```
///
/// The attention term covers the Q/K/V/O projections and the score and value
/// products; the MLP term covers gated (three-matrix) experts. Router FLOPs
/// are not counted.
pub fn forward_flops(arch: &ArchSpec) -> f64 {
    let b = arch.batch as f64;
    let l = arch.seq_len as f64;
    let n = arch.n_layers as f64;
    let d = arch.hidden as f64;
    let attention = 4.0 + 2.0 * l / d;
    let mlp = 3.0 * (arch.routed_k * arch.expert_ffn as f64 + arch.shared_ffn as f64) / d;
    2.0 * b * l * n * d * d * (attention + mlp) + 2.0 * b * l * d * arch.vocab as f64
}

/// TFLOP/s per device.
pub fn throughput(f_fwd: f64, t_step_seconds: f64, n_gpus: usize) -> Result<f64> {
    if !(t_step_seconds > 0.0) || n_gpus == 0 {
        return Err(Error::input(format!(
            "throughput needs t_step > 0 and at least one device, got {t_step_seconds}s on {n_gpus}"
        )));
    }
    Ok(f_fwd / (t_step_seconds * 1e12 * n_gpus as f64))
}

/// `log10` of the probability that a token is unrouted in every layer.
pub fn all_layer_drop_log10(per_layer_drop: &[f64]) -> Result<f64> {
    if let Some(p) = per_layer_drop.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::input(format!("drop probability {p} outside [0, 1]")));
    }
    Ok(per_layer_drop.iter().map(|p| p.log10()).sum())
}

/// Product of independent per-layer drop probabilities, accumulated in log space.
pub fn all_layer_drop_prob(per_layer_drop: &[f64]) -> Result<f64> {
    Ok(10f64.powf(all_layer_drop_log10(per_layer_drop)?))
}
