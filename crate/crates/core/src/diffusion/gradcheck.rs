//! Central finite-difference verification of the analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ForwardOptions, LayerSelection, Model, ParamGroup};
use super::tape::Tape;
use super::train::{loss_and_grads, MaskedBatch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    /// Central-difference step. Toy-model gradients sit near 1e-7, so much
    /// smaller steps drown them in round-off.
    pub epsilon: f64,
    /// Coordinates sampled from each of the router, expert, attention and
    /// embedding groups; a quarter as many again from norms and output.
    pub coords_per_group: usize,
    pub tolerance: f64,
    /// Denominator floor for the relative error, absorbing finite-difference
    /// round-off on near-zero gradients.
    pub abs_floor: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-4,
            coords_per_group: 60,
            tolerance: 1e-4,
            abs_floor: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordCheck {
    pub param: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    /// Perturbing this coordinate flips a live routing decision.
    pub near_tie: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_checked: usize,
    pub n_skipped: usize,
    pub coords: Vec<CoordCheck>,
}

fn frozen_loss(model: &Model, batch: &MaskedBatch, frozen: &[LayerSelection]) -> Result<(f64, bool)> {
    let mut tape = Tape::new();
    let opts = ForwardOptions {
        frozen: Some(frozen),
        ..Default::default()
    };
    let out = model.forward(&mut tape, &batch.batch, &opts)?;
    let ce = tape.cross_entropy(out.logits, &batch.targets);
    let loss = tape.scalar(ce) + out.aux_loss.map_or(0.0, |a| tape.scalar(a));
    Ok((loss, out.selection_matches_live))
}

/// Compares analytic gradients of the training loss with central differences
/// while the routed pair set is held at its unperturbed value.
pub fn grad_check(model: &Model, batch: &MaskedBatch, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    if !(cfg.epsilon > 0.0 && cfg.tolerance > 0.0) {
        return Err(Error::config("epsilon and tolerance must be positive"));
    }
    let mut tape = Tape::new();
    let live = model.forward(&mut tape, &batch.batch, &ForwardOptions::default())?;
    let frozen = live.selections;
    drop(tape);
    let analytic = loss_and_grads(
        model,
        batch,
        &ForwardOptions {
            frozen: Some(&frozen),
            ..Default::default()
        },
    )?
    .grads;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let groups = model.param_groups();
    let mut picks: Vec<(usize, usize, usize)> = Vec::new();
    let quotas = [
        (vec![ParamGroup::Router], cfg.coords_per_group),
        (vec![ParamGroup::Expert], cfg.coords_per_group),
        (vec![ParamGroup::Attention], cfg.coords_per_group),
        (vec![ParamGroup::Embedding], cfg.coords_per_group),
        (vec![ParamGroup::Norm, ParamGroup::Output], cfg.coords_per_group / 4),
    ];
    for (wanted, quota) in quotas {
        let tensors: Vec<usize> = (0..groups.len()).filter(|&i| wanted.contains(&groups[i])).collect();
        let mut all: Vec<(usize, usize, usize)> = tensors
            .iter()
            .flat_map(|&t| {
                let (r, c) = model.params()[t].dim();
                (0..r).flat_map(move |i| (0..c).map(move |j| (t, i, j)))
            })
            .collect();
        all.shuffle(&mut rng);
        picks.extend(all.into_iter().take(quota));
    }
    let mut probe = model.clone();
    let mut coords = Vec::with_capacity(picks.len());
    for (t, i, j) in picks {
        let orig = probe.params()[t][[i, j]];
        probe.params_mut()[t][[i, j]] = orig + cfg.epsilon;
        let (up, up_ok) = frozen_loss(&probe, batch, &frozen)?;
        probe.params_mut()[t][[i, j]] = orig - cfg.epsilon;
        let (down, down_ok) = frozen_loss(&probe, batch, &frozen)?;
        probe.params_mut()[t][[i, j]] = orig;
        let numeric = (up - down) / (2.0 * cfg.epsilon);
        let a = analytic[t][[i, j]];
        let rel_error = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.abs_floor);
        coords.push(CoordCheck {
            param: model.param_names()[t].clone(),
            row: i,
            col: j,
            analytic: a,
            numeric,
            rel_error,
            near_tie: !(up_ok && down_ok),
        });
    }

    let checked: Vec<&CoordCheck> = coords.iter().filter(|c| !c.near_tie).collect();
    let worst = checked.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error));
    let report = GradCheckReport {
        max_rel_error: worst.map_or(0.0, |c| c.rel_error),
        n_checked: checked.len(),
        n_skipped: coords.len() - checked.len(),
        coords: coords.clone(),
    };
    if let Some(w) = worst {
        if w.rel_error > cfg.tolerance {
            let count = checked.iter().filter(|c| c.rel_error > cfg.tolerance).count();
            return Err(Error::GradientCheckFailed {
                count,
                worst: w.rel_error,
                location: format!("{}[{}, {}]", w.param, w.row, w.col),
            });
        }
    }
    Ok(report)
}
