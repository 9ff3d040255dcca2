//! Iterative unmasking from a fully masked sequence.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use super::data::mask_count;
use super::model::{Model, SequenceBatch};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaKind {
    /// `t / T`
    #[default]
    Linear,
    /// `1 - cos(pi t / 2T)`
    Cosine,
}

/// Fraction of free positions still masked after reaching step `t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiseSchedule {
    pub n_steps: usize,
    #[serde(default)]
    pub gamma: GammaKind,
}

impl DenoiseSchedule {
    pub fn linear(n_steps: usize) -> Self {
        Self {
            n_steps,
            gamma: GammaKind::Linear,
        }
    }

    pub fn gamma(&self, t: usize) -> f64 {
        let x = t.min(self.n_steps) as f64 / self.n_steps as f64;
        match self.gamma {
            GammaKind::Linear => x,
            GammaKind::Cosine => 1.0 - (FRAC_PI_2 * x).cos(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<usize>,
    /// Masked count remaining after each denoising step, in step order.
    pub masked_after_step: Vec<usize>,
}

/// Fills every `None` in `prompt`. At each step all masked positions are
/// predicted, and the most confident predictions are committed until
/// `round(gamma(t-1) * L_free)` positions remain masked. Ties go to the
/// lower position.
pub fn generate(model: &Model, prompt: &[Option<usize>], schedule: &DenoiseSchedule) -> Result<Generation> {
    let cfg = model.config();
    if schedule.n_steps == 0 {
        return Err(Error::input("denoising needs at least one step"));
    }
    if prompt.is_empty() || prompt.len() > cfg.max_seq_len {
        return Err(Error::input(format!(
            "prompt length {} outside 1..={}",
            prompt.len(),
            cfg.max_seq_len
        )));
    }
    if let Some(t) = prompt.iter().flatten().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::input(format!("prompt token {t} outside vocabulary")));
    }
    let l = prompt.len();
    let mask = cfg.mask_token_id();
    let l_free = prompt.iter().filter(|p| p.is_none()).count();
    let mut tokens: Vec<usize> = prompt.iter().map(|p| p.unwrap_or(mask)).collect();
    let mut masked_after_step = Vec::with_capacity(schedule.n_steps);

    for t in (1..=schedule.n_steps).rev() {
        let masked: Vec<usize> = (0..l).filter(|&i| tokens[i] == mask).collect();
        let target = mask_count(schedule.gamma(t - 1), l_free).min(masked.len());
        let to_commit = masked.len() - target;
        if to_commit > 0 {
            let ratio = masked.len() as f64 / l as f64;
            let logits = model.predict(&SequenceBatch::new(vec![tokens.clone()], vec![ratio]))?;
            let mut picks: Vec<(usize, usize, f64)> = masked
                .iter()
                .map(|&i| {
                    let row = logits.slice(ndarray::s![0, i, ..]);
                    let (best, &max) = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
                        .expect("non-empty vocabulary");
                    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                    (i, best, 1.0 / z)
                })
                .collect();
            picks.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            for &(i, tok, _) in picks.iter().take(to_commit) {
                tokens[i] = tok;
            }
        }
        masked_after_step.push(tokens.iter().filter(|&&x| x == mask).count());
    }
    Ok(Generation {
        tokens,
        masked_after_step,
    })
}
