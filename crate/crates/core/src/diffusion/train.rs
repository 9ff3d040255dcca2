//! AdamW training on masked-position cross-entropy, and per-bin evaluation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::{mask_count, mask_exact, Corpus};
use super::model::{token_nll, ForwardOptions, Model, SequenceBatch};
use super::tape::{Mat, Tape};
use crate::error::{Error, Result};
use crate::routing::LoadStats;
use crate::trace::{mask_counts_in_bin, LossRecord, LossTrace, N_BINS};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub eval_interval: u64,
    pub eval_samples_per_bin: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub optimizer: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            learning_rate: 3e-3,
            total_steps: 500,
            seed: 0,
            eval_interval: 25,
            eval_samples_per_bin: 32,
            grad_clip: 1.0,
            optimizer: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_interval == 0 || self.eval_samples_per_bin == 0 {
            return Err(Error::config("batch_size, eval_interval and eval_samples_per_bin must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("bad learning rate {}", self.learning_rate)));
        }
        let o = &self.optimizer;
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::config("optimizer needs betas in [0, 1), eps > 0, weight_decay >= 0"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip must be >= 0"));
        }
        Ok(())
    }
}

/// First and second moment estimates, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub t: u64,
}

impl AdamState {
    pub fn new(model: &Model) -> Self {
        let zeros = || model.params().iter().map(|p| Mat::zeros(p.dim())).collect();
        Self { m: zeros(), v: zeros(), t: 0 }
    }
}

/// A batch with its masked-position targets; rows are `b * L + position`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub batch: SequenceBatch,
    pub targets: Vec<(usize, usize)>,
}

impl MaskedBatch {
    /// Masks `n_masked[b]` positions of sequence `b`.
    pub fn from_counts(
        sequences: &[&[usize]],
        n_masked: &[usize],
        mask_token_id: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let l = sequences.first().map_or(0, |s| s.len());
        let mut tokens = Vec::with_capacity(sequences.len());
        let mut ratios = Vec::with_capacity(sequences.len());
        let mut targets = Vec::new();
        for (b, (seq, &n)) in sequences.iter().zip(n_masked).enumerate() {
            let r = n as f64 / l as f64;
            let m = mask_exact(seq, n, r, mask_token_id, rng)?;
            targets.extend(m.targets.iter().map(|&(p, t)| (b * l + p, t)));
            tokens.push(m.tokens);
            ratios.push(r);
        }
        Ok(Self {
            batch: SequenceBatch::new(tokens, ratios),
            targets,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub ce_loss: f64,
    pub aux_loss: f64,
    pub layer_stats: Vec<LoadStats>,
    pub realized_pairs: u64,
    pub n_targets: usize,
}

/// Loss, analytic gradients and routing stats for one batch without updating.
pub struct LossAndGrads {
    pub ce_loss: f64,
    pub aux_loss: f64,
    pub grads: Vec<Mat>,
    pub layer_loads: Vec<Vec<usize>>,
    pub layer_stats: Vec<LoadStats>,
    pub realized_pairs: u64,
}

pub fn loss_and_grads(model: &Model, batch: &MaskedBatch, opts: &ForwardOptions<'_>) -> Result<LossAndGrads> {
    if batch.targets.is_empty() {
        return Err(Error::UndefinedLoss("batch has no masked positions".into()));
    }
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, &batch.batch, opts)?;
    let ce = tape.cross_entropy(out.logits, &batch.targets);
    let total = match out.aux_loss {
        Some(aux) => tape.sum(&[ce, aux]),
        None => ce,
    };
    let mut grads = tape.backward(total);
    let grads = out
        .params
        .iter()
        .zip(model.params())
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Mat::zeros(p.dim())))
        .collect();
    Ok(LossAndGrads {
        ce_loss: tape.scalar(ce),
        aux_loss: out.aux_loss.map_or(0.0, |a| tape.scalar(a)),
        grads,
        layer_loads: out.layer_loads,
        layer_stats: out.layer_stats,
        realized_pairs: out.realized_pairs,
    })
}

/// One AdamW step. Loss-free biases are updated from this step's loads.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamState,
    batch: &MaskedBatch,
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepReport> {
    let LossAndGrads {
        ce_loss,
        aux_loss,
        mut grads,
        layer_loads,
        layer_stats,
        realized_pairs,
    } = loss_and_grads(model, batch, &ForwardOptions::default())?;
    let loss = ce_loss + aux_loss;
    if !loss.is_finite() || grads.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::TrainingDiverged { step, loss });
    }

    if cfg.grad_clip > 0.0 {
        let norm = grads.iter().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        if norm > cfg.grad_clip {
            let scale = cfg.grad_clip / norm;
            grads.iter_mut().for_each(|g| g.mapv_inplace(|v| v * scale));
        }
    }

    let o = cfg.optimizer;
    opt.t += 1;
    let bc1 = 1.0 - o.beta1.powi(opt.t as i32);
    let bc2 = 1.0 - o.beta2.powi(opt.t as i32);
    let lr = cfg.learning_rate;
    for ((p, g), (m, v)) in model
        .params_mut()
        .iter_mut()
        .zip(&grads)
        .zip(opt.m.iter_mut().zip(opt.v.iter_mut()))
    {
        ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
            *m = o.beta1 * *m + (1.0 - o.beta1) * g;
            *v = o.beta2 * *v + (1.0 - o.beta2) * g * g;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + o.eps) + o.weight_decay * *p;
            *p -= lr * update;
        });
    }
    model.update_biases(&layer_loads)?;

    Ok(StepReport {
        step,
        loss,
        ce_loss,
        aux_loss,
        layer_stats,
        realized_pairs,
        n_targets: batch.targets.len(),
    })
}

/// Stateful training loop: model, optimizer state, and the RNG that draws
/// batches, mask ratios and masks.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub opt: AdamState,
    pub cfg: TrainConfig,
    pub rng: ChaCha8Rng,
    /// Steps completed so far.
    pub step: u64,
    /// Routed pairs summed over every training step so far.
    pub total_pairs: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            opt: AdamState::new(&model),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            model,
            cfg,
            step: 0,
            total_pairs: 0,
        })
    }

    /// Masks each sequence at its own `r ~ Uniform(0, 1)`, with at least one
    /// masked position so every sequence contributes to the loss.
    pub fn mask_batch(&mut self, sequences: &[&[usize]]) -> Result<MaskedBatch> {
        let l = sequences.first().map_or(0, |s| s.len());
        let counts: Vec<usize> = sequences
            .iter()
            .map(|_| {
                let r: f64 = self.rng.random();
                mask_count(r, l).max(1)
            })
            .collect();
        let mask = self.model.config().mask_token_id();
        MaskedBatch::from_counts(sequences, &counts, mask, &mut self.rng)
    }

    /// Trains on the given sequences as one batch.
    pub fn step_on(&mut self, sequences: &[&[usize]]) -> Result<StepReport> {
        let batch = self.mask_batch(sequences)?;
        let report = train_step(&mut self.model, &mut self.opt, &batch, &self.cfg, self.step)?;
        self.step += 1;
        self.total_pairs += report.realized_pairs;
        Ok(report)
    }

    /// Trains on `batch_size` sequences drawn uniformly with replacement.
    pub fn step(&mut self, corpus: &Corpus) -> Result<StepReport> {
        if corpus.is_empty() {
            return Err(Error::input("empty training corpus"));
        }
        let idx: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| self.rng.random_range(0..corpus.len()))
            .collect();
        let seqs: Vec<&[usize]> = idx.iter().map(|&i| corpus.sequences[i].as_slice()).collect();
        self.step_on(&seqs)
    }

    /// One pass over `corpus` in order, `batch_size` sequences at a time.
    pub fn epoch(&mut self, corpus: &Corpus) -> Result<Vec<StepReport>> {
        corpus
            .sequences
            .chunks(self.cfg.batch_size)
            .map(|chunk| {
                let seqs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
                self.step_on(&seqs)
            })
            .collect()
    }
}

/// Seed offset for the fixed evaluation batches drawn by [`Trainer::run`].
pub const EVAL_SEED_OFFSET: u64 = 0x5eed;

impl Trainer {
    /// Trains `n_steps` more steps on `corpus`, evaluating on `eval` before the
    /// first step, every `eval_interval` steps, and after the last one. The
    /// evaluation batches are drawn once, so every point sees the same data.
    pub fn run(&mut self, corpus: &Corpus, eval: &Corpus, n_steps: u64) -> Result<LossTrace> {
        self.run_with(corpus, eval, n_steps, |_| {})
    }

    /// [`Trainer::run`] that also hands every step report to `on_step`.
    pub fn run_with(
        &mut self,
        corpus: &Corpus,
        eval: &Corpus,
        n_steps: u64,
        mut on_step: impl FnMut(&StepReport),
    ) -> Result<LossTrace> {
        let batches = draw_eval_batches(
            eval,
            self.cfg.eval_samples_per_bin,
            self.cfg.batch_size,
            self.model.config().mask_token_id(),
            self.cfg.seed.wrapping_add(EVAL_SEED_OFFSET),
        )?;
        let end = self.step + n_steps;
        let mut trace = LossTrace::default();
        loop {
            if self.step % self.cfg.eval_interval == 0 || self.step == end {
                for rec in evaluate_batches(&self.model, &batches, self.step)? {
                    trace.push(rec)?;
                }
            }
            if self.step == end {
                return Ok(trace);
            }
            on_step(&self.step(corpus)?);
        }
    }
}

/// A masked evaluation batch whose sequences all fall in one ratio bin.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBatch {
    pub bin: usize,
    pub masked: MaskedBatch,
}

/// Draws `n_samples_per_bin` masked sequences per bin. The masked count is
/// uniform over the counts whose realized ratio lies in the bin.
pub fn draw_eval_batches(
    eval: &Corpus,
    n_samples_per_bin: usize,
    batch_size: usize,
    mask_token_id: usize,
    seed: u64,
) -> Result<Vec<EvalBatch>> {
    if eval.is_empty() || n_samples_per_bin == 0 || batch_size == 0 {
        return Err(Error::input("evaluation needs sequences, samples and a batch size"));
    }
    let l = eval.sequences[0].len();
    if l < N_BINS {
        return Err(Error::input(format!("sequences shorter than {N_BINS} cannot fill every bin")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for bin in 0..N_BINS {
        let (lo, hi) = mask_counts_in_bin(bin, l);
        let mut remaining = n_samples_per_bin;
        while remaining > 0 {
            let size = remaining.min(batch_size);
            remaining -= size;
            let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..eval.len())).collect();
            let seqs: Vec<&[usize]> = idx.iter().map(|&i| eval.sequences[i].as_slice()).collect();
            let counts: Vec<usize> = (0..size).map(|_| rng.random_range(lo..=hi)).collect();
            let masked = MaskedBatch::from_counts(&seqs, &counts, mask_token_id, &mut rng)?;
            out.push(EvalBatch { bin, masked });
        }
    }
    Ok(out)
}

/// Token-weighted mean loss per bin over prepared batches. Batches are
/// evaluated in parallel and reduced in input order.
pub fn evaluate_batches(model: &Model, batches: &[EvalBatch], step: u64) -> Result<Vec<LossRecord>> {
    let per_batch: Vec<(f64, u64, u64, u64)> = batches
        .par_iter()
        .map(|eb| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &eb.masked.batch, &ForwardOptions::default())?;
            let logits = tape.value(out.logits);
            let nll: f64 = eb
                .masked
                .targets
                .iter()
                .map(|&(row, t)| token_nll(logits.row(row).iter().copied(), logits[[row, t]]))
                .sum();
            Ok((nll, eb.masked.targets.len() as u64, out.realized_pairs, logits.nrows() as u64))
        })
        .collect::<Result<_>>()?;
    let n_layers = model.config().n_layers as f64;
    let mut acc = [(0.0, 0u64, 0u64, 0u64); N_BINS];
    for (eb, (nll, count, pairs, rows)) in batches.iter().zip(per_batch) {
        let a = &mut acc[eb.bin];
        a.0 += nll;
        a.1 += count;
        a.2 += pairs;
        a.3 += rows;
    }
    acc.iter()
        .enumerate()
        .filter(|(_, a)| a.1 > 0)
        .map(|(bin, &(nll, count, pairs, rows))| {
            let mean_loss = nll / count as f64;
            if !mean_loss.is_finite() {
                return Err(Error::TrainingDiverged { step, loss: mean_loss });
            }
            Ok(LossRecord {
                step,
                bin,
                mean_loss,
                token_count: count,
                realized_k: pairs as f64 / (rows as f64 * n_layers),
                realized_pairs: pairs,
            })
        })
        .collect()
}

/// Draws fresh evaluation batches from `seed` and evaluates them.
pub fn evaluate_per_bin(
    model: &Model,
    eval: &Corpus,
    n_samples_per_bin: usize,
    seed: u64,
    step: u64,
) -> Result<Vec<LossRecord>> {
    let batches = draw_eval_batches(eval, n_samples_per_bin, 16, model.config().mask_token_id(), seed)?;
    evaluate_batches(model, &batches, step)
}

/// Token-weighted mean loss over all bins of a set of records.
pub fn overall_loss(records: &[LossRecord]) -> f64 {
    let (nll, n) = records
        .iter()
        .fold((0.0, 0u64), |(s, n), r| (s + r.mean_loss * r.token_count as f64, n + r.token_count));
    nll / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::data::generate_corpus;
    use crate::diffusion::model::{ModelConfig, RoutingConfig};
    use crate::routing::TcConfig;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            hidden_dim: 16,
            n_heads: 2,
            n_experts: 4,
            expert_ffn_dim: 8,
            n_shared_experts: 1,
            shared_ffn_dim: 8,
            vocab_size: 8,
            max_seq_len: 16,
            init_std: 0.02,
            routing: RoutingConfig::TokenChoice(TcConfig::dropless(2)),
        }
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let corpus = generate_corpus(1, 8, 16, 8).unwrap();
        let model = Model::new(tiny(), 0).unwrap();
        let mut t = Trainer::new(model.clone(), TrainConfig { learning_rate: 0.0, ..cfg() }).unwrap();
        t.step(&corpus).unwrap();
        assert_eq!(t.model.params(), model.params());
    }

    #[test]
    fn same_seed_same_trajectory() {
        let corpus = generate_corpus(2, 16, 16, 8).unwrap();
        let run = || {
            let mut t = Trainer::new(Model::new(tiny(), 3).unwrap(), cfg()).unwrap();
            (0..5).map(|_| t.step(&corpus).unwrap().loss.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn untrained_loss_is_near_uniform() {
        let corpus = generate_corpus(4, 32, 16, 8).unwrap();
        let model = Model::new(tiny(), 5).unwrap();
        let records = evaluate_per_bin(&model, &corpus, 16, 9, 0).unwrap();
        assert_eq!(records.len(), N_BINS);
        for r in records {
            assert!((r.mean_loss - 8f64.ln()).abs() < 0.05, "bin {} loss {}", r.bin, r.mean_loss);
        }
    }
}
