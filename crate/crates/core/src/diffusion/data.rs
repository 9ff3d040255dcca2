//! Synthetic Markov corpora and forward masking.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-stochastic first-order transition matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    transitions: Vec<Vec<f64>>,
}

impl MarkovChain {
    pub fn new(transitions: Vec<Vec<f64>>) -> Result<Self> {
        let v = transitions.len();
        for (i, row) in transitions.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != v || row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::input(format!("transition row {i} is not a distribution")));
            }
        }
        Ok(Self { transitions })
    }

    /// A peaked random chain: log-normal row weights with sigma 4, so each row
    /// puts most of its mass on a handful of successors (about 1.2 nats).
    pub fn random(vocab_size: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 4.0).expect("valid normal");
        let transitions = (0..vocab_size)
            .map(|_| {
                let w: Vec<f64> = (0..vocab_size).map(|_| f64::exp(normal.sample(rng))).collect();
                let sum: f64 = w.iter().sum();
                w.into_iter().map(|x| x / sum).collect()
            })
            .collect();
        Self { transitions }
    }

    pub fn vocab_size(&self) -> usize {
        self.transitions.len()
    }

    pub fn transitions(&self) -> &[Vec<f64>] {
        &self.transitions
    }

    fn next(&self, state: usize, rng: &mut impl Rng) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let row = &self.transitions[state];
        for (j, p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return j;
            }
        }
        row.len() - 1
    }

    pub fn sample(&self, n_sequences: usize, seq_len: usize, rng: &mut impl Rng) -> Corpus {
        let v = self.vocab_size();
        let sequences = (0..n_sequences)
            .map(|_| {
                let mut seq = Vec::with_capacity(seq_len);
                let mut state = rng.random_range(0..v);
                for _ in 0..seq_len {
                    seq.push(state);
                    state = self.next(state, rng);
                }
                seq
            })
            .collect();
        Corpus {
            sequences,
            vocab_size: v,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub sequences: Vec<Vec<usize>>,
    pub vocab_size: usize,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Little-endian u32 tokens, sequence after sequence.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.sequences
            .iter()
            .flatten()
            .flat_map(|&t| (t as u32).to_le_bytes())
            .collect()
    }
}

/// Deterministic corpus from a seeded random Markov chain over the vocabulary.
pub fn generate_corpus(seed: u64, n_sequences: usize, seq_len: usize, vocab_size: usize) -> Result<Corpus> {
    if vocab_size == 0 || seq_len == 0 {
        return Err(Error::input("corpus needs a positive vocabulary and length"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = MarkovChain::random(vocab_size, &mut rng);
    Ok(chain.sample(n_sequences, seq_len, &mut rng))
}

/// Training and held-out sets sampled from the same seeded chain.
pub fn generate_split(
    seed: u64,
    n_train: usize,
    n_eval: usize,
    seq_len: usize,
    vocab_size: usize,
) -> Result<(Corpus, Corpus)> {
    let mut all = generate_corpus(seed, n_train + n_eval, seq_len, vocab_size)?;
    let eval = all.sequences.split_off(n_train);
    Ok((
        all,
        Corpus {
            sequences: eval,
            vocab_size,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub mask_ratio: f64,
    /// Sorted ascending.
    pub masked_positions: Vec<usize>,
    pub mask_token_id: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSequence {
    pub tokens: Vec<usize>,
    pub spec: MaskSpec,
    /// `(position, original token)` for every masked position.
    pub targets: Vec<(usize, usize)>,
}

/// Number of positions masked at ratio `r`: `round(r * len)`, half up.
pub fn mask_count(r: f64, len: usize) -> usize {
    ((r * len as f64 + 0.5).floor() as usize).min(len)
}

/// Replaces `round(r * L)` uniformly chosen positions with the mask token.
pub fn apply_mask(sequence: &[usize], r: f64, mask_token_id: usize, rng: &mut impl Rng) -> Result<MaskedSequence> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::input(format!("mask ratio {r} outside [0, 1]")));
    }
    mask_exact(sequence, mask_count(r, sequence.len()), r, mask_token_id, rng)
}

/// Masks exactly `n_masked` uniformly chosen positions.
pub fn mask_exact(
    sequence: &[usize],
    n_masked: usize,
    ratio: f64,
    mask_token_id: usize,
    rng: &mut impl Rng,
) -> Result<MaskedSequence> {
    if n_masked > sequence.len() {
        return Err(Error::input(format!(
            "cannot mask {n_masked} of {} positions",
            sequence.len()
        )));
    }
    let mut positions = sample(rng, sequence.len(), n_masked).into_vec();
    positions.sort_unstable();
    let mut tokens = sequence.to_vec();
    let targets = positions
        .iter()
        .map(|&p| {
            tokens[p] = mask_token_id;
            (p, sequence[p])
        })
        .collect();
    Ok(MaskedSequence {
        tokens,
        spec: MaskSpec {
            mask_ratio: ratio,
            masked_positions: positions,
            mask_token_id,
        },
        targets,
    })
}
