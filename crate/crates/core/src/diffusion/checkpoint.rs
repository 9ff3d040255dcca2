//! Versioned JSON checkpoints that round-trip bit-exactly.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::model::{Model, ModelConfig};
use super::tape::Mat;
use super::train::{AdamState, TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::routing::BiasState;
use crate::FORMAT_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tensor {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    /// u128 as a decimal string; JSON numbers cannot hold it portably.
    word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BiasRecord {
    biases: Vec<f64>,
    update_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    format_version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    step: u64,
    total_pairs: u64,
    params: Vec<Tensor>,
    adam_m: Vec<Vec<f64>>,
    adam_v: Vec<Vec<f64>>,
    adam_t: u64,
    biases: Vec<BiasRecord>,
    rng: RngState,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        let m = &t.model;
        let flat = |x: &Mat| x.iter().copied().collect::<Vec<f64>>();
        Self {
            format_version: FORMAT_VERSION,
            model_config: *m.config(),
            train_config: t.cfg,
            step: t.step,
            total_pairs: t.total_pairs,
            params: m
                .param_names()
                .iter()
                .zip(m.params())
                .map(|(name, p)| Tensor {
                    name: name.clone(),
                    rows: p.nrows(),
                    cols: p.ncols(),
                    data: flat(p),
                })
                .collect(),
            adam_m: t.opt.m.iter().map(flat).collect(),
            adam_v: t.opt.v.iter().map(flat).collect(),
            adam_t: t.opt.t,
            biases: m
                .biases()
                .iter()
                .map(|b| BiasRecord {
                    biases: b.biases().to_vec(),
                    update_rate: b.update_rate(),
                })
                .collect(),
            rng: RngState {
                seed: t.rng.get_seed(),
                stream: t.rng.get_stream(),
                word_pos: t.rng.get_word_pos().to_string(),
            },
        }
    }

    pub fn into_trainer(self) -> Result<Trainer> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::input(format!(
                "checkpoint format {} not supported (expected {FORMAT_VERSION})",
                self.format_version
            )));
        }
        let shapes: Vec<(usize, usize)> = self.params.iter().map(|t| (t.rows, t.cols)).collect();
        let to_mat = |shape: (usize, usize), data: Vec<f64>| {
            Array2::from_shape_vec(shape, data).map_err(|e| Error::input(format!("bad tensor: {e}")))
        };
        let params = self
            .params
            .into_iter()
            .map(|t| to_mat((t.rows, t.cols), t.data))
            .collect::<Result<Vec<_>>>()?;
        let biases = if self.biases.is_empty() {
            None
        } else {
            Some(
                self.biases
                    .into_iter()
                    .map(|b| BiasState::from_biases(b.biases, b.update_rate))
                    .collect::<Result<Vec<_>>>()?,
            )
        };
        let model = Model::from_parts(self.model_config, params, biases)?;
        if self.adam_m.len() != shapes.len() || self.adam_v.len() != shapes.len() {
            return Err(Error::input("optimizer state does not match parameters"));
        }
        let moments = |vs: Vec<Vec<f64>>| {
            vs.into_iter()
                .zip(&shapes)
                .map(|(v, &s)| to_mat(s, v))
                .collect::<Result<Vec<_>>>()
        };
        let opt = AdamState {
            m: moments(self.adam_m)?,
            v: moments(self.adam_v)?,
            t: self.adam_t,
        };
        let mut rng = ChaCha8Rng::from_seed(self.rng.seed);
        rng.set_stream(self.rng.stream);
        rng.set_word_pos(
            self.rng
                .word_pos
                .parse()
                .map_err(|_| Error::input("bad rng word position"))?,
        );
        self.train_config.validate()?;
        Ok(Trainer {
            model,
            opt,
            cfg: self.train_config,
            rng,
            step: self.step,
            total_pairs: self.total_pairs,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
