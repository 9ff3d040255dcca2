//! A small masked diffusion language model with MoE feed-forward layers.

pub mod checkpoint;
pub mod data;
pub mod generate;
pub mod gradcheck;
pub mod model;
pub mod tape;
pub mod train;

pub use data::{apply_mask, generate_corpus, generate_split, Corpus, MaskSpec, MaskedSequence};
pub use generate::{generate, DenoiseSchedule};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use model::{
    masked_ce_loss, EcRouting, ForwardOptions, ForwardOutput, LayerSelection, Model, ModelConfig,
    ParamGroup, RoutingConfig, SequenceBatch,
};
pub use train::{evaluate_per_bin, train_step, AdamConfig, AdamState, StepReport, TrainConfig, Trainer};
