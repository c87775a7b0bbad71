//! Encoder-decoder dialog model: teacher-forced NLL, beam search,
//! perplexity, training and checkpoints.

mod beam;
pub mod checkpoint;
mod config;
mod generate;
pub mod layers;
mod seq2seq;
mod train;

pub use beam::{beam_search, DecodeParams, StepScorer};
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use config::ModelConfig;
pub use seq2seq::{prepare, source_ids, BatchForward, DialogModel, Prepared, Seq2Seq};
pub use train::{
    batch_ki_items, batch_objective, pack_batches, pack_order, step_decomposes, train_dialog, Objective, EpochLog, KiInputs, StepLog, TrainConfig, TrainOutcome,
};
