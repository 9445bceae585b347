//! Transformer encoder-decoder: training, transfer initialization, freezing
//! and beam search.

mod adam;
mod beam;
mod checkpoint;
mod float;
mod gradcheck;
mod layers;
mod model;
mod params;
mod train;
mod transfer;

pub use adam::{AdamConfig, OptimizerState};
pub use beam::{greedy, translate, translate_nbest, BeamConfig, Hypothesis};
pub use checkpoint::{best_path, load_checkpoint, save_checkpoint, MAGIC, VERSION};
pub use float::Float;
pub use gradcheck::{compare_gradients, gradient_check, relative_error, CoordCheck, GradCheckReport, DEFAULT_SAMPLES};
pub use model::{Batch, ForwardOpts, LossStats};
pub use params::{init_model, parameter_count, Component, FreezeMask, HyperParams, Layout, ModelParams, TensorSpec};
pub use train::{corpus_perplexity, encode_corpus, train, train_from, train_step, CheckpointRecord, IdPair, TrainConfig, TrainData, TrainLog, TrainOutcome};
pub use transfer::{extract_source_embedding, transfer_init, TransferReport};
