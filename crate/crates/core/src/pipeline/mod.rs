//! Synthetic tasks and the end-to-end experiment runner.

mod cipher;
mod experiment;
pub mod toy;

pub use cipher::{apply_cipher, encipher_sentence, is_anchor, make_cipher_task, CipherTable};
pub use experiment::{
    run_experiment, Anchor, CipherData, CrossmapConfig, DataConfig, ExperimentConfig, FileData, ModelConfig, Report,
    SyntheticConfig, System,
};
pub use toy::{ToyConfig, ToyLanguage};
