//! Desk-scale multilingual machine-translation lab.
//!
//! Everything here is built from scratch on a tiny f64 tensor library with
//! reverse-mode autodiff: a shared BPE tokenizer, parameter-matched
//! decoder-only and encoder-decoder transformers, a deterministic Adam
//! training loop, greedy/beam decoding, few-shot prompt construction, and
//! exact BLEU/chrF/TER scoring. The point is controlled comparisons between
//! the two architectures across translation direction regimes (1-1, 1-many,
//! many-1, many-many), not absolute quality.

pub mod data;
pub mod model;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use data::{DirectionConfig, DirectionDataset, Regime, SentencePair, TrainingExample};
pub use model::{ArchKind, Architecture, ModelConfig, TranslationModel};
pub use tensor::{Tape, Tensor, TensorError, Var};
pub use tokenizer::SubwordTokenizer;
pub use trainer::{LossLog, TrainConfig};
