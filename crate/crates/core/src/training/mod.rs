//! Optimizer, schedule, corpora, checkpoints and the training loop.

mod checkpoint;
mod config;
mod data;
mod loss;
mod optim;
mod trainer;

pub use checkpoint::{decode, encode, inspect, read_header, Checkpoint, CheckpointHeader, TensorEntry, FORMAT_VERSION, MAGIC};
pub use config::TrainConfig;
pub use data::{byte_detokenize, byte_tokenize, make_induction_corpus, Corpus, CorpusKind, Document, Query};
pub use loss::{lm_loss, perplexity};
pub use optim::{adamw_step, clip_grad_norm, global_norm, lr_schedule, OptState};
pub use trainer::{batch_loss_and_grads, train_loop, MetricsLog, MetricsRow, TrainOutcome, Trainer};
