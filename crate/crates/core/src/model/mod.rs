//! Toy encoder–decoder transformer, synthetic tasks, and the training loop.

mod attention;
mod task;
mod train;
mod transformer;

pub use attention::{self_attention, AttentionLayer, BaseWeight, Projection, Target};
pub use task::{Example, Split, TaskKind, TaskSpec, BOS, EOS, FIRST_CONTENT};
pub use train::{decode_accuracy, decode_all, evaluate_loss, train, TrainConfig, TrainingTrace};
pub use transformer::{
    positional_encoding, AdapterKind, DecoderBlock, EncoderBlock, ModelConfig, ParamCounts, ToyTransformer,
};
