//! The desk-scale decoder-only transformer, its byte tokenizer, trainer and
//! checkpoint container.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;
pub mod tokenizer;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{LayerWidths, ModelConfig, NORM_EPS};
pub use forward::{
    forward_graph, forward_logits, layer_outputs, loss_graph, nll_loss, Frozen, Trainable,
    WeightBinder,
};
pub use params::{expected_shapes, names, Model};
pub use tokenizer::{byte_detokenize, byte_tokenize, ByteTokenizer, BOS_ID};
pub use train::{train_steps, TrainConfig, TrainReport, WindowSampler};
